"""Static figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def read_metrics(path) -> dict:
    """Group a metrics CSV into per-client and global columns."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out: dict = {}
    for row in rows:
        series = out.setdefault(row["client"], {k: [] for k in row})
        for k, v in row.items():
            series[k].append(v)
    return out


def _floats(values):
    return np.array([float(v) if v not in ("", "nan") else np.nan for v in values])


def moving_average(values, window: int = 5) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if len(values) < window:
        return values
    kernel = np.ones(window) / window
    head = [values[:i + 1].mean() for i in range(window - 1)]
    return np.concatenate([head, np.convolve(values, kernel, mode="valid")])


def plot_accuracy(series: dict, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for client, cols in sorted(series.items()):
            rounds = _floats(cols["round"])
            if client == "global":
                ax.plot(rounds, _floats(cols["accuracy"]), color="k", lw=1.8, label="global model")
            else:
                ax.plot(rounds, _floats(cols["accuracy"]), lw=0.8, alpha=0.7, label=f"client {client}")
        ax.set_xlabel("round")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower right", ncol=2, frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_transmission(series: dict, path, window: int = 5) -> None:
    cols = series["global"]
    rounds = _floats(cols["round"])
    ratio = _floats(cols["transmission_ratio"])
    with plt.rc_context(STYLE):
        fig, (ax, ax_r) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        ax.plot(rounds, ratio, color="0.6", lw=0.8, label="per round")
        ax.plot(rounds, moving_average(ratio, window), color="C0", lw=1.6, label=f"moving average ({window})")
        ax.set_xlabel("round")
        ax.set_ylabel("transmission ratio")
        ax.legend(frameon=False)
        for part in ("part1", "part2", "part3"):
            ranks = _floats(cols[f"mean_rank_{part}"])
            if np.all(np.isnan(ranks)):
                continue
            ax_r.plot(rounds, ranks, lw=1.0, label=part)
        ax_r.set_xlabel("round")
        ax_r.set_ylabel("mean retained rank")
        ax_r.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_sweep(summaries: list, path) -> None:
    """Accuracy against mean transmission ratio, one point per run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for s in summaries:
            label = f"r={s['rank']}" if s.get("rank") else s["mode"]
            ax.scatter(s["mean_transmission_ratio"], s["final_accuracy"], s=25)
            ax.annotate(label, (s["mean_transmission_ratio"], s["final_accuracy"]),
                        textcoords="offset points", xytext=(4, 3))
        ax.set_xlabel("mean transmission ratio")
        ax.set_ylabel("final global accuracy")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def render_run(out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    series = read_metrics(out_dir / "metrics.csv")
    if "global" not in series:
        return []
    written = [out_dir / "accuracy.png", out_dir / "transmission.png"]
    plot_accuracy(series, written[0])
    plot_transmission(series, written[1])
    return written
