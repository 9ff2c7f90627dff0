"""Command-line runner: ``cepfed run`` and ``cepfed compare``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigFileError, config_to_dict, load_run_config
from .fedsim import MODES, ExperimentConfig, RoundFailure, RoundMetrics, run_experiment
from .hsvd import ConfigError

log = logging.getLogger("cepfed")

CSV_FIELDS = [
    "round", "client", "loss", "accuracy", "upload_bytes", "download_bytes",
    "transmission_ratio", "mean_rank_part1", "mean_rank_part2", "mean_rank_part3",
]
RATIO_WINDOW = 100
EXIT_OK, EXIT_REGRESSION, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_rows(metrics: list[RoundMetrics]):
    for m in metrics:
        for cid in range(len(m.train_loss)):
            ranks = m.client_ranks[cid]
            yield [m.round_index, cid, m.train_loss[cid], m.client_accuracy[cid], m.upload_bytes[cid],
                   m.download_bytes[cid], m.client_ratio[cid],
                   ranks["part1"], ranks["part2"], ranks["part3"]]
        yield [m.round_index, "global", m.global_loss, m.global_accuracy, sum(m.upload_bytes),
               sum(m.download_bytes), m.transmission_ratio,
               m.mean_rank["part1"], m.mean_rank["part2"], m.mean_rank["part3"]]


def write_metrics(metrics: list[RoundMetrics], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for row in metrics_rows(metrics):
            w.writerow([_fmt(v) for v in row])


def summarize(config: ExperimentConfig, metrics: list[RoundMetrics]) -> dict:
    acc = [m.global_accuracy for m in metrics]
    ratios = [m.transmission_ratio for m in metrics[:RATIO_WINDOW]]
    return {
        "mode": config.mode,
        "rank": config.rank,
        "seed": config.seed,
        "rounds_requested": config.rounds,
        "rounds_run": len(metrics),
        "final_accuracy": acc[-1] if acc else None,
        "best_accuracy": max(acc) if acc else None,
        "mean_transmission_ratio": sum(ratios) / len(ratios) if ratios else None,
        "total_upload_bytes": sum(sum(m.upload_bytes) for m in metrics),
        "total_download_bytes": sum(sum(m.download_bytes) for m in metrics),
        "accuracy_curve": acc,
        "config": config_to_dict(config),
    }


def _parse_ranks(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        ranks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--rank expects comma-separated integers, got {text!r}")
    if any(r < 1 for r in ranks):
        raise ConfigError("--rank values must be positive")
    return ranks


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.rounds is not None:
        changes["rounds"] = args.rounds
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.clients is not None:
        changes["n_clients"] = args.clients
    if args.eta is not None or args.gamma is not None:
        energy = cfg.energy
        if args.eta is not None:
            energy = replace(energy, eta=args.eta)
        if args.gamma is not None:
            energy = replace(energy, gamma=args.gamma)
        changes["energy"] = energy
    if args.dirichlet is not None:
        changes["dataset"] = replace(cfg.dataset, concentration=args.dirichlet)
    if changes.get("mode", cfg.mode) != "fixed_rank":
        changes["rank"] = None
    return replace(cfg, **changes) if changes else cfg


def run_one(cfg: ExperimentConfig, out: Path, plots: bool) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    metrics = run_experiment(cfg)
    write_metrics(metrics, out / "metrics.csv")
    summary = summarize(cfg, metrics)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if plots:
        from .plots import render_run

        render_run(out)
    return summary


def cmd_run(args) -> int:
    try:
        if args.config:
            cfg, opts = load_run_config(args.config)
        else:
            cfg, opts = ExperimentConfig(), {}
        if args.mode == "fixed_rank" and not args.rank and cfg.rank is None:
            raise ConfigError("--mode fixed_rank needs --rank")
        ranks = _parse_ranks(args.rank)
        if ranks and (args.mode or cfg.mode) != "fixed_rank":
            raise ConfigError("--rank only applies to --mode fixed_rank")
        if ranks:
            cfg = replace(cfg, mode="fixed_rank", rank=ranks[0])
        cfg = _apply_flags(cfg, args)
        if cfg.mode == "fixed_rank" and not ranks:
            ranks = [cfg.rank]
        cfg.layer_specs()
    except ConfigFileError as exc:
        for line in exc.problems:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out or opts.get("out") or "runs")
    plots = args.plots or opts.get("plots", False)
    try:
        if len(ranks) > 1:
            summaries = []
            for r in ranks:
                summaries.append(run_one(replace(cfg, rank=r), out / f"fixed_rank_r{r}", plots))
                print(f"rank {r}: final accuracy {summaries[-1]['final_accuracy']:.4f}, "
                      f"mean transmission ratio {summaries[-1]['mean_transmission_ratio']:.4f}")
            (out / "sweep.json").write_text(json.dumps(
                [{k: s[k] for k in ("rank", "final_accuracy", "best_accuracy", "mean_transmission_ratio")}
                 for s in summaries], indent=2) + "\n")
            if plots:
                from .plots import plot_sweep

                plot_sweep(summaries, out / "sweep.png")
        else:
            s = run_one(cfg, out, plots)
            if s["rounds_run"]:
                print(f"{cfg.mode}: {s['rounds_run']} rounds, final accuracy {s['final_accuracy']:.4f}, "
                      f"best {s['best_accuracy']:.4f}, mean transmission ratio {s['mean_transmission_ratio']:.4f}")
            else:
                print(f"{cfg.mode}: 0 rounds")
    except RoundFailure as exc:
        print(f"runtime error in round {exc.round_index}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _load_summary(path: str) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "summary.json"
    return json.loads(p.read_text())


def comparable(base: dict, cand: dict) -> list[str]:
    """Reasons the two summaries cannot be compared (empty when they can)."""
    problems = []
    for key in ("seed", "rounds_requested"):
        if base.get(key) != cand.get(key):
            problems.append(f"{key} differs: {base.get(key)} vs {cand.get(key)}")
    if base["config"].get("dataset") != cand["config"].get("dataset"):
        problems.append("dataset configuration differs")
    if base["config"].get("n_clients") != cand["config"].get("n_clients"):
        problems.append("client count differs")
    return problems


def compare_report(base: dict, cand: dict) -> dict:
    def delta(key):
        a, b = base.get(key), cand.get(key)
        return None if a is None or b is None else b - a

    return {
        "baseline_mode": base["mode"],
        "candidate_mode": cand["mode"],
        "baseline_final_accuracy": base["final_accuracy"],
        "candidate_final_accuracy": cand["final_accuracy"],
        "final_accuracy_delta": delta("final_accuracy"),
        "best_accuracy_delta": delta("best_accuracy"),
        "upload_bytes_delta": delta("total_upload_bytes"),
        "download_bytes_delta": delta("total_download_bytes"),
        "transmission_ratio_delta": delta("mean_transmission_ratio"),
    }


def cmd_compare(args) -> int:
    base, cand = _load_summary(args.baseline), _load_summary(args.candidate)
    problems = comparable(base, cand)
    if problems:
        for p in problems:
            print(f"refusing to compare: {p}", file=sys.stderr)
        return EXIT_CONFIG
    report = compare_report(base, cand)
    for k, v in report.items():
        print(f"{k}: {v}")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2) + "\n")
    d = report["final_accuracy_delta"]
    if d is not None and d < -args.tolerance:
        print(f"regression: final accuracy dropped by {-d:.4f} (tolerance {args.tolerance})", file=sys.stderr)
        return EXIT_REGRESSION
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plots import render_run

    for path in render_run(args.dir):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cepfed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment (or a fixed-rank sweep)")
    run.add_argument("--config", help="JSON run configuration")
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--rounds", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--rank", help="fixed rank, or comma-separated ranks for a sweep")
    run.add_argument("--eta", type=float)
    run.add_argument("--gamma", type=float)
    run.add_argument("--clients", type=int)
    run.add_argument("--dirichlet", type=float, help="Dirichlet concentration for the label split")
    run.add_argument("--out", help="output directory (default: runs)")
    run.add_argument("--plots", action="store_true", help="also render PNG figures")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="compare two run summaries")
    cmp_.add_argument("baseline")
    cmp_.add_argument("candidate")
    cmp_.add_argument("--tolerance", type=float, default=0.0,
                      help="allowed drop in final accuracy before exiting with status 1")
    cmp_.add_argument("--json", help="also write the report as JSON")
    cmp_.set_defaults(func=cmd_compare)

    plot = sub.add_parser("plot", help="render figures for an existing run directory")
    plot.add_argument("dir")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
