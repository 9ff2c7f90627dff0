import csv
import json

import pytest

from cepfed import cli

SMALL = {
    "n_clients": 3,
    "batch_size": 32,
    "learning_rate": 1e-3,
    "rounds": 2,
    "patience": None,
    "widths": [4, 8, 8, 16, 16],
    "energy": {"group_channels": 8, "group_rank": 4},
    "dataset": {"synthetic": {"samples_per_class": 30}},
}


@pytest.fixture
def config_path(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_zero_rounds_writes_header_only(tmp_path, config_path):
    out = tmp_path / "r"
    assert _run("run", "--config", config_path, "--mode", "fedavg", "--rounds", 0, "--out", out) == 0
    rows = _rows(out / "metrics.csv")
    assert rows == [cli.CSV_FIELDS]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rounds_run"] == 0 and summary["final_accuracy"] is None


def test_csv_layout(tmp_path, config_path):
    out = tmp_path / "r"
    assert _run("run", "--config", config_path, "--out", out) == 0
    rows = _rows(out / "metrics.csv")
    assert rows[0] == cli.CSV_FIELDS
    body = rows[1:]
    # three clients plus one global row per round, two rounds
    assert len(body) == 8
    assert [r[1] for r in body[:4]] == ["0", "1", "2", "global"]
    assert int(body[3][4]) == sum(int(r[4]) for r in body[:3])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rounds_run"] == 2
    assert summary["final_accuracy"] == float(body[-1][3])
    ratios = [float(r[6]) for r in body if r[1] == "global"]
    assert summary["mean_transmission_ratio"] == pytest.approx(sum(ratios) / 2)


def test_same_seed_gives_identical_csv(tmp_path, config_path):
    for name in ("a", "b"):
        assert _run("run", "--config", config_path, "--seed", 7, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_rank_sweep(tmp_path, config_path):
    out = tmp_path / "sweep"
    assert _run("run", "--config", config_path, "--mode", "fixed_rank", "--rank", "1,2,4",
                "--rounds", 1, "--out", out) == 0
    sweep = json.loads((out / "sweep.json").read_text())
    assert [s["rank"] for s in sweep] == [1, 2, 4]
    ratios = [s["mean_transmission_ratio"] for s in sweep]
    assert ratios == sorted(ratios)
    for r in (1, 2, 4):
        assert (out / f"fixed_rank_r{r}" / "metrics.csv").exists()


def test_flags_override_config(tmp_path, config_path):
    out = tmp_path / "r"
    assert _run("run", "--config", config_path, "--rounds", 1, "--eta", 0.5, "--gamma", 0.0,
                "--clients", 2, "--dirichlet", 5.0, "--out", out) == 0
    cfg = json.loads((out / "summary.json").read_text())["config"]
    assert cfg["energy"]["eta"] == 0.5 and cfg["energy"]["gamma"] == 0.0
    assert cfg["n_clients"] == 2 and cfg["dataset"]["concentration"] == 5.0


def test_bad_config_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"roundz": 1}))
    assert _run("run", "--config", p) == cli.EXIT_CONFIG
    assert "did you mean 'rounds'" in capsys.readouterr().err


def test_rank_without_fixed_mode_is_config_error(config_path):
    assert _run("run", "--config", config_path, "--mode", "ceperfed", "--rank", "4") == cli.EXIT_CONFIG
    assert _run("run", "--config", config_path, "--mode", "fixed_rank") == cli.EXIT_CONFIG
    assert _run("run", "--config", config_path, "--mode", "fixed_rank", "--rank", "x") == cli.EXIT_CONFIG


def test_runtime_failure_exits_3(tmp_path, capsys):
    p = tmp_path / "diverge.json"
    p.write_text(json.dumps({**SMALL, "learning_rate": 1e300}))
    assert _run("run", "--config", p, "--out", tmp_path / "r") == cli.EXIT_RUNTIME
    assert "round 0" in capsys.readouterr().err


# -- compare ------------------------------------------------------------------

@pytest.fixture
def two_runs(tmp_path, config_path):
    a, b = tmp_path / "ce", tmp_path / "na"
    assert _run("run", "--config", config_path, "--seed", 1, "--out", a) == 0
    assert _run("run", "--config", config_path, "--seed", 1, "--mode", "no_alpha", "--out", b) == 0
    return a, b


def test_compare_identical(two_runs, capsys):
    a, _ = two_runs
    assert _run("compare", a, a) == 0
    out = capsys.readouterr().out
    assert "final_accuracy_delta: 0.0" in out
    assert "upload_bytes_delta: 0" in out


def test_compare_modes(two_runs, tmp_path, capsys):
    a, b = two_runs
    report = tmp_path / "report.json"
    code = _run("compare", a, b, "--tolerance", 1.0, "--json", report)
    assert code == 0
    data = json.loads(report.read_text())
    assert data["baseline_mode"] == "ceperfed" and data["candidate_mode"] == "no_alpha"
    assert "candidate_final_accuracy" in data and "baseline_final_accuracy" in data


def test_compare_flags_regression(two_runs, tmp_path):
    a, _ = two_runs
    worse = json.loads((a / "summary.json").read_text())
    worse["final_accuracy"] -= 0.5
    p = tmp_path / "worse.json"
    p.write_text(json.dumps(worse))
    assert _run("compare", a, p, "--tolerance", 0.1) == cli.EXIT_REGRESSION
    assert _run("compare", a, p, "--tolerance", 0.6) == cli.EXIT_OK


def test_compare_refuses_mismatched_seeds(two_runs, tmp_path, config_path, capsys):
    a, _ = two_runs
    c = tmp_path / "other"
    assert _run("run", "--config", config_path, "--seed", 2, "--out", c) == 0
    assert _run("compare", a, c) == cli.EXIT_CONFIG
    assert "seed differs" in capsys.readouterr().err


# -- plots --------------------------------------------------------------------

def test_plots_flag_and_subcommand(tmp_path, config_path, capsys):
    out = tmp_path / "p"
    assert _run("run", "--config", config_path, "--plots", "--out", out) == 0
    for name in ("accuracy.png", "transmission.png"):
        assert (out / name).read_bytes()[:4] == b"\x89PNG"
        (out / name).unlink()
    assert _run("plot", out) == 0
    assert (out / "accuracy.png").exists()
    assert "transmission.png" in capsys.readouterr().out


def test_module_entry_point(tmp_path, config_path):
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "cepfed", "run", "--config", str(config_path),
                          "--rounds", "0", "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
