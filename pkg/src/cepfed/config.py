"""JSON run configuration: strict mapping onto the experiment dataclasses."""

from __future__ import annotations

import dataclasses
import difflib
import json
from pathlib import Path

from .collab import CollabConfig
from .data import SyntheticSpec
from .fedsim import DatasetConfig, ExperimentConfig
from .hsvd import EnergyConfig


class ConfigFileError(ValueError):
    """Raised with every problem found, one per line."""

    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


_NESTED = {
    "energy": EnergyConfig,
    "collab": CollabConfig,
    "dataset": DatasetConfig,
    "synthetic": SyntheticSpec,
}
RUN_KEYS = {"out": str, "plots": bool}


def _check_scalar(value, annotation: str, where: str, problems: list[str]):
    ann = annotation.replace("Optional[", "").rstrip("]")
    if value is None:
        if "Optional" not in annotation:
            problems.append(f"{where}: null not allowed")
        return
    if ann == "int" and (not isinstance(value, int) or isinstance(value, bool)):
        problems.append(f"{where}: expected an integer, got {value!r}")
    elif ann == "float" and (not isinstance(value, (int, float)) or isinstance(value, bool)):
        problems.append(f"{where}: expected a number, got {value!r}")
    elif ann == "str" and not isinstance(value, str):
        problems.append(f"{where}: expected a string, got {value!r}")
    elif ann == "tuple" and not isinstance(value, list):
        problems.append(f"{where}: expected a list, got {value!r}")


def _build(cls, raw, where: str, problems: list[str]):
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected an object, got {type(raw).__name__}")
        return None
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    before = len(problems)
    for key, value in raw.items():
        if key not in fields:
            hint = difflib.get_close_matches(key, list(fields), n=1)
            suggestion = f" (did you mean {hint[0]!r}?)" if hint else ""
            problems.append(f"{where}.{key}: unknown key{suggestion}; allowed: {', '.join(sorted(fields))}")
            continue
        if key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, f"{where}.{key}", problems)
            continue
        _check_scalar(value, str(fields[key].type), f"{where}.{key}", problems)
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    if len(problems) > before:
        return None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def parse_run_config(raw: dict) -> tuple[ExperimentConfig, dict]:
    """Return the experiment config and the run-level options (``out``, ``plots``)."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigFileError(["config root must be a JSON object"])
    run_opts = {k: raw[k] for k in RUN_KEYS if k in raw}
    for k, typ in RUN_KEYS.items():
        if k in run_opts and not isinstance(run_opts[k], typ):
            problems.append(f"config.{k}: expected {typ.__name__}")
    body = {k: v for k, v in raw.items() if k not in RUN_KEYS}
    allowed = [f.name for f in dataclasses.fields(ExperimentConfig)] + list(RUN_KEYS)
    for key in list(body):
        if key not in allowed:
            hint = difflib.get_close_matches(key, allowed, n=1)
            suggestion = f" (did you mean {hint[0]!r}?)" if hint else ""
            problems.append(f"config.{key}: unknown key{suggestion}; allowed: {', '.join(sorted(allowed))}")
            body.pop(key)
    cfg = _build(ExperimentConfig, body, "config", problems)
    if problems:
        raise ConfigFileError(problems)
    return cfg, run_opts


def load_run_config(path) -> tuple[ExperimentConfig, dict]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigFileError([f"{path}: invalid JSON ({exc})"]) from exc
    return parse_run_config(raw)


def config_to_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)
    out["widths"] = list(out["widths"])
    return out
