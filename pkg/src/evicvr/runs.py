"""Run directories and the flat key=value config format.

A run directory holds ``config.txt``, ``history.csv``, ``report.json`` and
``checkpoint.bin``. Multi-seed runs put one such directory per seed under
``seed-<n>/`` next to an ``aggregate.json``.
"""

from __future__ import annotations

import csv
import json
import math
import typing
from dataclasses import fields
from pathlib import Path

from .losses import LossWeights
from .model import save_checkpoint
from .trainer import RunResult, TrainConfig

CONFIG_NAME = "config.txt"
HISTORY_NAME = "history.csv"
REPORT_NAME = "report.json"
CHECKPOINT_NAME = "checkpoint.bin"


class ConfigError(ValueError):
    pass


# key=value config files

def _field_types() -> dict[str, type]:
    hints = typing.get_type_hints(TrainConfig)
    out = {}
    for f in fields(TrainConfig):
        if f.name == "loss_weights":
            out.update({k: float for k in LossWeights().as_dict()})
        else:
            out[f.name] = hints[f.name]
    return out


CONFIG_TYPES = _field_types()


def parse_value(key: str, text: str):
    if key not in CONFIG_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = CONFIG_TYPES[key]
    text = text.strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        # tuple[int, ...]
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_config(path: str | Path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def write_config(cfg: TrainConfig, path: str | Path) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in cfg.flat().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def config_from_dict(d: dict) -> TrainConfig:
    try:
        return TrainConfig.from_flat(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# run directories

def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def run_report(run: RunResult, label: str | None = None) -> dict:
    rep = run.report.to_dict()
    rep["lambda_i"] = run.config.effective_weights.lambda_i
    rep["transfer_layers"] = run.config.transfer_layers
    if label:
        rep["label"] = label
    return {k: _clean(v) for k, v in rep.items()}


def write_history(history: list[dict], path: str | Path) -> None:
    keys: list[str] = []
    for row in history:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys or ["epoch"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (format(v, ".10g") if isinstance(v, float) else v) for k, v in row.items()})


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_run(run: RunResult, out_dir: str | Path, meta: dict | None = None, label: str | None = None) -> dict:
    """Write one run directory; returns the report dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(run.config, out / CONFIG_NAME)
    write_history(run.history, out / HISTORY_NAME)
    rep = run_report(run, label)
    write_json(rep, out / REPORT_NAME)
    save_checkpoint(run.model, out / CHECKPOINT_NAME, {**(meta or {}), "method": run.method, "seed": run.seed})
    return rep


def find_reports(root: str | Path) -> list[dict]:
    """All ``report.json`` payloads below ``root``, in path order."""
    out = []
    for path in sorted(Path(root).rglob(REPORT_NAME)):
        rep = json.loads(path.read_text(encoding="utf-8"))
        rep["path"] = str(path.parent.relative_to(root))
        out.append(rep)
    return out


def find_studies(root: str | Path) -> list[dict]:
    return [json.loads(p.read_text(encoding="utf-8")) for p in sorted(Path(root).rglob("study.json"))]
