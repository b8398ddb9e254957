"""Impression logs: synthetic MNAR generator, CSV ingestion, splits, batching.

Records are stored column-wise in numpy arrays; :class:`ImpressionRecord`
is the per-row view.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

ORACLE_COLUMNS = ("oracle_ctr", "oracle_cvr", "oracle_conv_all")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSchema:
    cardinalities: tuple[int, ...]

    @property
    def num_fields(self) -> int:
        return len(self.cardinalities)


@dataclass(frozen=True)
class ImpressionRecord:
    feature_ids: tuple[tuple[int, int], ...]
    click: int
    conversion: int
    oracle_ctr: float | None = None
    oracle_cvr: float | None = None
    oracle_conversion_all: int | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column store for impressions.

    ``features`` is an int array [n, num_fields]; ``click`` and
    ``conversion`` are 0/1 int arrays. The three oracle arrays are either all
    present (synthetic data) or all ``None``.
    """

    schema: FieldSchema
    features: np.ndarray
    click: np.ndarray
    conversion: np.ndarray
    oracle_ctr: np.ndarray | None = None
    oracle_cvr: np.ndarray | None = None
    oracle_conv_all: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        n = len(self.click)
        if self.features.shape != (n, self.schema.num_fields):
            raise DataError(f"features shape {self.features.shape} does not match {n} records x {self.schema.num_fields} fields")
        if len(self.conversion) != n:
            raise DataError("click and conversion columns differ in length")
        if np.any(self.conversion > self.click):
            raise DataError("funnel violation: conversion=1 on an unclicked impression")
        present = [a is not None for a in (self.oracle_ctr, self.oracle_cvr, self.oracle_conv_all)]
        if any(present) and not all(present):
            raise DataError("oracle columns must be all present or all absent")
        if n and np.any(self.features >= np.asarray(self.schema.cardinalities)):
            raise DataError("category index exceeds field cardinality")
        if n and np.any(self.features < 0):
            raise DataError("negative category index")

    @property
    def has_oracle(self) -> bool:
        return self.oracle_ctr is not None

    def __len__(self) -> int:
        return len(self.click)

    def record(self, i: int) -> ImpressionRecord:
        feats = tuple((f, int(c)) for f, c in enumerate(self.features[i]))
        if not self.has_oracle:
            return ImpressionRecord(feats, int(self.click[i]), int(self.conversion[i]))
        return ImpressionRecord(
            feats,
            int(self.click[i]),
            int(self.conversion[i]),
            float(self.oracle_ctr[i]),
            float(self.oracle_cvr[i]),
            int(self.oracle_conv_all[i]),
        )

    def __iter__(self):
        return (self.record(i) for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(
            self.schema,
            self.features[idx],
            self.click[idx],
            self.conversion[idx],
            pick(self.oracle_ctr),
            pick(self.oracle_cvr),
            pick(self.oracle_conv_all),
            name=self.name,
        )

    def check_spaces(self) -> None:
        """Both the click space and the non-click space must be non-empty."""
        clicks = int(self.click.sum())
        if clicks == 0 or clicks == len(self):
            raise DataError(f"degenerate dataset: {clicks} clicks out of {len(self)} impressions")

    def summary(self) -> dict:
        clicked = self.click == 1
        out = {
            "n": len(self),
            "click_rate": float(self.click.mean()),
            "conversion_rate_given_click": float(self.conversion[clicked].mean()) if clicked.any() else float("nan"),
        }
        if self.has_oracle:
            out["entire_space_cvr"] = float(self.oracle_cvr.mean())
            out["mnar_gap"] = float(self.oracle_cvr[clicked].mean() - self.oracle_cvr[~clicked].mean())
        return out


@dataclass(frozen=True)
class SyntheticConfig:
    """World and sample parameters for :func:`generate_synthetic`.

    The logit shifts are the intercepts of the click and conversion logits;
    :func:`calibrate_shifts` picks them for target marginal rates.
    """

    n_records: int = 100_000
    n_fields: int = 8
    cardinalities: tuple[int, ...] = field(default_factory=lambda: (50,) * 8)
    confounder_dim: int = 4
    confounder_strength_ctr: float = 1.1
    confounder_strength_cvr: float = 1.1
    # calibrated for a 4% click rate and 2% conversion rate among clicks
    base_ctr_logit_shift: float = -4.414413
    base_cvr_logit_shift: float = -6.005045
    seed: int = 0

    def validate(self) -> None:
        if self.n_records <= 0 or self.n_fields <= 0:
            raise DataError("n_records and n_fields must be positive")
        if len(self.cardinalities) != self.n_fields or min(self.cardinalities) <= 0:
            raise DataError("cardinalities must list one positive count per field")
        if self.confounder_dim < 3:
            raise DataError("confounder_dim must be at least 3 (shared, click-only and conversion-only directions)")
        for v in (self.confounder_strength_ctr, self.confounder_strength_cvr, self.base_ctr_logit_shift, self.base_cvr_logit_shift):
            if not math.isfinite(v):
                raise DataError("strengths and shifts must be finite")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class _World:
    latents: tuple[np.ndarray, ...]
    shared: np.ndarray
    click_only: np.ndarray
    conv_only: np.ndarray

    def logits(self, cfg: SyntheticConfig, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = sum(table[features[:, f]] for f, table in enumerate(self.latents))
        s = z @ self.shared
        ctr_logit = cfg.confounder_strength_ctr * s + z @ self.click_only + cfg.base_ctr_logit_shift
        cvr_logit = cfg.confounder_strength_cvr * s + z @ self.conv_only + cfg.base_cvr_logit_shift
        return ctr_logit, cvr_logit


def _world(cfg: SyntheticConfig) -> _World:
    rng = np.random.default_rng([cfg.seed, 0])
    scale = 1.0 / math.sqrt(cfg.n_fields)
    latents = tuple(rng.normal(0.0, scale, size=(c, cfg.confounder_dim)) for c in cfg.cardinalities)
    q, _ = np.linalg.qr(rng.normal(size=(cfg.confounder_dim, 3)))
    return _World(latents, q[:, 0], q[:, 1], q[:, 2])


def _draw_features(cfg: SyntheticConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    cols = [rng.integers(0, c, size=n) for c in cfg.cardinalities]
    return np.stack(cols, axis=1).astype(np.int64)


def generate_synthetic(cfg: SyntheticConfig, name: str = "synthetic") -> Dataset:
    """Sample an impression log whose clicks and conversions share a confounder.

    Every category carries a fixed latent vector; the confounder ``z`` of a
    record is the sum over its fields. Click and conversion logits both load
    on one shared direction of ``z`` (scaled by the two strengths) plus a
    private direction each. The counterfactual conversion is drawn for every
    impression and kept in ``oracle_conv_all``; the observed conversion is
    its product with the click.
    """
    cfg.validate()
    world = _world(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    features = _draw_features(cfg, rng, cfg.n_records)
    ctr_logit, cvr_logit = world.logits(cfg, features)
    true_ctr, true_cvr = _sigmoid(ctr_logit), _sigmoid(cvr_logit)
    click = (rng.random(cfg.n_records) < true_ctr).astype(np.int64)
    conv_all = (rng.random(cfg.n_records) < true_cvr).astype(np.int64)
    ds = Dataset(
        FieldSchema(tuple(cfg.cardinalities)),
        features,
        click,
        click * conv_all,
        true_ctr,
        true_cvr,
        conv_all,
        name=name,
    )
    ds.check_spaces()
    return ds


def expected_rates(cfg: SyntheticConfig, n_draws: int = 400_000, seed: int = 12345) -> tuple[float, float]:
    """Monte-Carlo (marginal CTR, CVR given click) for a config's world."""
    world = _world(cfg)
    feats = _draw_features(cfg, np.random.default_rng(seed), n_draws)
    ctr_logit, cvr_logit = world.logits(cfg, feats)
    ctr, cvr = _sigmoid(ctr_logit), _sigmoid(cvr_logit)
    return float(ctr.mean()), float((ctr * cvr).mean() / ctr.mean())


def calibrate_shifts(cfg: SyntheticConfig, target_ctr: float, target_cvr: float, n_draws: int = 200_000) -> SyntheticConfig:
    """Return ``cfg`` with logit shifts solved for the target marginal rates.

    ``target_cvr`` is the conversion rate among clicked impressions.
    """
    if not (0 < target_ctr < 1 and 0 < target_cvr < 1):
        raise DataError("target rates must lie strictly inside (0, 1)")
    world = _world(cfg)
    feats = _draw_features(cfg, np.random.default_rng(12345), n_draws)
    probe = replace(cfg, base_ctr_logit_shift=0.0, base_cvr_logit_shift=0.0)
    ctr_logit, cvr_logit = world.logits(probe, feats)

    def solve(fn, target):
        lo, hi = -30.0, 30.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if fn(mid) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    b_o = solve(lambda b: _sigmoid(ctr_logit + b).mean(), target_ctr)
    ctr = _sigmoid(ctr_logit + b_o)
    b_r = solve(lambda b: (ctr * _sigmoid(cvr_logit + b)).sum() / ctr.sum(), target_cvr)
    return replace(cfg, base_ctr_logit_shift=round(b_o, 6), base_cvr_logit_shift=round(b_r, 6))


# columnar file format

def _format_float(x: float) -> str:
    return f"{x:.9g}"


def save_log(ds: Dataset, path: str | Path) -> None:
    """Write the comma-separated impression log (header row, UTF-8)."""
    k = ds.schema.num_fields
    header = [f"f{i}" for i in range(k)] + ["click", "conversion"]
    if ds.has_oracle:
        header += list(ORACLE_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [str(int(v)) for v in ds.features[i]] + [str(int(ds.click[i])), str(int(ds.conversion[i]))]
            if ds.has_oracle:
                row += [_format_float(ds.oracle_ctr[i]), _format_float(ds.oracle_cvr[i]), str(int(ds.oracle_conv_all[i]))]
            w.writerow(row)


def _parse_binary(value: str, col: str, lineno: int) -> int:
    if value not in ("0", "1"):
        raise DataError(f"row {lineno}: column {col!r} must be 0 or 1, got {value!r}")
    return int(value)


def load_log(path: str | Path, schema: FieldSchema | None = None) -> Dataset:
    """Parse an impression log written by :func:`save_log`.

    Without ``schema`` the cardinalities are inferred as ``max + 1`` per
    field. Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        fields = [h for h in header if h.startswith("f")]
        k = len(fields)
        expected = [f"f{i}" for i in range(k)] + ["click", "conversion"]
        has_oracle = len(header) > k + 2
        if has_oracle:
            expected += list(ORACLE_COLUMNS)
        if header != expected:
            raise DataError(f"{path}: unexpected header {header}, expected {expected}")
        if schema is not None and schema.num_fields != k:
            raise DataError(f"{path}: {k} feature columns but schema has {schema.num_fields} fields")
        feats, clicks, convs, octr, ocvr, oall = [], [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DataError(f"row {lineno}: expected {len(expected)} columns, got {len(row)}")
            try:
                f = [int(v) for v in row[:k]]
            except ValueError:
                raise DataError(f"row {lineno}: feature ids must be integers") from None
            if any(v < 0 for v in f):
                raise DataError(f"row {lineno}: feature ids must be non-negative")
            c = _parse_binary(row[k], "click", lineno)
            r = _parse_binary(row[k + 1], "conversion", lineno)
            if r > c:
                raise DataError(f"row {lineno}: funnel violation, conversion=1 with click=0")
            if has_oracle:
                try:
                    p_o, p_r = float(row[k + 2]), float(row[k + 3])
                except ValueError:
                    raise DataError(f"row {lineno}: oracle probabilities must be floats") from None
                octr.append(p_o)
                ocvr.append(p_r)
                oall.append(_parse_binary(row[k + 4], "oracle_conv_all", lineno))
            feats.append(f)
            clicks.append(c)
            convs.append(r)
    features = np.asarray(feats, dtype=np.int64).reshape(-1, k)
    if schema is None:
        schema = FieldSchema(tuple(int(v) + 1 for v in features.max(axis=0)) if len(features) else (1,) * k)
    arr = lambda xs, dt: np.asarray(xs, dtype=dt) if has_oracle else None
    return Dataset(
        schema,
        features,
        np.asarray(clicks, dtype=np.int64),
        np.asarray(convs, dtype=np.int64),
        arr(octr, np.float64),
        arr(ocvr, np.float64),
        arr(oall, np.int64),
        name=path.stem,
    )


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split into (train, held-out)."""
    if not 0 < train_fraction < 1:
        raise DataError("train_fraction must lie strictly between 0 and 1")
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    a, b = ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))
    a.check_spaces()
    b.check_spaces()
    return a, b


def batches(n: int | Dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index blocks covering ``range(n)`` once, shuffled per (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if isinstance(n, Dataset):
        n = len(n)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]
