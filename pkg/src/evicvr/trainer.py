"""Adam, the training loop, seeded multi-run aggregation and the study
drivers (ablation, bias study, sensitivity sweep)."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import diffcore as dc
from . import losses as L
from .data import Dataset, batches
from .metrics import MetricsReport, evaluate, welch_t_test
from .model import EviModel, ForwardOut, ModelConfig, pseudo_labels

log = logging.getLogger(__name__)

# method -> (teacher kind, VIE heads, CVR loss); teacher kind is one of
# None, "conditioned", "click" (unconditioned, click space), "entire"
# (unconditioned, trained on the whole space through the CTCVR product)
METHODS: dict[str, tuple[str | None, bool, str]] = {
    "evi": ("conditioned", True, "evi"),
    "evi-no-vie": ("conditioned", False, "evi"),
    "evi-no-vie-cect": ("click", False, "evi"),
    "naive": (None, False, "naive"),
    "esmm": (None, False, None),
    "ipw": (None, False, "ipw"),
    "dr": (None, False, "dr"),
    "ddpo": ("click", False, "ddpo"),
    "distill-entire": ("entire", False, "distill"),
}

# loss parts each method optimizes
METHOD_PARTS = {
    "evi": ("ctr", "cvr_teacher", "cvr", "vie", "ctcvr"),
    "evi-no-vie": ("ctr", "cvr_teacher", "cvr", "ctcvr"),
    "evi-no-vie-cect": ("ctr", "cvr_teacher", "cvr", "ctcvr"),
    "naive": ("ctr", "cvr"),
    "esmm": ("ctr", "ctcvr"),
    "ipw": ("ctr", "cvr", "ctcvr"),
    "dr": ("ctr", "cvr", "imputation", "ctcvr"),
    "ddpo": ("ctr", "cvr_teacher", "cvr", "ctcvr"),
    "distill-entire": ("ctr", "cvr_teacher", "cvr", "ctcvr"),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "evi"
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 8000
    epochs: int = 5
    propensity_clip: float = L.DEFAULT_CLIP
    transfer_layers: int = 3
    seed: int = 0
    eval_every: int = 1
    embed_dim: int = 5
    n_experts: int = 8
    expert_dim: int = 256
    tower_dims: tuple[int, ...] = (128, 64, 32)
    cond_dim: int = 8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if not 1 <= self.transfer_layers <= len(self.tower_dims):
            raise ValueError(f"transfer_layers must be in 1..{len(self.tower_dims)}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValueError("learning_rate >= 0, batch_size >= 1, epochs >= 0 and eval_every >= 1 required")
        if not 0 < self.propensity_clip < 0.5:
            raise ValueError("propensity_clip must lie in (0, 0.5)")

    @property
    def effective_weights(self) -> L.LossWeights:
        if METHODS[self.method][1]:
            return self.loss_weights
        return replace(self.loss_weights, lambda_i=0.0)

    def model_config(self, cardinalities) -> ModelConfig:
        teacher, vie, cvr = METHODS[self.method]
        return ModelConfig(
            cardinalities=tuple(cardinalities),
            embed_dim=self.embed_dim,
            n_experts=self.n_experts,
            expert_dim=self.expert_dim,
            tower_dims=tuple(self.tower_dims),
            cond_dim=self.cond_dim,
            transfer_layers=self.transfer_layers,
            teacher=teacher is not None,
            conditioned=teacher == "conditioned",
            vie=vie,
            imputation=cvr == "dr",
        )

    def flat(self) -> dict:
        """Flat key -> value mapping (loss weights inlined)."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "loss_weights":
                out.update(v.as_dict())
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        lw = {k: float(d.pop(k)) for k in list(d) if k.startswith("lambda_")}
        base = L.LossWeights()
        d["loss_weights"] = replace(base, **lw)
        return cls(**d)


class Adam:
    """Adam with decoupled weight decay (theta *= 1 - lr * wd before the step)."""

    def __init__(self, params: dict[str, dc.Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
            if self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: dict[str, dc.Tensor], state: Adam) -> None:
    """One optimizer step over ``params`` using their populated grads."""
    state.params = params
    state.step()


def loss_parts(model: EviModel, out: ForwardOut, o, r, cfg: TrainConfig) -> dict[str, dc.Tensor]:
    """Loss terms a method optimizes, unweighted, on one batch."""
    teacher, _, cvr = METHODS[cfg.method]
    w = cfg.effective_weights
    o = np.asarray(o, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    prop = dc.detach(out.p_ctr)
    parts: dict[str, dc.Tensor] = {"ctr": L.loss_ctr(out.p_ctr, o)}
    if cvr != "naive":
        parts["ctcvr"] = L.loss_ctcvr(out.p_ctr, out.p_cvr_student, o, r)
    if teacher == "entire":
        parts["cvr_teacher"] = L.loss_ctcvr(prop, out.p_cvr_teacher, o, r)
    elif teacher is not None:
        parts["cvr_teacher"], _ = L.loss_cvr_teacher(out.p_cvr_teacher, o, r)
    clip = cfg.propensity_clip
    if cvr == "evi":
        parts["cvr"] = L.loss_cvr_evi(out.p_cvr_student, o, r, pseudo_labels(out), prop, clip)
    elif cvr == "ddpo":
        parts["cvr"] = L.loss_cvr_ddpo(out.p_cvr_student, o, r, pseudo_labels(out), prop, clip)
    elif cvr == "distill":
        parts["cvr"] = L.loss_cvr_distill_entire(out.p_cvr_student, o, r, pseudo_labels(out))
    elif cvr == "naive":
        parts["cvr"] = L.loss_cvr_naive(out.p_cvr_student, o, r)
    elif cvr == "ipw":
        parts["cvr"] = L.loss_cvr_ipw(out.p_cvr_student, o, r, prop, clip)
    elif cvr == "dr":
        parts["cvr"], parts["imputation"] = L.loss_cvr_dr(out.p_cvr_student, out.p_imputation, o, r, prop, clip)
    if model.vie_mu and w.lambda_i > 0:
        parts["vie"] = L.loss_vie(out.teacher_taps, out.student_vie_taps, model)
    return parts


@dataclass
class RunResult:
    config: TrainConfig
    model: EviModel
    history: list[dict]
    report: MetricsReport | None

    @property
    def method(self) -> str:
        return self.config.method

    @property
    def seed(self) -> int:
        return self.config.seed


def build_model(schema_cardinalities, cfg: TrainConfig) -> EviModel:
    return EviModel(cfg.model_config(schema_cardinalities), seed=cfg.seed)


def evaluate_model(model: EviModel, ds: Dataset, seed: int = 0, method: str = "") -> MetricsReport:
    pred = model.predict(ds.features)
    return evaluate(ds, pred["cvr"], pred.get("teacher"), seed=seed, method=method)


def train(train_ds: Dataset, eval_ds: Dataset | None, cfg: TrainConfig) -> RunResult:
    """Train one model; evaluate every ``eval_every`` epochs and at the end."""
    if eval_ds is not None and eval_ds.schema.num_fields != train_ds.schema.num_fields:
        raise ValueError("train and eval datasets have different schemas")
    model = build_model(train_ds.schema.cardinalities, cfg)
    opt = Adam(model.params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_epsilon, cfg.weight_decay)
    w = cfg.effective_weights
    history: list[dict] = []
    report = None
    o_all = train_ds.click.astype(np.float64)
    r_all = train_ds.conversion.astype(np.float64)
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        blocks = batches(len(train_ds), cfg.batch_size, cfg.seed, epoch)
        for b, idx in enumerate(blocks):
            out = model.forward(train_ds.features[idx])
            parts = loss_parts(model, out, o_all[idx], r_all[idx], cfg)
            total = L.loss_total(parts, w)
            value = total.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss is {value} at epoch {epoch}, batch {b}")
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item()
            sums["total"] = sums.get("total", 0.0) + value
            if total.requires_grad:
                model.zero_grad()
                dc.backward(total)
                opt.step()
        row = {"epoch": epoch}
        row.update({f"loss_{k}": v / len(blocks) for k, v in sums.items()})
        if eval_ds is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report = evaluate_model(model, eval_ds, cfg.seed, cfg.method)
            row.update({k: v for k, v in report.to_dict().items() if isinstance(v, (int, float)) and not isinstance(v, bool)})
        history.append(row)
        log.info("%s seed=%d epoch=%d %s", cfg.method, cfg.seed, epoch, _fmt_row(row))
    return RunResult(cfg, model, history, report)


def _fmt_row(row: dict) -> str:
    return " ".join(f"{k}={v:.5g}" for k, v in row.items() if k != "epoch" and isinstance(v, float))


# multi-run drivers

REPORT_FIELDS = ("auc", "nll", "mean_bias", "teacher_nonclick_logloss", "auc_click", "nll_click")


class RunCache:
    """Memo of finished runs keyed by (dataset name, flat config)."""

    def __init__(self):
        self._runs: dict[tuple, RunResult] = {}

    def get(self, train_ds: Dataset, eval_ds: Dataset, cfg: TrainConfig) -> RunResult:
        key = (train_ds.name, id(train_ds), id(eval_ds), tuple(sorted(cfg.flat().items())))
        if key not in self._runs:
            self._runs[key] = train(train_ds, eval_ds, cfg)
        return self._runs[key]


def _train_many(train_ds, eval_ds, cfgs, cache: RunCache | None) -> list[RunResult]:
    if cache is None:
        return [train(train_ds, eval_ds, c) for c in cfgs]
    return [cache.get(train_ds, eval_ds, c) for c in cfgs]


def summarize(values) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": len(arr)}


def aggregate(reports: list[dict]) -> dict:
    """Per-method mean/std over seeds plus pairwise Welch p-values on AUC.

    ``reports`` are report dicts carrying at least ``method``, ``seed`` and
    the metric fields; input order does not matter. Runs are grouped by
    ``label`` when present (sweep cells share a method), else by method.
    """
    def key(r):
        return r.get("label") or r["method"]

    by_method: dict[str, list[dict]] = {}
    for rep in sorted(reports, key=lambda r: (key(r), r["seed"])):
        by_method.setdefault(key(rep), []).append(rep)
    table = {}
    for method, rs in by_method.items():
        table[method] = {"seeds": [r["seed"] for r in rs]}
        for f in REPORT_FIELDS:
            table[method][f] = summarize(r.get(f) for r in rs)
    tests = {}
    for a, b in itertools.combinations(sorted(by_method), 2):
        xa = [r["auc"] for r in by_method[a] if r.get("auc") is not None]
        xb = [r["auc"] for r in by_method[b] if r.get("auc") is not None]
        if len(xa) >= 2 and len(xb) >= 2:
            t, p = welch_t_test(xa, xb)
            tests[f"{a} vs {b}"] = {"t": t, "p": p}
    return {"methods": table, "auc_welch": tests}


def run_multi_seed(train_ds, eval_ds, cfg_base: TrainConfig, seeds, methods=None, cache: RunCache | None = None):
    """Train every (method, seed); returns ``(runs, aggregate)``."""
    methods = list(methods) if methods else [cfg_base.method]
    cfgs = [replace(cfg_base, method=m, seed=s) for m in methods for s in seeds]
    runs = _train_many(train_ds, eval_ds, cfgs, cache)
    return runs, aggregate([r.report.to_dict() for r in runs])


ABLATION_ROWS = (
    ("EVI w/o VIE CECT", "evi-no-vie-cect"),
    ("EVI w/o VIE", "evi-no-vie"),
    ("EVI", "evi"),
)


def run_ablation(datasets: dict[str, tuple[Dataset, Dataset]], cfg: TrainConfig, seeds, cache: RunCache | None = None):
    """Seed-averaged AUC for the three ablation variants on each dataset.

    Returns ``(table, runs)`` where ``table[row][dataset]`` is the mean AUC.
    """
    table: dict[str, dict[str, float]] = {label: {} for label, _ in ABLATION_ROWS}
    all_runs = []
    for name, (tr, ev) in datasets.items():
        for label, method in ABLATION_ROWS:
            runs = _train_many(tr, ev, [replace(cfg, method=method, seed=s) for s in seeds], cache)
            table[label][name] = summarize(r.report.auc for r in runs)["mean"]
            all_runs.extend(runs)
    return table, all_runs


BIAS_TEACHERS = (
    ("DDPO teacher", "ddpo"),
    ("Entire-space teacher", "distill-entire"),
    ("EVI teacher", "evi"),
)
BIAS_STUDENTS = (
    ("DDPO", "ddpo"),
    ("EVI w/o VIE", "evi-no-vie"),
    ("EVI", "evi"),
)


def run_bias_study(train_ds: Dataset, eval_ds: Dataset, cfg: TrainConfig, seeds, cache: RunCache | None = None):
    """Teacher non-click log loss and student mean bias, seed-averaged.

    Needs counterfactual labels on ``eval_ds``.
    """
    if not eval_ds.has_oracle:
        raise ValueError("bias study needs an evaluation set with oracle labels")
    cache = cache or RunCache()

    def runs_for(method):
        return _train_many(train_ds, eval_ds, [replace(cfg, method=method, seed=s) for s in seeds], cache)

    teachers = {}
    for label, method in BIAS_TEACHERS:
        vals = [r.report.teacher_nonclick_logloss for r in runs_for(method)]
        teachers[label] = {"method": method, "values": vals, **summarize(vals)}
    students = {}
    for label, method in BIAS_STUDENTS:
        vals = [r.report.mean_bias for r in runs_for(method)]
        students[label] = {"method": method, "values": vals, **summarize(vals)}
    a, b = teachers["EVI teacher"]["values"], teachers["DDPO teacher"]["values"]
    result = {"teacher_nonclick_logloss": teachers, "student_mean_bias": students}
    if len(a) >= 2:
        t, p = welch_t_test(a, b)
        result["teacher_gap"] = {"evi_minus_ddpo": float(np.mean(a) - np.mean(b)), "t": t, "p": p}
    runs = [r for _, m in BIAS_TEACHERS + BIAS_STUDENTS for r in runs_for(m)]
    return result, runs


def run_sweep(train_ds: Dataset, eval_ds: Dataset, cfg: TrainConfig, vie_ratios, layer_counts, seeds, cache: RunCache | None = None):
    """Mean AUC of EVI over the grid of VIE weights x transfer-layer counts.

    Returns ``(cells, runs)``; each cell is a dict with ``lambda_i``,
    ``transfer_layers`` and ``auc``.
    """
    for k in layer_counts:
        if not 1 <= k <= len(cfg.tower_dims):
            raise ValueError(f"transfer layer count {k} outside 1..{len(cfg.tower_dims)}")
    cells, all_runs = [], []
    for lam in vie_ratios:
        for k in layer_counts:
            c = replace(cfg, method="evi", transfer_layers=k, loss_weights=replace(cfg.loss_weights, lambda_i=float(lam)))
            runs = _train_many(train_ds, eval_ds, [replace(c, seed=s) for s in seeds], cache)
            cells.append({"lambda_i": float(lam), "transfer_layers": k, "auc": summarize(r.report.auc for r in runs)["mean"]})
            all_runs.extend(runs)
    return cells, all_runs

