"""Evaluation metrics: AUC, log loss, CVR mean bias, teacher non-click log
loss and Welch's t-test across seeds."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from .data import Dataset
from .diffcore import PROB_EPS


log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    auc: float | None
    nll: float
    mean_bias: float
    n_eval: int
    scope: str
    seed: int = 0
    method: str = ""
    dataset: str = ""
    teacher_nonclick_logloss: float | None = None
    auc_click: float | None = None
    nll_click: float | None = None
    mean_bias_proxy: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties, via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # average 1-based rank over each run of tied scores
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    avg = 0.5 * (starts + ends + 1)
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(avg, ends - starts)
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def nll(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).mean())


def cvr_evaluation_scope(ds: Dataset, predictions) -> tuple[np.ndarray, np.ndarray, str]:
    """Pairs to score CVR against: the entire space with counterfactual
    labels on oracle data, otherwise the click space."""
    p = np.asarray(predictions, dtype=np.float64)
    if ds.has_oracle:
        return p, ds.oracle_conv_all, "entire"
    clicked = ds.click == 1
    return p[clicked], ds.conversion[clicked], "click"


def teacher_nonclick_logloss(p_teacher, ds: Dataset) -> float | None:
    """Teacher log loss on unclicked records against counterfactual labels;
    ``None`` when the dataset has no oracle."""
    if not ds.has_oracle:
        return None
    unclicked = ds.click == 0
    return nll(np.asarray(p_teacher)[unclicked], ds.oracle_conv_all[unclicked])


def signed_bias(p_cvr, ds: Dataset) -> tuple[float, bool]:
    """Mean prediction minus mean truth, and whether the click-space proxy was used."""
    p = np.asarray(p_cvr, dtype=np.float64)
    if ds.has_oracle:
        return float(p.mean() - ds.oracle_cvr.mean()), False
    clicked = ds.click == 1
    return float(p[clicked].mean() - ds.conversion[clicked].mean()), True


def mean_bias(p_cvr, ds: Dataset) -> float:
    return abs(signed_bias(p_cvr, ds)[0])


def _auc_or_none(scores, labels) -> float | None:
    try:
        return auc(scores, labels)
    except MetricError as exc:
        log.warning("AUC undefined: %s", exc)
        return None


def evaluate(ds: Dataset, p_cvr, p_teacher=None, seed: int = 0, method: str = "") -> MetricsReport:
    """Metrics for one model; AUC is ``None`` when the labels hold one class."""
    scores, labels, scope = cvr_evaluation_scope(ds, p_cvr)
    bias, proxy = signed_bias(p_cvr, ds)
    clicked = ds.click == 1
    report = MetricsReport(
        auc=_auc_or_none(scores, labels),
        nll=nll(scores, labels),
        mean_bias=abs(bias),
        n_eval=len(labels),
        scope=scope,
        seed=seed,
        method=method,
        dataset=ds.name,
        mean_bias_proxy=proxy,
    )
    click_labels = ds.conversion[clicked]
    if 0 < click_labels.sum() < len(click_labels):
        report.auc_click = auc(np.asarray(p_cvr)[clicked], click_labels)
    report.nll_click = nll(np.asarray(p_cvr)[clicked], click_labels)
    if p_teacher is not None:
        report.teacher_nonclick_logloss = teacher_nonclick_logloss(p_teacher, ds)
    return report


def welch_t_test(sample_a, sample_b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value.

    The p-value uses the regularized incomplete beta function:
    P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2).
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    p = float(special.betainc(df / 2, 0.5, df / (df + t * t)))
    return float(t), p
