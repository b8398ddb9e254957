"""Training objectives for the CVR estimators.

Predictions are :class:`~evicvr.diffcore.Tensor` objects; labels, pseudo
labels and click propensities are constants (numpy arrays or detached
tensors). All means run over the batch, which stands in for the full space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

DEFAULT_CLIP = 0.05


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_t: float = 0.2
    lambda_r: float = 2.0
    lambda_i: float = 0.2
    lambda_g: float = 0.1

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and non-negative, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {
            "lambda_c": self.lambda_c,
            "lambda_t": self.lambda_t,
            "lambda_r": self.lambda_r,
            "lambda_i": self.lambda_i,
            "lambda_g": self.lambda_g,
        }


PRESETS = {
    "ali-ccp": LossWeights(lambda_c=1.0, lambda_t=0.2, lambda_r=2.0, lambda_i=0.2, lambda_g=0.1),
    "other": LossWeights(lambda_c=0.2, lambda_t=0.2, lambda_r=2.0, lambda_i=0.2, lambda_g=0.2),
}

# part name -> weight attribute
PART_WEIGHTS = {
    "ctr": "lambda_c",
    "cvr_teacher": "lambda_t",
    "cvr": "lambda_r",
    "vie": "lambda_i",
    "ctcvr": "lambda_g",
}


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def clip_propensity(p_ctr, eps: float = DEFAULT_CLIP) -> np.ndarray:
    if not 0 < eps < 0.5:
        raise ValueError("propensity clip must lie in (0, 0.5)")
    return np.clip(_const(p_ctr), eps, 1.0 - eps)


def loss_ctr(p_ctr: Tensor, o) -> Tensor:
    return dc.mean(dc.binary_cross_entropy(p_ctr, _const(o)))


def loss_ctcvr(p_ctr: Tensor, p_cvr: Tensor, o, r) -> Tensor:
    return dc.mean(dc.binary_cross_entropy(p_ctr * p_cvr, _const(o) * _const(r)))


def loss_cvr_teacher(p_teacher: Tensor, o, r) -> tuple[Tensor, bool]:
    """BCE averaged over clicked records only.

    Returns ``(loss, has_signal)``; a batch without clicks gives a zero loss
    and ``has_signal=False``.
    """
    o = _const(o)
    n_clicked = float(o.sum())
    per = dc.binary_cross_entropy(p_teacher, _const(r)) * o
    if n_clicked == 0:
        return dc.sum_(per) * 0.0, False
    return dc.sum_(per) * (1.0 / n_clicked), True


def loss_cvr_naive(p_cvr: Tensor, o, r) -> Tensor:
    o = _const(o)
    return dc.mean(dc.binary_cross_entropy(p_cvr, _const(r)) * o)


def loss_cvr_ipw(p_cvr: Tensor, o, r, p_ctr, clip: float = DEFAULT_CLIP) -> Tensor:
    o = _const(o)
    prop = _const(p_ctr) if clip is None else clip_propensity(p_ctr, clip)
    return dc.mean(dc.binary_cross_entropy(p_cvr, _const(r)) * (o / prop))


def _two_sided(p_cvr: Tensor, o, r, r_star, p_ctr, clip, scale: float) -> Tensor:
    o = _const(o)
    prop = clip_propensity(p_ctr, clip)
    target = np.where(o == 1, _const(r), _const(r_star))
    weight = scale * np.where(o == 1, 1.0 / prop, 1.0 / (1.0 - prop))
    return dc.mean(dc.binary_cross_entropy(p_cvr, target) * weight)


def loss_cvr_evi(p_cvr: Tensor, o, r, r_star, p_ctr, clip: float = DEFAULT_CLIP) -> Tensor:
    """Half inverse-click-propensity loss on clicks plus half
    inverse-non-click-propensity distillation on non-clicks, both over |D|."""
    return _two_sided(p_cvr, o, r, r_star, p_ctr, clip, 0.5)


def loss_cvr_ddpo(p_cvr: Tensor, o, r, r_star, p_ctr, clip: float = DEFAULT_CLIP) -> Tensor:
    return _two_sided(p_cvr, o, r, r_star, p_ctr, clip, 1.0)


def loss_cvr_distill_entire(p_cvr: Tensor, o, r, r_star) -> Tensor:
    o = _const(o)
    target = np.where(o == 1, _const(r), _const(r_star))
    return dc.mean(dc.binary_cross_entropy(p_cvr, target))


def loss_cvr_dr(p_cvr: Tensor, p_imputation: Tensor | None, o, r, p_ctr, clip: float = DEFAULT_CLIP) -> tuple[Tensor, Tensor]:
    """Doubly robust CVR loss and the imputation model's loss.

    The imputed error is a constant inside the DR loss and the observed
    error is a constant inside the imputation loss, so each term only trains
    its own tower.
    """
    if p_imputation is None:
        raise ValueError("doubly robust loss needs the imputation tower")
    o = _const(o)
    inv = o / clip_propensity(p_ctr, clip)
    e = dc.binary_cross_entropy(p_cvr, _const(r))
    e_hat = dc.detach(p_imputation)
    dr = dc.mean(e_hat + (e - e_hat) * inv)
    imp = dc.mean(dc.square(dc.detach(e) - p_imputation) * inv)
    return dr, imp


def vie_pair(t: Tensor, mu: Tensor, rho: Tensor) -> Tensor:
    """Gaussian NLL of ``t`` under N(mu, softplus(rho)^2), constant dropped.

    Summed over dimensions and averaged over the batch. ``t`` is detached here.
    """
    t = dc.detach(t)
    sigma = dc.softplus(rho)
    quad = dc.square(t - mu) / (dc.square(sigma) * 2.0)
    return dc.sum_(dc.log(sigma)) + dc.mean(dc.sum_(quad, axis=1))


def loss_vie(teacher_taps, student_taps, model) -> Tensor:
    """Sum of :func:`vie_pair` over the model's transfer layers."""
    if not model.vie_mu:
        raise ValueError("model has no variational heads")
    total = None
    for k, mu in model.vie_mu.items():
        term = vie_pair(teacher_taps[k], mu(student_taps[k]), model.vie_rho[k])
        total = term if total is None else total + term
    return total


def loss_total(parts: dict[str, Tensor], w: LossWeights) -> Tensor:
    """Weighted sum over the parts present; zero-weight parts are skipped.

    Parts outside the five weighted names (the DR imputation loss) enter
    with weight 1.
    """
    total = None
    for key, attr in PART_WEIGHTS.items():
        lam = getattr(w, attr)
        if key not in parts or lam == 0:
            continue
        term = parts[key] * lam
        total = term if total is None else total + term
    for key, part in parts.items():
        if key not in PART_WEIGHTS:
            total = part if total is None else total + part
    return Tensor(0.0) if total is None else total


def loss_ideal(p_cvr, r_all) -> float:
    """Entire-space CVR loss against counterfactual labels (numpy in, float out)."""
    return float(dc.binary_cross_entropy(_const(p_cvr), _const(r_all)).data.mean())
