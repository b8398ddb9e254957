"""Multi-tower CVR network: shared embeddings, experts and gates, CTR /
teacher / student towers, click-conditioning block and variational heads.

Parameters live in a flat ``name -> Tensor`` registry. Each parameter is
initialised from its own RNG stream keyed by ``(seed, name)``, so adding or
dropping an optional block never shifts the values of the others.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

RHO_INIT = math.log(math.expm1(1.0))
CHECKPOINT_MAGIC = b"EVICKPT\x01"


@dataclass(frozen=True)
class ModelConfig:
    cardinalities: tuple[int, ...]
    embed_dim: int = 5
    n_experts: int = 8
    expert_dim: int = 256
    tower_dims: tuple[int, ...] = (128, 64, 32)
    cond_dim: int = 8
    transfer_layers: int = 3
    teacher: bool = True
    conditioned: bool = True
    vie: bool = True
    imputation: bool = False

    def __post_init__(self):
        if not 1 <= self.transfer_layers <= len(self.tower_dims):
            raise ValueError(f"transfer_layers must be in 1..{len(self.tower_dims)}, got {self.transfer_layers}")

    @property
    def transfer_depths(self) -> tuple[int, ...]:
        """Hidden-layer indices paired for the variational heads (deepest K)."""
        n = len(self.tower_dims)
        return tuple(range(n - self.transfer_layers, n))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["cardinalities"] = tuple(d["cardinalities"])
        d["tower_dims"] = tuple(d["tower_dims"])
        return cls(**d)


@dataclass
class ForwardOut:
    p_ctr: Tensor
    p_cvr_student: Tensor
    student_taps: list[Tensor]
    # student taps recomputed on a detached extractor output, for the VIE loss
    student_vie_taps: list[Tensor] = field(default_factory=list)
    p_cvr_teacher: Tensor | None = None
    teacher_taps: list[Tensor] = field(default_factory=list)
    p_imputation: Tensor | None = None
    gates: dict[str, Tensor] = field(default_factory=dict)


class Linear:
    def __init__(self, model: "EviModel", name: str, fan_in: int, fan_out: int):
        self.weight = model.register(f"{name}.weight", (fan_in, fan_out))
        self.bias = model.register(f"{name}.bias", (fan_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return dc.matmul(x, self.weight) + self.bias


class Tower:
    """ReLU representation learner followed by a one-unit linear head."""

    def __init__(self, model: "EviModel", name: str, in_dim: int, dims: tuple[int, ...], head_in: int | None = None):
        self.layers = []
        prev = in_dim
        for i, d in enumerate(dims):
            self.layers.append(Linear(model, f"{name}.layer{i}", prev, d))
            prev = d
        self.head = Linear(model, f"{name}.head", prev if head_in is None else head_in, 1)

    def learn(self, x: Tensor) -> list[Tensor]:
        taps = []
        for layer in self.layers:
            x = dc.relu(layer(x))
            taps.append(x)
        return taps

    def logit(self, h: Tensor) -> Tensor:
        return dc.reshape(self.head(h), (h.shape[0],))


class EviModel:
    """The full network. Which optional blocks exist is set by ``ModelConfig``."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._fans: dict[str, tuple[int, int]] = {}
        cfg = config
        self.tables = [self.register(f"embedding.field{f}", (c, cfg.embed_dim)) for f, c in enumerate(cfg.cardinalities)]
        in_dim = cfg.embed_dim * len(cfg.cardinalities)
        self.experts = [Linear(self, f"experts.{e}", in_dim, cfg.expert_dim) for e in range(cfg.n_experts)]
        towers = ["ctr", "student"] + (["teacher"] if cfg.teacher else [])
        self.gates = {t: Linear(self, f"gate.{t}", in_dim, cfg.n_experts) for t in towers}
        dims = cfg.tower_dims
        self.ctr = Tower(self, "ctr", cfg.expert_dim, dims)
        self.student = Tower(self, "student", cfg.expert_dim, dims)
        self.teacher = None
        self.conditioner = None
        if cfg.teacher:
            head_in = cfg.cond_dim * dims[-1] if cfg.conditioned else None
            self.teacher = Tower(self, "teacher", cfg.expert_dim, dims, head_in=head_in)
            if cfg.conditioned:
                self.conditioner = Linear(self, "conditioner", 1, cfg.cond_dim)
        self.vie_mu: dict[int, Linear] = {}
        self.vie_rho: dict[int, Tensor] = {}
        if cfg.teacher and cfg.vie:
            for k in cfg.transfer_depths:
                d = dims[k]
                self.vie_mu[k] = Linear(self, f"vie.layer{k}.mu", d, d)
                self.vie_rho[k] = self.register(f"vie.layer{k}.rho", (d,))
        self.imputation = Tower(self, "imputation", cfg.expert_dim, dims) if cfg.imputation else None
        init_parameters(self, seed)

    def register(self, name: str, shape: tuple[int, ...]) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        t = Tensor(np.zeros(shape), requires_grad=True, name=name)
        self.params[name] = t
        self._fans[name] = (shape[0], shape[1]) if len(shape) == 2 else (0, 0)
        return t

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def sigma(self, k: int) -> Tensor:
        return dc.softplus(self.vie_rho[k])

    def forward(self, features, ctr_override: np.ndarray | None = None) -> ForwardOut:
        """Run every tower on a block of records.

        ``ctr_override`` replaces the (detached) click propensity fed to the
        conditioning block; the CTR output itself is unaffected.
        """
        features = np.asarray(features)
        cfg = self.config
        if features.ndim != 2 or features.shape[1] != len(cfg.cardinalities):
            raise ValueError(f"expected features of shape [batch, {len(cfg.cardinalities)}], got {features.shape}")
        if len(features) == 0:
            raise ValueError("empty batch")
        if np.any(features < 0) or np.any(features >= np.asarray(cfg.cardinalities)):
            raise ValueError("category index outside the model schema")
        n = len(features)
        x = dc.concat([dc.embedding(t, features[:, f]) for f, t in enumerate(self.tables)], axis=1)
        w = dc.concat([e.weight for e in self.experts], axis=1)
        b = dc.concat([e.bias for e in self.experts], axis=0)
        hidden = dc.relu(dc.matmul(x, w) + b)
        stacked = dc.reshape(hidden, (n, cfg.n_experts, cfg.expert_dim))
        gates = {t: dc.softmax(g(x), axis=1) for t, g in self.gates.items()}
        mixed = {t: dc.mix_experts(g, stacked) for t, g in gates.items()}

        ctr_taps = self.ctr.learn(mixed["ctr"])
        p_ctr = dc.sigmoid(self.ctr.logit(ctr_taps[-1]))
        s_taps = self.student.learn(mixed["student"])
        p_student = dc.sigmoid(self.student.logit(s_taps[-1]))
        out = ForwardOut(p_ctr=p_ctr, p_cvr_student=p_student, student_taps=s_taps, gates=gates)
        if self.vie_mu:
            # VIE trains the student tower and the heads, never the shared extractor
            out.student_vie_taps = self.student.learn(dc.detach(mixed["student"]))

        if self.teacher is not None:
            t_taps = self.teacher.learn(mixed["teacher"])
            h = t_taps[-1]
            if self.conditioner is not None:
                prop = dc.detach(p_ctr).data if ctr_override is None else np.asarray(ctr_override, dtype=np.float64)
                c = self.conditioner(Tensor(prop.reshape(n, 1)))
                h = dc.outer_product(c, h)
            out.p_cvr_teacher = dc.sigmoid(self.teacher.logit(h))
            out.teacher_taps = t_taps
        if self.imputation is not None:
            i_taps = self.imputation.learn(mixed["student"])
            out.p_imputation = dc.softplus(self.imputation.logit(i_taps[-1]))
        return out

    def predict(self, features, batch_size: int = 8192) -> dict[str, np.ndarray]:
        """Forward in blocks without keeping gradients; returns numpy arrays."""
        parts: dict[str, list[np.ndarray]] = {"ctr": [], "cvr": [], "teacher": []}
        for i in range(0, len(features), batch_size):
            out = self.forward(features[i : i + batch_size])
            parts["ctr"].append(out.p_ctr.data)
            parts["cvr"].append(out.p_cvr_student.data)
            if out.p_cvr_teacher is not None:
                parts["teacher"].append(out.p_cvr_teacher.data)
        return {k: np.concatenate(v) for k, v in parts.items() if v}


def pseudo_labels(out: ForwardOut) -> Tensor:
    """Teacher CVR as detached soft labels."""
    if out.p_cvr_teacher is None:
        raise ValueError("model has no teacher tower")
    return dc.detach(out.p_cvr_teacher)


def init_parameters(model: EviModel, seed: int) -> None:
    """Glorot-uniform weights, zero biases, rho at softplus^-1(1)."""
    for name, p in model.params.items():
        if name.endswith(".rho"):
            p.data = np.full(p.shape, RHO_INIT)
        elif p.data.ndim == 1:
            p.data = np.zeros(p.shape)
        else:
            fan_in, fan_out = model._fans[name]
            a = math.sqrt(6.0 / (fan_in + fan_out))
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            p.data = rng.uniform(-a, a, size=p.shape)
        p.grad = None


# checkpoints

def save_checkpoint(model: EviModel, path: str | Path, meta: dict | None = None) -> None:
    """Write parameters to a self-describing little-endian binary file.

    Layout: 8-byte magic ``EVICKPT\\x01``, an unsigned 64-bit header length,
    a UTF-8 JSON header ``{"model", "meta", "tensors": [[name, shape], ...]}``
    and then each tensor's float64 values in header order.
    """
    names = sorted(model.params)
    header = {
        "model": model.config.to_dict(),
        "meta": meta or {},
        "tensors": [[n, list(model.params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[EviModel, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (size,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(size).decode("utf-8"))
        model = EviModel(ModelConfig.from_dict(header["model"]))
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {name!r}")
            if name not in model.params:
                raise ValueError(f"{path}: unknown tensor {name!r}")
            model.params[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return model, header["meta"]
