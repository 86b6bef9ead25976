"""Self-distillation pretraining: view distributions, the cross-view consistency
loss, teacher centering, and the EMA teacher update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import backbone as bb
from . import rng as rngs
from .config import TrainingConfig
from .geometry import GeoSupervision, draw_samples, geo_loss, init_decoders
from .numerics import OptimizerState, adamw_step, no_grad
from .numerics import tensor as T
from .numerics.tensor import Tensor
from .pointcloud import PointCloud, augment

LOG_FLOOR = 1e-12


@dataclass
class ViewDistribution:
    probs: np.ndarray
    view_kind: str
    sample_id: int = 0

    def __post_init__(self):
        if self.view_kind not in ("global", "local"):
            raise ValueError("view_kind must be 'global' or 'local'")
        if np.any(self.probs < 0) or abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError("probs must lie on the simplex")


@dataclass
class TeacherStudentPair:
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    gamma: float = 0.996
    center: np.ndarray | None = None
    tau_s: float = 0.1
    tau_t: float = 0.04
    center_momentum: float = 0.9
    opt: OptimizerState = field(default_factory=OptimizerState)
    step: int = 0

    def __post_init__(self):
        if set(self.student) != set(self.teacher):
            raise ValueError("teacher and student must have identical parameter names")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("EMA momentum γ ∈ [0,1) required")


def init_head(feat_dim: int, proto_dim: int, rng: np.random.Generator, dtype=np.float64):
    return {
        "head.w": rng.normal(scale=1.0 / np.sqrt(feat_dim), size=(feat_dim, proto_dim)).astype(dtype),
        "head.b": np.zeros(proto_dim, dtype=dtype),
    }


def init_pretrain_params(cfg: TrainingConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = rngs.stream(cfg.seed if seed is None else seed, "init")
    params = bb.init_backbone(cfg.model, rng)
    dt = params["embed.w"].dtype
    params.update(init_head(cfg.model.feat_dim, cfg.model.proto_dim, rng, dt))
    params.update(init_decoders(cfg.model.channels, range(bb.NUM_STAGES), rng, dt))
    return params


def make_pair(cfg: TrainingConfig, params: Mapping[str, np.ndarray] | None = None) -> TeacherStudentPair:
    params = dict(init_pretrain_params(cfg) if params is None else params)
    d, o = cfg.distill, cfg.optim
    return TeacherStudentPair(
        student=dict(params), teacher=dict(params), gamma=d.gamma,
        center=np.zeros(cfg.model.proto_dim), tau_s=d.tau_s, tau_t=d.tau_t,
        center_momentum=d.center_momentum,
        opt=OptimizerState(lr=cfg.pretrain.lr_max, weight_decay=o.weight_decay,
                           betas=(o.beta1, o.beta2), eps=o.eps))


# ---------------------------------------------------------------- distributions


def pool_views(features: Tensor, spans: Sequence[tuple[int, int]]) -> Tensor:
    """Mean over the rows of each span -> (V, C)."""
    seg = np.concatenate([np.full(hi - lo, i) for i, (lo, hi) in enumerate(spans)])
    counts = np.array([hi - lo for lo, hi in spans], dtype=features.dtype)
    order = np.concatenate([np.arange(lo, hi) for lo, hi in spans])
    rows = features if np.array_equal(order, np.arange(features.shape[0])) else T.gather(features, order)
    return T.scatter_add(rows, seg, len(spans)) * Tensor(1.0 / counts[:, None])


def head_logits(pooled: Tensor, params) -> Tensor:
    return pooled @ params["head.w"] + params["head.b"]


def to_distribution(features, params, temperature: float, center=None) -> Tensor:
    """Pool per-point features of one view (L, C) or take pooled (C,) features,
    apply the head, subtract the center, softmax at ``temperature``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    features = T.as_tensor(features)
    pooled = features.mean(axis=0) if features.ndim == 2 else features
    logits = head_logits(pooled, params)
    if center is not None:
        logits = logits - T.as_tensor(center)
    return T.softmax(logits, temperature)


def csc_loss(teacher, student, exclude_same_view: bool = False) -> Tensor:
    """Cross-entropy of every teacher global view against every student view.

    ``teacher`` is (n, K), ``student`` is (n + m, K) with the n global views
    first. With ``exclude_same_view`` the pairs where both sides saw the same
    global view are dropped and the normalizer shrinks accordingly.
    """
    teacher, student = T.as_tensor(teacher), T.as_tensor(student)
    n, total = teacher.shape[0], student.shape[0]
    if n < 1 or total < n:
        raise ValueError(f"need n >= 1 teacher and >= n student views, got {n} and {total}")
    if teacher.shape[1] != student.shape[1]:
        raise ValueError("teacher and student prototype counts differ")
    log_s = T.log(student, floor=LOG_FLOOR)
    pair = teacher @ T.transpose(log_s)
    if not exclude_same_view:
        return pair.sum() * (-1.0 / (n * total))
    mask = np.ones((n, total))
    mask[np.arange(n), np.arange(n)] = 0.0
    count = n * total - n
    if count == 0:
        raise ValueError("no view pairs remain after excluding matching views")
    return (pair * Tensor(mask, dtype=pair.dtype)).sum() * (-1.0 / count)


def batch_csc_loss(teacher: Tensor, student: Tensor, n: int, m: int, batch: int,
                   exclude_same_view: bool = False) -> Tensor:
    """Per-sample loss averaged over the batch. Rows are grouped per sample:
    teacher has n rows per sample, student n + m."""
    total = None
    for b in range(batch):
        term = csc_loss(teacher[b * n:(b + 1) * n], student[b * (n + m):(b + 1) * (n + m)],
                        exclude_same_view)
        total = term if total is None else total + term
    return total * (1.0 / batch)


# ---------------------------------------------------------------- EMA


def ema_update(teacher: Mapping[str, np.ndarray], student: Mapping[str, np.ndarray],
               gamma: float) -> dict[str, np.ndarray]:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {name!r}: {t.shape} vs {s.shape}")
        out[name] = gamma * t + (1.0 - gamma) * s
    return out


def update_center(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    return momentum * center + (1.0 - momentum) * teacher_logits.mean(axis=0)


# ---------------------------------------------------------------- pretrain step


@dataclass
class PretrainBatch:
    """Everything random about one step, frozen so the objective is a pure function."""

    student_inputs: list[np.ndarray]
    teacher_inputs: list[np.ndarray]
    teacher_probs: np.ndarray
    teacher_logits: np.ndarray
    geo_indices: list[np.ndarray]
    shuffle_seed: int
    batch: int


def geo_supervision(cfg: TrainingConfig) -> GeoSupervision:
    return GeoSupervision(list(cfg.geo.alpha), cfg.geo.samples)


def prepare_pretrain_batch(samples: Sequence[PointCloud], pair: TeacherStudentPair,
                           cfg: TrainingConfig, step: int) -> PretrainBatch:
    a, csp = cfg.aug, cfg.pretrain.csp_enabled
    student_inputs, teacher_inputs = [], []
    for i, pc in enumerate(samples):
        views = augment(pc, a.n, a.m, a.target_points, rngs.stream(cfg.seed, "augment", step, i))
        student_inputs += [v.coords for v in views.views]
        teacher_inputs += [v.coords for v in views.globals]
    shuffle = rngs.derived_seed(cfg.seed, "shuffle", step)
    with no_grad():
        out = bb.forward(T.constants(pair.teacher), teacher_inputs, cfg.model, csp, shuffle)
        logits = head_logits(pool_views(out.final, out.spans), T.constants(pair.teacher)).data
    z = (logits - pair.center) / pair.tau_t
    z = z - z.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    spans = [(i * a.target_points, (i + 1) * a.target_points) for i in range(len(student_inputs))]
    indices = draw_samples(geo_supervision(cfg), spans, rngs.stream(cfg.seed, "geo", step))
    return PretrainBatch(student_inputs, teacher_inputs, probs, logits, indices, shuffle, len(samples))


def pretrain_objective(params, pb: PretrainBatch, cfg: TrainingConfig, tau_s: float | None = None):
    """Consistency loss plus weighted geometric loss. Returns (total, csc, geo)."""
    tau_s = cfg.distill.tau_s if tau_s is None else tau_s
    out = bb.forward(params, pb.student_inputs, cfg.model, cfg.pretrain.csp_enabled, pb.shuffle_seed)
    student = T.softmax(head_logits(pool_views(out.final, out.spans), params), tau_s)
    teacher = Tensor(pb.teacher_probs, dtype=student.dtype)
    csc = batch_csc_loss(teacher, student, cfg.aug.n, cfg.aug.m, pb.batch, cfg.distill.exclude_same_view)
    lam = cfg.pretrain.lambda_geo
    if lam == 0:
        return csc, csc, None
    coords = np.concatenate(pb.student_inputs, axis=0)
    geo = geo_loss(geo_supervision(cfg), out.taps, coords, params, indices=pb.geo_indices)
    return csc + geo * lam, csc, geo


def pretrain_step(samples: Sequence[PointCloud], pair: TeacherStudentPair, cfg: TrainingConfig,
                  lr: float | None = None) -> dict[str, float]:
    """One optimization step on the student followed by the teacher EMA. Mutates ``pair``."""
    if len(samples) < 1:
        raise ValueError("empty batch")
    pb = prepare_pretrain_batch(samples, pair, cfg, pair.step)
    tracked = T.parameters(pair.student)
    total, csc, geo = pretrain_objective(tracked, pb, cfg, pair.tau_s)
    grads = T.grad(total, tracked)
    pair.student, pair.opt = adamw_step(pair.student, grads, pair.opt, lr)
    pair.teacher = ema_update(pair.teacher, pair.student, pair.gamma)
    if pair.step == 0:
        # start the running mean at the first observed batch instead of at zero
        pair.center = pb.teacher_logits.mean(axis=0)
    else:
        pair.center = update_center(pair.center, pb.teacher_logits, pair.center_momentum)
    pair.step += 1
    return {
        "loss_csc": csc.item(),
        "loss_geo": 0.0 if geo is None else geo.item(),
        "loss_total": total.item(),
        "teacher_views": len(pb.teacher_inputs),
        "student_views": len(pb.student_inputs),
    }
