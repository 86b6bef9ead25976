"""Semantic preservation distillation for finetuning.

The teacher sees the batch as one serialized stream (CSP on), the student
sees each sample on its own; an MSE term pulls the student's per-point
features toward the teacher's. Only the student is used at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import backbone as bb
from . import rng as rngs
from .config import TrainingConfig
from .distillation import ema_update, geo_supervision
from .geometry import draw_samples, geo_loss, init_decoders
from .numerics import OptimizerState, adamw_step, no_grad
from .numerics import tensor as T
from .numerics.tensor import Tensor
from .pointcloud import PointCloud, prepare_sample

BACKBONE_PREFIXES = ("embed.", "mlp1.", "ssm.", "mlp2.", "proj.")


def is_backbone(name: str) -> bool:
    return name.startswith(BACKBONE_PREFIXES)


@dataclass
class SpdPair:
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    gamma: float = 0.999
    lambda_spd: float = 0.5
    opt: OptimizerState = field(default_factory=OptimizerState)
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("finetune EMA momentum must lie in [0, 1]")


def init_task_head(feat_dim: int, num_classes: int, rng: np.random.Generator, dtype=np.float64):
    return {
        "task.w": rng.normal(scale=1.0 / np.sqrt(feat_dim), size=(feat_dim, num_classes)).astype(dtype),
        "task.b": np.zeros(num_classes, dtype=dtype),
    }


def make_spd_pair(cfg: TrainingConfig, pretrained: Mapping[str, np.ndarray] | None = None) -> SpdPair:
    """Student = pretrained backbone (or a fresh one) + decoders + task head; teacher = exact copy."""
    rng = rngs.stream(cfg.seed, "init", 1)
    params = bb.init_backbone(cfg.model, rng)
    if pretrained is not None:
        for name in params:
            if pretrained[name].shape != params[name].shape:
                raise ValueError(f"pretrained {name!r} has shape {pretrained[name].shape}")
            params[name] = np.array(pretrained[name], dtype=params[name].dtype)
    dt = params["embed.w"].dtype
    decoders = init_decoders(cfg.model.channels, range(bb.NUM_STAGES), rng, dt)
    if pretrained is not None:
        decoders = {k: np.array(pretrained.get(k, v), dtype=dt) for k, v in decoders.items()}
    params.update(decoders)
    params.update(init_task_head(cfg.model.feat_dim, cfg.data.num_classes, rng, dt))
    f, o = cfg.finetune, cfg.optim
    return SpdPair(student=dict(params), teacher=dict(params), gamma=f.gamma,
                   lambda_spd=f.lambda_spd if f.spd_enabled else 0.0,
                   opt=OptimizerState(lr=f.lr_max, weight_decay=o.weight_decay,
                                      betas=(o.beta1, o.beta2), eps=o.eps))


def spd_loss(student_features, teacher_features) -> Tensor:
    """Mean over points of the squared distance between matched feature rows."""
    student_features = T.as_tensor(student_features)
    teacher_features = T.as_tensor(teacher_features)
    if student_features.shape != teacher_features.shape:
        raise ValueError(f"shape mismatch {student_features.shape} vs {teacher_features.shape}")
    diff = student_features - teacher_features.detach()
    return T.square(diff).sum() * (1.0 / student_features.shape[0])


def task_loss(features: Tensor, labels: np.ndarray, params) -> tuple[Tensor, np.ndarray]:
    """Per-point cross-entropy; also returns predicted labels."""
    logits = features @ params["task.w"] + params["task.b"]
    logp = T.log_softmax(logits)
    picked = T.gather(T.reshape(logp, (-1,)), np.arange(len(labels)) * logits.shape[1] + labels)
    return picked.mean() * -1.0, logits.data.argmax(axis=1)


@dataclass
class FinetuneBatch:
    inputs: list[np.ndarray]
    labels: np.ndarray
    teacher_features: np.ndarray | None
    geo_indices: list[np.ndarray]
    shuffle_seed: int


def prepare_finetune_batch(samples: Sequence[PointCloud], pair: SpdPair, cfg: TrainingConfig,
                           step: int) -> FinetuneBatch:
    target = cfg.aug.target_points
    inputs, labels = [], []
    for i, pc in enumerate(samples):
        if pc.labels is None:
            raise ValueError(f"scene {pc.scene_id!r} has no labels")
        seed_index = int(rngs.stream(cfg.seed, "sample", step, i).integers(len(pc)))
        prepared, _ = prepare_sample(pc, target, seed_index)
        inputs.append(prepared.coords)
        labels.append(prepared.labels)
    shuffle = rngs.derived_seed(cfg.seed, "shuffle", step, 1)
    teacher = None
    if pair.lambda_spd > 0:
        with no_grad():
            teacher = bb.forward(T.constants(pair.teacher), inputs, cfg.model, True, shuffle).final.data
    spans, start = [], 0
    for x in inputs:
        spans.append((start, start + len(x)))
        start += len(x)
    indices = draw_samples(geo_supervision(cfg), spans, rngs.stream(cfg.seed, "geo", step, 1))
    return FinetuneBatch(inputs, np.concatenate(labels), teacher, indices, shuffle)


def finetune_objective(params, fb: FinetuneBatch, cfg: TrainingConfig, lambda_spd: float):
    """Task + weighted distillation + weighted geometric loss.

    Returns (total, parts dict of Tensors or None, predictions)."""
    out = bb.forward(params, fb.inputs, cfg.model, csp_enabled=False)
    task, pred = task_loss(out.final, fb.labels, params)
    total = task
    spd = geo = None
    if lambda_spd > 0 and fb.teacher_features is not None:
        spd = spd_loss(out.final, Tensor(fb.teacher_features, dtype=out.final.dtype))
        total = total + spd * lambda_spd
    lam = cfg.finetune.lambda_geo
    if lam > 0:
        geo = geo_loss(geo_supervision(cfg), out.taps, np.concatenate(fb.inputs), params,
                       indices=fb.geo_indices)
        total = total + geo * lam
    return total, {"task": task, "spd": spd, "geo": geo}, pred


def finetune_step(samples: Sequence[PointCloud], pair: SpdPair, cfg: TrainingConfig,
                  lr: float | None = None) -> dict[str, float]:
    if len(samples) < 1:
        raise ValueError("empty batch")
    fb = prepare_finetune_batch(samples, pair, cfg, pair.step)
    tracked = T.parameters(pair.student)
    total, parts, pred = finetune_objective(tracked, fb, cfg, pair.lambda_spd)
    grads = T.grad(total, tracked)
    pair.student, pair.opt = adamw_step(pair.student, grads, pair.opt, lr)
    if pair.lambda_spd > 0:
        pair.teacher = ema_update(pair.teacher, pair.student, pair.gamma)
    pair.step += 1
    return {
        "loss_task": parts["task"].item(),
        "loss_spd": 0.0 if parts["spd"] is None else parts["spd"].item(),
        "loss_geo": 0.0 if parts["geo"] is None else parts["geo"].item(),
        "loss_total": total.item(),
        "train_acc": float(np.mean(pred == fb.labels)),
    }


def student_infer(coords: np.ndarray, params: Mapping[str, np.ndarray], cfg: TrainingConfig):
    """Per-point features and class predictions for one prepared sample; the teacher is never touched."""
    with no_grad():
        P = T.constants({k: v for k, v in params.items() if is_backbone(k) or k.startswith("task.")})
        out = bb.forward(P, [coords], cfg.model, csp_enabled=False)
        pred = None
        if "task.w" in P:
            pred = (out.final @ P["task.w"] + P["task.b"]).data.argmax(axis=1)
    return out.final.data, pred
