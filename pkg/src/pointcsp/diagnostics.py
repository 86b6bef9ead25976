"""Finite-difference gradient audit of every training loss on a toy network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from .config import TrainingConfig
from .distillation import PretrainBatch, csc_loss, init_pretrain_params, pretrain_objective
from .geometry import GeoSupervision, draw_samples, geo_loss, init_decoders
from .numerics import check_gradients
from .numerics import tensor as T
from .spd import FinetuneBatch, finetune_objective, init_task_head, spd_loss

TOLERANCE = 1e-4


def toy_config(seed: int = 0) -> TrainingConfig:
    """2 samples, 8 points, 4 channels."""
    return TrainingConfig().replace(**{
        "seed": seed, "model.channels": 4, "model.feat_dim": 4, "model.state_dim": 4,
        "model.proto_dim": 8, "aug.n": 2, "aug.m": 2, "aug.target_points": 8, "geo.samples": 4,
        "data.num_classes": 3, "pretrain.lambda_geo": 0.5, "finetune.lambda_geo": 0.5,
        "finetune.lambda_spd": 0.5,
    })


def _simplex(rng, rows: int, k: int) -> np.ndarray:
    z = rng.normal(size=(rows, k))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _spans(count: int, size: int):
    return [(i * size, (i + 1) * size) for i in range(count)]


def _perturb_ssm(params, rng):
    # keep the state matrix well away from zero so cross-token terms are exercised
    params["ssm.A"] = params["ssm.A"] + 0.3 * rng.normal(size=params["ssm.A"].shape)
    if "ssm.gate" in params:
        params["ssm.gate"] = rng.normal(size=params["ssm.gate"].shape)
    return params


def case_csc(seed: int):
    rng = np.random.default_rng([seed, 4])
    teacher = _simplex(rng, 2, 8)
    params = {"logits": rng.normal(size=(6, 8))}
    return lambda P: csc_loss(teacher, T.softmax(P["logits"], 0.1)), params


def case_spd(seed: int):
    rng = np.random.default_rng([seed, 6])
    teacher = rng.normal(size=(16, 4))
    params = {"features": rng.normal(size=(16, 4))}
    return lambda P: spd_loss(P["features"], teacher), params


def case_geo(seed: int):
    rng = np.random.default_rng([seed, 8])
    sup = GeoSupervision([0.5, 0.3, 0.2], 4)
    params = init_decoders(4, range(3), rng)
    params.update({f"tap{l}": rng.normal(size=(16, 4)) for l in range(3)})
    coords = rng.normal(size=(16, 3))
    idx = draw_samples(sup, _spans(2, 8), rng)
    return lambda P: geo_loss(sup, [P[f"tap{l}"] for l in range(3)], coords, P, indices=idx), params


def case_pretrain(seed: int):
    cfg = toy_config(seed)
    rng = np.random.default_rng([seed, 10])
    params = _perturb_ssm(init_pretrain_params(cfg, seed), rng)
    views = 2 * (cfg.aug.n + cfg.aug.m)
    pb = PretrainBatch(
        student_inputs=[rng.normal(size=(8, 3)) for _ in range(views)],
        teacher_inputs=[],
        teacher_probs=_simplex(rng, 2 * cfg.aug.n, cfg.model.proto_dim),
        teacher_logits=np.zeros((2 * cfg.aug.n, cfg.model.proto_dim)),
        geo_indices=draw_samples(GeoSupervision(cfg.geo.alpha, cfg.geo.samples), _spans(views, 8), rng),
        shuffle_seed=seed, batch=2)
    return lambda P: pretrain_objective(P, pb, cfg)[0], params


def case_finetune(seed: int):
    cfg = toy_config(seed)
    rng = np.random.default_rng([seed, 12])
    params = bb.init_backbone(cfg.model, rng)
    params.update(init_decoders(4, range(3), rng))
    params.update(init_task_head(4, cfg.data.num_classes, rng))
    params = _perturb_ssm(params, rng)
    fb = FinetuneBatch(
        inputs=[rng.normal(size=(8, 3)) for _ in range(2)],
        labels=rng.integers(0, cfg.data.num_classes, 16),
        teacher_features=rng.normal(size=(16, 4)),
        geo_indices=draw_samples(GeoSupervision(cfg.geo.alpha, cfg.geo.samples), _spans(2, 8), rng),
        shuffle_seed=seed)
    return lambda P: finetune_objective(P, fb, cfg, cfg.finetune.lambda_spd)[0], params


CASES = {
    "csc": case_csc,
    "spd": case_spd,
    "geo": case_geo,
    "pretrain": case_pretrain,
    "finetune": case_finetune,
}


@dataclass
class GradReport:
    loss: str
    seed: int
    max_rel_error: float
    worst_param: str

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def run_grad_check(seeds=range(5), losses=tuple(CASES), eps: float = 1e-5) -> list[GradReport]:
    reports = []
    for name in losses:
        for seed in seeds:
            fn, params = CASES[name](seed)
            errs = check_gradients(fn, params, eps)
            worst = max(errs, key=errs.get)
            reports.append(GradReport(name, seed, errs[worst], worst))
    return reports


def format_reports(reports: list[GradReport]) -> str:
    lines = [f"{'loss':<10}{'seed':>5}  {'max rel err':>12}  worst parameter"]
    for r in reports:
        flag = "" if r.ok else "  FAIL"
        lines.append(f"{r.loss:<10}{r.seed:>5}  {r.max_rel_error:12.3e}  {r.worst_param}{flag}")
    return "\n".join(lines)
