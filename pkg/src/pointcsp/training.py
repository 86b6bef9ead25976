"""Seeded pretrain / finetune loops, output layout, and the component ablation runner.

Output directory layout::

    config.lock
    checkpoints/step_<n>.ckpt
    logs/train.jsonl
    metrics/summary.json
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ck
from . import rng as rngs
from .config import TrainingConfig, architecture_hash, config_hash, dumps
from .distillation import make_pair, pretrain_step
from .evaluation import consistency_metric, evaluate, extract_features
from .numerics import LrSchedule, NonFiniteError, lr_at
from .pointcloud import PointCloud, SceneSpec, generate_corpus
from .spd import finetune_step, make_spd_pair

log = logging.getLogger(__name__)

ARMS = {
    "baseline": (False, False),
    "spd": (False, True),
    "csp": (True, False),
    "csp_spd": (True, True),
}


class TrainingDiverged(RuntimeError):
    pass


def corpus_for(cfg: TrainingConfig, corpus_seed: int | None = None) -> list[PointCloud]:
    d = cfg.data
    spec = SceneSpec(d.num_classes, d.objects_per_scene, d.points_per_object, d.noise_sigma,
                     seed=d.corpus_seed if corpus_seed is None else corpus_seed)
    return generate_corpus(spec, d.num_scenes)


def split(cfg: TrainingConfig, corpus: Sequence[PointCloud]):
    cut = len(corpus) - cfg.eval.test_scenes
    return list(corpus[:cut]), list(corpus[cut:])


def _schedule(steps: int, warmup_frac: float, lr_max: float, lr_min: float) -> LrSchedule | None:
    if steps == 0:
        return None
    return LrSchedule(int(warmup_frac * steps), steps, lr_max, lr_min)


def _batch(corpus: Sequence[PointCloud], size: int, seed: int, step: int) -> list[PointCloud]:
    rng = rngs.stream(seed, "order", step)
    idx = rng.choice(len(corpus), size=size, replace=size > len(corpus))
    return [corpus[i] for i in idx]


def moving_average(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, float)
    if len(v) == 0:
        return v
    w = min(window, len(v))
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[w:] - c[:-w]) / w


def trend_ok(values: Sequence[float], window: int = 50) -> bool:
    """Final moving average lies below the first one."""
    ma = moving_average(values, window)
    return bool(len(ma) >= 2 and ma[-1] < ma[0])


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


class RunDir:
    def __init__(self, root, cfg: TrainingConfig):
        self.root = Path(root)
        (self.root / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.root / "logs").mkdir(exist_ok=True)
        (self.root / "metrics").mkdir(exist_ok=True)
        (self.root / "config.lock").write_text(dumps(cfg))
        self.log_path = self.root / "logs" / "train.jsonl"
        self.log_path.write_text("")

    def log(self, record: dict) -> None:
        with self.log_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True, default=_json_default) + "\n")

    def checkpoint(self, ckpt: ck.Checkpoint) -> Path:
        return ck.save(ckpt, self.root / "checkpoints" / f"step_{ckpt.step}.ckpt")

    def summary(self, data: dict, name: str = "summary.json") -> Path:
        path = self.root / "metrics" / name
        path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
        return path


def _dump_diagnostics(run: RunDir | None, info: dict) -> None:
    if run is not None:
        (run.root / "logs" / "diagnostics.json").write_text(json.dumps(info, indent=2, sort_keys=True))


# ---------------------------------------------------------------- pretrain


@dataclass
class PretrainResult:
    checkpoint: ck.Checkpoint
    history: list[dict] = field(default_factory=list)


def run_pretrain(cfg: TrainingConfig, corpus: Sequence[PointCloud], out_dir=None) -> PretrainResult:
    """Self-distillation pretraining for ``cfg.pretrain.steps`` steps; deterministic in (cfg, corpus)."""
    if len(corpus) < 2:
        raise ValueError("pretraining needs at least two scenes")
    p = cfg.pretrain
    run = RunDir(out_dir, cfg) if out_dir is not None else None
    pair = make_pair(cfg)
    sched = _schedule(p.steps, p.warmup_frac, p.lr_max, p.lr_min)
    history = []

    def snapshot() -> ck.Checkpoint:
        return ck.Checkpoint({"student": pair.student, "teacher": pair.teacher,
                              "state": {"center": pair.center}},
                             config_hash(cfg), architecture_hash(cfg), "pretrain", pair.step,
                             {"csp_enabled": p.csp_enabled})

    for step in range(p.steps):
        lr = lr_at(step, sched)
        batch = _batch(corpus, p.batch_size, cfg.seed, step)
        try:
            rec = pretrain_step(batch, pair, cfg, lr)
        except NonFiniteError as exc:
            _dump_diagnostics(run, {"step": step, "lr": lr, "error": str(exc)})
            raise TrainingDiverged(f"non-finite value at pretrain step {step}: {exc}") from exc
        if not math.isfinite(rec["loss_total"]):
            _dump_diagnostics(run, {"step": step, "lr": lr, **rec})
            raise TrainingDiverged(f"non-finite loss at pretrain step {step}")
        row = {"step": step, "lr": lr, "loss_csc": rec["loss_csc"], "loss_geo": rec["loss_geo"],
               "loss_total": rec["loss_total"]}
        history.append(row)
        if run is not None:
            run.log(row)
            if p.checkpoint_every and (step + 1) % p.checkpoint_every == 0 and step + 1 < p.steps:
                run.checkpoint(snapshot())
        log.debug("pretrain step %d loss %.5f", step, rec["loss_total"])
    final = snapshot()
    if run is not None:
        run.checkpoint(final)
        losses = [h["loss_total"] for h in history]
        run.summary({"kind": "pretrain", "steps": p.steps, "seed": cfg.seed,
                     "final_loss": losses[-1] if losses else None,
                     "trend_ok": trend_ok(losses) if losses else None})
    return PretrainResult(final, history)


# ---------------------------------------------------------------- finetune


@dataclass
class FinetuneResult:
    checkpoint: ck.Checkpoint
    history: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _val_accuracy(params, scenes, cfg) -> float:
    _, labels, _, pred = extract_features(params, scenes, cfg)
    return float(np.mean(pred == labels))


def run_finetune(cfg: TrainingConfig, pretrained: ck.Checkpoint | None, train_scenes: Sequence[PointCloud],
                 val_scenes: Sequence[PointCloud] = (), out_dir=None, arm: str = "",
                 evaluate_at_end: bool = True) -> FinetuneResult:
    """Supervised finetuning with optional distillation from a batch-serialized teacher.

    ``pretrained=None`` starts from a fresh initialization.
    """
    if pretrained is not None and pretrained.arch_hash != architecture_hash(cfg):
        raise ck.IncompatibleCheckpoint("pretrained checkpoint does not match the model config")
    f = cfg.finetune
    run = RunDir(out_dir, cfg) if out_dir is not None else None
    pair = make_spd_pair(cfg, None if pretrained is None else pretrained.student)
    sched = _schedule(f.steps, f.warmup_frac, f.lr_max, f.lr_min)
    epoch = max(1, math.ceil(len(train_scenes) / f.batch_size))
    history, validation = [], []

    def snapshot() -> ck.Checkpoint:
        return ck.Checkpoint({"student": pair.student, "teacher": pair.teacher},
                             config_hash(cfg), architecture_hash(cfg), "finetune", pair.step,
                             {"arm": arm, "spd_enabled": f.spd_enabled})

    for step in range(f.steps):
        lr = lr_at(step, sched)
        batch = _batch(train_scenes, f.batch_size, cfg.seed, step)
        try:
            rec = finetune_step(batch, pair, cfg, lr)
        except NonFiniteError as exc:
            _dump_diagnostics(run, {"step": step, "lr": lr, "error": str(exc)})
            raise TrainingDiverged(f"non-finite value at finetune step {step}: {exc}") from exc
        row = {"step": step, **rec}
        history.append(row)
        if run is not None:
            run.log(row)
            if f.checkpoint_every and (step + 1) % f.checkpoint_every == 0 and step + 1 < f.steps:
                run.checkpoint(snapshot())
        if val_scenes and ((step + 1) % epoch == 0 or step + 1 == f.steps):
            v = {"step": step + 1, "epoch": (step + 1) / epoch,
                 "val_acc": _val_accuracy(pair.student, val_scenes, cfg)}
            validation.append(v)
            if run is not None:
                with (run.root / "logs" / "val.jsonl").open("a") as fh:
                    fh.write(json.dumps(v, sort_keys=True) + "\n")
    final = snapshot()
    summary = {}
    if evaluate_at_end and val_scenes:
        summary = evaluate(pair.student, train_scenes, val_scenes, cfg, arm=arm)
    if run is not None:
        run.checkpoint(final)
        if summary:
            run.summary(summary)
    return FinetuneResult(final, history, validation, summary)


# ---------------------------------------------------------------- ablation


def arm_config(cfg: TrainingConfig, spd: bool, batch_size: int | None = None) -> TrainingConfig:
    """Config for one finetune arm. A batch-size override keeps the number of
    samples seen fixed, so the step count scales inversely with the batch."""
    over = {"finetune.spd_enabled": spd}
    if batch_size is not None:
        f = cfg.finetune
        over["finetune.batch_size"] = batch_size
        over["finetune.steps"] = math.ceil(f.steps * f.batch_size / batch_size)
    return cfg.replace(**over)


def pretrain_consistency(ckpt: ck.Checkpoint, scenes, cfg: TrainingConfig) -> float | None:
    feats, labels, sids, _ = extract_features(ckpt.student, scenes, cfg)
    return consistency_metric(feats, labels, sids, cfg.eval.points_per_class, cfg.seed).ratio


def run_ablation(cfg: TrainingConfig, corpus_seeds: Sequence[int], out_dir=None,
                 batch_sizes: Sequence[int] = (1, 2, 4, 8), arms: Sequence[str] = tuple(ARMS),
                 consistency: bool = True, parallel: bool = False,
                 sweep_seeds: Sequence[int] | None = None) -> dict:
    """Four component arms per corpus seed plus a finetune batch-size sweep of the full model.

    The sweep runs on ``sweep_seeds`` (default: every corpus seed).

    Returns ``{"arms": rows, "batch_sweep": rows, "consistency": rows, "seconds": {...}}``;
    the wall-clock timings are kept out of the written report so reruns stay byte-identical.
    """
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        (root / "config.lock").write_text(dumps(cfg))
    rows, sweep, cons = [], [], []
    started, sweep_seconds = time.perf_counter(), 0.0
    for cs in corpus_seeds:
        corpus = corpus_for(cfg, cs)
        train, test = split(cfg, corpus)
        sub = (lambda *parts: None if root is None else root.joinpath(f"corpus_{cs}", *parts))
        pre_cfg = cfg.replace(**{"pretrain.csp_enabled": True})
        pretrained = run_pretrain(pre_cfg, train, sub("pretrain_csp")).checkpoint
        if consistency:
            plain_cfg = cfg.replace(**{"pretrain.csp_enabled": False})
            plain = run_pretrain(plain_cfg, train, sub("pretrain_plain")).checkpoint
            cons.append({"corpus_seed": cs,
                         "ratio_csp": pretrain_consistency(pretrained, test, cfg),
                         "ratio_plain": pretrain_consistency(plain, test, cfg)})
        jobs = []
        for name in arms:
            csp, spd = ARMS[name]
            jobs.append((name, arm_config(cfg, spd), pretrained if csp else None, sub("arms", name)))
        results = _run_jobs(jobs, train, test, parallel)
        for (name, *_), res in zip(jobs, results):
            csp, spd = ARMS[name]
            rows.append({"corpus_seed": cs, "arm": name, "csp": csp, "spd": spd,
                         **{k: res.summary[k] for k in ("acc_knn", "acc_linear", "miou", "consistency_ratio")},
                         "final_val_acc": res.validation[-1]["val_acc"] if res.validation else None})
        for bs in batch_sizes if sweep_seeds is None or cs in sweep_seeds else ():
            t0 = time.perf_counter()
            res = run_finetune(arm_config(cfg, True, bs), pretrained, train, test,
                               sub("batch_sweep", f"bf_{bs}"), arm=f"csp_spd_bf{bs}")
            sweep.append({"corpus_seed": cs, "batch_size": bs, "miou": res.summary["miou"],
                          "acc_linear": res.summary["acc_linear"],
                          "val_acc": res.validation[-1]["val_acc"] if res.validation else None})
            sweep_seconds += time.perf_counter() - t0
    table = {"arms": rows, "batch_sweep": sweep, "consistency": cons}
    if root is not None:
        from .report import write_ablation_report
        write_ablation_report(table, root)
    table["seconds"] = {"total": time.perf_counter() - started, "batch_sweep": sweep_seconds}
    return table


def _finetune_job(args):
    name, arm_cfg, pretrained, out, train, test = args
    return run_finetune(arm_cfg, pretrained, train, test, out, arm=name)


def _run_jobs(jobs, train, test, parallel: bool):
    payload = [(name, c, p, out, train, test) for name, c, p, out in jobs]
    if not parallel:
        return [_finetune_job(a) for a in payload]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor() as pool:
        return list(pool.map(_finetune_job, payload))
