"""Representation probes and cross-scene consistency metrics.

All distances are Euclidean on L2-normalized features. Features always come
from the student, one sample per forward pass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import rng as rngs
from .config import TrainingConfig
from .numerics import OptimizerState, adamw_step
from .numerics import tensor as T
from .pointcloud import PointCloud, prepare_sample
from .spd import student_infer


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


# ---------------------------------------------------------------- probes


def knn_probe(train_x, train_y, test_x, test_y, k: int = 5, normalize: bool = True,
              chunk: int = 2048) -> float:
    """Majority vote over the k nearest training points; ties go to the class
    with the smallest summed distance."""
    train_x, test_x = np.asarray(train_x, float), np.asarray(test_x, float)
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    if len(train_x) == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= len(train_x):
        raise ValueError(f"k={k} outside [1, {len(train_x)}]")
    if len(test_x) == 0:
        return float("nan")
    if normalize:
        train_x, test_x = l2_normalize(train_x), l2_normalize(test_x)
    classes = np.unique(train_y)
    onehot = (train_y[:, None] == classes[None, :]).astype(float)
    correct = 0
    for lo in range(0, len(test_x), chunk):
        d = np.sqrt(_pairwise_sq(test_x[lo:lo + chunk], train_x))
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        nd = np.take_along_axis(d, nn, axis=1)
        votes = onehot[nn].sum(axis=1)
        dist_sum = (onehot[nn] * nd[:, :, None]).sum(axis=1)
        best = votes.max(axis=1, keepdims=True)
        dist_sum = np.where(votes == best, dist_sum, np.inf)
        pred = classes[np.argmin(dist_sum, axis=1)]
        correct += int((pred == test_y[lo:lo + chunk]).sum())
    return correct / len(test_x)


def iou_per_class(pred, true, num_classes: int) -> np.ndarray:
    """IoU per class; NaN for classes absent from both prediction and truth."""
    pred, true = np.asarray(pred), np.asarray(true)
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        p, t = pred == c, true == c
        union = np.sum(p | t)
        if union:
            out[c] = np.sum(p & t) / union
    return out


def mean_iou(pred, true, num_classes: int) -> float:
    return float(np.nanmean(iou_per_class(pred, true, num_classes)))


def linear_probe(train_x, train_y, test_x, test_y, num_classes: int | None = None,
                 steps: int = 300, lr: float = 0.05, seed: int = 0, normalize: bool = True):
    """Softmax-regression probe trained full-batch with AdamW on frozen features.

    Returns ``(accuracy, miou, per_class_iou)`` on the test split.
    """
    train_x, test_x = np.asarray(train_x, float), np.asarray(test_x, float)
    train_y, test_y = np.asarray(train_y, int), np.asarray(test_y, int)
    k = int(max(train_y.max(), test_y.max()) + 1) if num_classes is None else num_classes
    missing = sorted(set(range(k)) - set(np.unique(train_y).tolist()))
    if missing:
        raise ValueError(f"classes {missing} are absent from the training split")
    if normalize:
        train_x, test_x = l2_normalize(train_x), l2_normalize(test_x)
    rng = rngs.stream(seed, "probe")
    params = {"w": rng.normal(scale=0.01, size=(train_x.shape[1], k)), "b": np.zeros(k)}
    state = OptimizerState(lr=lr, weight_decay=0.0)
    X = T.Tensor(train_x)
    flat_idx = np.arange(len(train_y)) * k + train_y
    for _ in range(steps):
        P = T.parameters(params)
        logp = T.log_softmax(X @ P["w"] + P["b"])
        loss = T.gather(T.reshape(logp, (-1,)), flat_idx).mean() * -1.0
        params, state = adamw_step(params, T.grad(loss, P), state)
    pred = (test_x @ params["w"] + params["b"]).argmax(axis=1)
    per_class = iou_per_class(pred, test_y, k)
    return float(np.mean(pred == test_y)), float(np.nanmean(per_class)), per_class


# ---------------------------------------------------------------- consistency


@dataclass
class ConsistencyReport:
    intra: float
    inter: float
    ratio: float | None
    per_class_intra: dict[int, float] = field(default_factory=dict)
    defined: bool = True


def consistency_metric(features, labels, scene_ids, max_per_group: int | None = None,
                       seed: int = 0, normalize: bool = True) -> ConsistencyReport:
    """Same-class cross-scene distance over different-class distance.

    ``intra`` pools every same-class pair drawn from different scenes;
    ``inter`` pools every different-class pair.
    """
    x = np.asarray(features, float)
    labels, scene_ids = np.asarray(labels), np.asarray(scene_ids)
    if normalize:
        x = l2_normalize(x)
    if max_per_group is not None:
        rng = rngs.stream(seed, "eval")
        keep = []
        for s in np.unique(scene_ids):
            for c in np.unique(labels[scene_ids == s]):
                idx = np.flatnonzero((scene_ids == s) & (labels == c))
                if len(idx) > max_per_group:
                    idx = np.sort(rng.choice(idx, max_per_group, replace=False))
                keep.append(idx)
        keep = np.sort(np.concatenate(keep))
        x, labels, scene_ids = x[keep], labels[keep], scene_ids[keep]
    shared = [c for c in np.unique(labels) if len(np.unique(scene_ids[labels == c])) >= 2]
    if not shared:
        raise ValueError("no class appears in two or more scenes")
    d = np.sqrt(_pairwise_sq(x, x))
    same_class = labels[:, None] == labels[None, :]
    cross_scene = scene_ids[:, None] != scene_ids[None, :]
    per_class = {}
    for c in shared:
        idx = np.flatnonzero(labels == c)
        mask = cross_scene[np.ix_(idx, idx)]
        per_class[int(c)] = float(d[np.ix_(idx, idx)][mask].mean())
    intra_mask = same_class & cross_scene
    inter_mask = ~same_class
    intra = float(d[intra_mask].mean())
    inter = float(d[inter_mask].mean()) if inter_mask.any() else 0.0
    if inter == 0.0:
        return ConsistencyReport(intra, inter, None, per_class, defined=False)
    return ConsistencyReport(intra, inter, intra / inter, per_class)


# ---------------------------------------------------------------- export


def export_embeddings(features, labels, scene_ids, path, point_ids=None) -> Path:
    """CSV with header ``scene_id,point_id,label,f_0..f_{C-1}``."""
    features = np.asarray(features, float)
    path = Path(path)
    width = features.shape[1] if features.ndim == 2 else 0
    if point_ids is None:
        point_ids, seen = [], {}
        for s in scene_ids:
            point_ids.append(seen.get(s, 0))
            seen[s] = seen.get(s, 0) + 1
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "point_id", "label"] + [f"f_{i}" for i in range(width)])
        for row, s, p, y in zip(features, scene_ids, point_ids, labels):
            w.writerow([s, int(p), int(y)] + [format(float(v), ".17g") for v in row])
    return path


def read_embeddings(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    feats = np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), len(header) - 3)
    return feats, np.array([int(r[2]) for r in body]), [r[0] for r in body], np.array([int(r[1]) for r in body])


# ---------------------------------------------------------------- end to end


def extract_features(params: Mapping[str, np.ndarray], scenes: Sequence[PointCloud], cfg: TrainingConfig,
                     batch_size: int = 1):
    """Student features for every scene, one scene per forward pass.

    ``batch_size`` only groups scenes for bookkeeping; it cannot change any value.
    """
    feats, labels, sids, preds = [], [], [], []
    for lo in range(0, len(scenes), batch_size):
        for pc in scenes[lo:lo + batch_size]:
            prepared, _ = prepare_sample(pc, cfg.aug.target_points, 0)
            f, p = student_infer(prepared.coords, params, cfg)
            feats.append(f)
            labels.append(prepared.labels)
            sids += [pc.scene_id] * len(f)
            if p is not None:
                preds.append(p)
    return (np.concatenate(feats), np.concatenate(labels), np.array(sids),
            np.concatenate(preds) if preds else None)


def evaluate(params, train_scenes, test_scenes, cfg: TrainingConfig, arm: str = "",
             seed: int | None = None, batch_size: int = 1) -> dict:
    """Summary dict: kNN and linear-probe accuracy, mIoU, consistency ratio, per-class IoU."""
    seed = cfg.seed if seed is None else seed
    k = cfg.data.num_classes
    tr_x, tr_y, _, _ = extract_features(params, train_scenes, cfg, batch_size)
    te_x, te_y, te_s, te_pred = extract_features(params, test_scenes, cfg, batch_size)
    acc_knn = knn_probe(tr_x, tr_y, te_x, te_y, cfg.eval.knn_k)
    acc_lin, miou, per_class = linear_probe(tr_x, tr_y, te_x, te_y, k, cfg.eval.probe_steps,
                                            cfg.eval.probe_lr, seed)
    try:
        report = consistency_metric(te_x, te_y, te_s, cfg.eval.points_per_class, seed)
        ratio = report.ratio
    except ValueError:
        ratio = None
    summary = {
        "arm": arm,
        "seed": seed,
        "acc_knn": acc_knn,
        "acc_linear": acc_lin,
        "miou": miou,
        "consistency_ratio": ratio,
        "per_class": {str(c): (None if np.isnan(v) else float(v)) for c, v in enumerate(per_class)},
    }
    if te_pred is not None:
        summary["acc_task"] = float(np.mean(te_pred == te_y))
        summary["miou_task"] = mean_iou(te_pred, te_y, k)
    return summary
