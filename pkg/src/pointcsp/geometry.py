"""Per-layer coordinate decoders and the multi-level geometric reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import tensor as T
from .numerics.tensor import Tensor


def decoder_hidden(channels: int) -> int:
    # a 3-wide bottleneck is the smallest that can carry xyz back out
    return max(channels // 2, 3)


def init_decoders(channels: int, layers: Sequence[int], rng: np.random.Generator,
                  dtype=np.float64) -> dict[str, np.ndarray]:
    h = decoder_hidden(channels)
    p = {}
    for l in layers:
        p[f"geo.{l}.w1"] = rng.normal(scale=1.0 / np.sqrt(channels), size=(channels, h)).astype(dtype)
        p[f"geo.{l}.b1"] = np.zeros(h, dtype=dtype)
        p[f"geo.{l}.w2"] = rng.normal(scale=1.0 / np.sqrt(h), size=(h, 3)).astype(dtype)
        p[f"geo.{l}.b2"] = np.zeros(3, dtype=dtype)
    return p


@dataclass
class GeoSupervision:
    alpha: list[float]
    samples: int
    layers: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if len(self.alpha) != len(self.layers):
            raise ValueError("one weight per supervised layer")
        if any(a < 0 for a in self.alpha):
            raise ValueError("layer weights must be >= 0")
        if self.samples < 1:
            raise ValueError("need at least one sampled feature per layer")
        if len(set(self.layers)) != len(self.layers):
            raise ValueError("layer indices must be distinct")


def decode_coords(features: Tensor, params, layer: int) -> Tensor:
    """Two-layer MLP from features to xyz."""
    w1 = params[f"geo.{layer}.w1"]
    if features.shape[-1] != w1.shape[0]:
        raise ValueError(f"feature width {features.shape[-1]} != decoder input {w1.shape[0]}")
    hidden = T.silu(features @ w1 + params[f"geo.{layer}.b1"])
    return hidden @ params[f"geo.{layer}.w2"] + params[f"geo.{layer}.b2"]


def geo_loss_layer(features: Tensor, coords, params, layer: int) -> Tensor:
    """Mean squared Euclidean reconstruction error over the sampled features."""
    coords = T.as_tensor(coords)
    if features.shape[0] != coords.shape[0]:
        raise ValueError(f"{features.shape[0]} features vs {coords.shape[0]} coordinates")
    diff = decode_coords(features, params, layer) - coords
    return T.square(diff).sum() * (1.0 / features.shape[0])


def sample_indices(spans: Sequence[tuple[int, int]], count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` row indices per span, drawn without replacement."""
    out = []
    for lo, hi in spans:
        if count > hi - lo:
            raise ValueError(f"cannot sample {count} features from a {hi - lo}-token view")
        out.append(lo + rng.choice(hi - lo, size=count, replace=False))
    return np.concatenate(out)


def draw_samples(sup: GeoSupervision, spans, rng: np.random.Generator) -> list[np.ndarray]:
    """Independent draws per supervised layer."""
    return [sample_indices(spans, sup.samples, rng) for _ in sup.layers]


def geo_loss(sup: GeoSupervision, taps: Sequence[Tensor], coords: np.ndarray, params,
             indices: Sequence[np.ndarray] | None = None, spans=None,
             rng: np.random.Generator | None = None) -> Tensor:
    """Weighted sum of per-layer losses.

    Either pass pre-drawn ``indices`` (one array per layer) or ``spans`` and an
    ``rng`` to draw them. ``coords`` holds the true coordinates of every row.
    """
    if indices is None:
        if spans is None or rng is None:
            raise ValueError("need indices, or spans and an rng")
        indices = draw_samples(sup, spans, rng)
    if max(sup.layers) >= len(taps):
        raise ValueError("taps do not cover all supervised layers")
    coords = np.asarray(coords)
    total = None
    for weight, layer, idx in zip(sup.alpha, sup.layers, indices):
        if weight == 0:
            continue
        term = geo_loss_layer(T.gather(taps[layer], idx), coords[idx], params, layer) * weight
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=taps[0].dtype))
    return total
