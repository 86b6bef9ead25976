"""Point feature extractor with a cross-sample state-space stage.

Pipeline per forward: per-point inputs (xyz plus local shape descriptors of
the point's own cloud) -> linear embed -> residual MLP -> state-space stage ->
residual MLP -> projection. Features are tapped after each of the three
stages. With CSP on, the state-space stage runs over the whole batch
serialized into one token stream; with CSP off each sample is scanned alone
from a zero state, so no information crosses sample boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .numerics import tensor as T
from .numerics.tensor import Tensor
from .pointcloud import DESCRIPTORS_PER_SCALE, local_descriptors

NUM_STAGES = 3


@dataclass
class FeatureSequence:
    values: Tensor
    sample_id: int = 0
    point_index: np.ndarray | None = None


@dataclass
class SerializedBatch:
    tokens: Tensor
    permutation: np.ndarray
    boundaries: list[tuple[int, int]]


@dataclass
class SsmBlock:
    A: Tensor
    B: Tensor
    C: Tensor
    gate: Tensor | None = None
    gate_w: Tensor | None = None
    gate_b: Tensor | None = None
    nonlinearity: str = "gated_tanh"

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @classmethod
    def from_params(cls, params, cfg: ModelConfig, prefix: str = "ssm.") -> "SsmBlock":
        if cfg.ssm_variant == "static":
            return cls(params[prefix + "A"], params[prefix + "B"], params[prefix + "C"],
                       gate=params[prefix + "gate"], nonlinearity=cfg.nonlinearity)
        return cls(params[prefix + "A"], params[prefix + "B"], params[prefix + "C"],
                   gate_w=params[prefix + "gate_w"], gate_b=params[prefix + "gate_b"],
                   nonlinearity=cfg.nonlinearity)


@dataclass
class BackboneOutput:
    """Stacked outputs for a batch; rows of sample ``i`` live in ``spans[i]``."""

    taps: list[Tensor]
    final: Tensor
    spans: list[tuple[int, int]]

    def sample_final(self, i: int) -> Tensor:
        lo, hi = self.spans[i]
        return self.final[lo:hi]

    def sample_tap(self, layer: int, i: int) -> Tensor:
        lo, hi = self.spans[i]
        return self.taps[layer][lo:hi]


# ---------------------------------------------------------------- parameters


def _dtype(cfg: ModelConfig):
    return np.float32 if cfg.dtype == "float32" else np.float64


def _linear(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def _mlp_block(rng, prefix: str, c: int) -> dict[str, np.ndarray]:
    return {
        prefix + "ln.g": np.ones(c),
        prefix + "ln.b": np.zeros(c),
        prefix + "w1": _linear(rng, c, 2 * c),
        prefix + "b1": np.zeros(2 * c),
        prefix + "w2": _linear(rng, 2 * c, c) * 0.5,
        prefix + "b2": np.zeros(c),
    }


def input_width(cfg: ModelConfig) -> int:
    return cfg.c_in + DESCRIPTORS_PER_SCALE * len(cfg.local_k)


@lru_cache(maxsize=512)
def _cached_descriptors(raw: bytes, n: int, ks: tuple[int, ...]) -> np.ndarray:
    out = local_descriptors(np.frombuffer(raw, dtype=np.float64).reshape(n, 3), ks)
    out.flags.writeable = False
    return out


def point_inputs(coords: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """xyz followed by the local shape descriptors of one cloud."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if not cfg.local_k:
        return coords
    desc = _cached_descriptors(coords.tobytes(), len(coords), tuple(cfg.local_k))
    return np.hstack([coords, desc])


def init_backbone(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    c, h = cfg.channels, cfg.state_dim
    p: dict[str, np.ndarray] = {
        "embed.w": _linear(rng, input_width(cfg), c),
        "embed.b": np.zeros(c),
    }
    p.update(_mlp_block(rng, "mlp1.", c))
    q, _ = np.linalg.qr(rng.normal(size=(h, h)))
    p.update({
        "ssm.ln.g": np.ones(c),
        "ssm.ln.b": np.zeros(c),
        "ssm.A": 0.5 * q,
        "ssm.B": rng.normal(scale=1.0 / np.sqrt(c), size=(h, c)),
        "ssm.C": rng.normal(scale=0.5 / np.sqrt(h), size=(c, h)),
    })
    if cfg.ssm_variant == "static":
        p["ssm.gate"] = np.zeros(h)
    else:
        p["ssm.gate_w"] = _linear(rng, c, h) * 0.1
        p["ssm.gate_b"] = np.zeros(h)
    p.update(_mlp_block(rng, "mlp2.", c))
    p["proj.w"] = _linear(rng, c, cfg.feat_dim)
    p["proj.b"] = np.zeros(cfg.feat_dim)
    dt = _dtype(cfg)
    return {k: v.astype(dt) for k, v in p.items()}


# ---------------------------------------------------------------- serialization


def serialize(batch: Sequence[FeatureSequence | Tensor], shuffle_seed: int | None = None) -> SerializedBatch:
    """Concatenate in batch order, then apply a seeded permutation over all tokens.

    ``shuffle_seed=None`` keeps the literal concatenation order.
    """
    if not batch:
        raise ValueError("cannot serialize an empty batch")
    seqs = [b.values if isinstance(b, FeatureSequence) else b for b in batch]
    width = seqs[0].shape[1]
    if any(s.shape[1] != width for s in seqs):
        raise ValueError("all sequences must share the channel width")
    bounds, start = [], 0
    for s in seqs:
        bounds.append((start, start + s.shape[0]))
        start += s.shape[0]
    stacked = seqs[0] if len(seqs) == 1 else T.concat(seqs, axis=0)
    if shuffle_seed is None:
        perm = np.arange(start)
        return SerializedBatch(stacked, perm, bounds)
    perm = np.random.default_rng(shuffle_seed).permutation(start)
    return SerializedBatch(T.gather(stacked, perm), perm, bounds)


def deserialize_stacked(tokens: Tensor, sb: SerializedBatch) -> Tensor:
    """Undo the permutation; rows come back in concatenation order."""
    if np.array_equal(sb.permutation, np.arange(len(sb.permutation))):
        return tokens
    inv = np.empty_like(sb.permutation)
    inv[sb.permutation] = np.arange(len(sb.permutation))
    return T.gather(tokens, inv)


def deserialize(tokens: Tensor, sb: SerializedBatch) -> list[Tensor]:
    flat = deserialize_stacked(tokens, sb)
    return [flat[lo:hi] for lo, hi in sb.boundaries]


# ---------------------------------------------------------------- state-space scan


def ssm_scan(tokens: Tensor, block: SsmBlock, h0: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Run the recurrence over the token axis. Returns outputs (T, C) and the final state.

    Input projections and (for the gated variant) gate logits are computed for
    the whole stream in one matmul; only the state update is sequential.
    """
    if tokens.shape[1] != block.B.shape[1]:
        raise ValueError(f"token width {tokens.shape[1]} != input projection width {block.B.shape[1]}")
    if h0 is not None and np.shape(h0) != (block.state_dim,):
        raise ValueError(f"h0 width {np.shape(h0)} != state width {block.state_dim}")
    x_proj = tokens @ T.transpose(block.B)
    if block.gate is not None:
        gate = block.gate
    elif block.gate_w is not None:
        gate = tokens @ block.gate_w + block.gate_b
    else:
        gate = Tensor(np.zeros(block.state_dim, dtype=tokens.dtype))
    states = T.scan(x_proj, block.A, gate, h0, block.nonlinearity)
    y = states @ T.transpose(block.C)
    return y, states.data[-1].copy()


# ---------------------------------------------------------------- forward


def _residual_mlp(x: Tensor, p, prefix: str) -> Tensor:
    u = T.layer_norm(x, p[prefix + "ln.g"], p[prefix + "ln.b"])
    hidden = T.silu(u @ p[prefix + "w1"] + p[prefix + "b1"])
    return x + (hidden @ p[prefix + "w2"] + p[prefix + "b2"])


def forward(params, inputs: Sequence[np.ndarray], cfg: ModelConfig, csp_enabled: bool = True,
            shuffle_seed: int | None = None) -> BackboneOutput:
    """Run the backbone on a batch of (L_i, 3) coordinate arrays.

    ``params`` maps names to Tensors (tracked or not). ``shuffle_seed`` is
    only used on the CSP path and only when ``cfg.shuffle`` is set.
    """
    if len(inputs) == 0:
        raise ValueError("empty batch")
    dt = _dtype(cfg)
    spans, start = [], 0
    for x in inputs:
        spans.append((start, start + len(x)))
        start += len(x)
    feats = [point_inputs(np.asarray(x, dtype=np.float64), cfg).astype(dt) for x in inputs]
    x = Tensor(np.concatenate(feats, axis=0)) @ params["embed.w"] + params["embed.b"]
    x = _residual_mlp(x, params, "mlp1.")
    taps = [x]

    block = SsmBlock.from_params(params, cfg)
    u = T.layer_norm(x, params["ssm.ln.g"], params["ssm.ln.b"])
    if csp_enabled:
        seqs = [u[lo:hi] for lo, hi in spans] if len(spans) > 1 else [u]
        sb = serialize(seqs, shuffle_seed if cfg.shuffle else None)
        y, _ = ssm_scan(sb.tokens, block)
        y = deserialize_stacked(y, sb)
    else:
        parts = [ssm_scan(u[lo:hi], block)[0] for lo, hi in spans]
        y = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    x = x + y
    taps.append(x)

    x = _residual_mlp(x, params, "mlp2.")
    taps.append(x)
    final = x @ params["proj.w"] + params["proj.b"]
    return BackboneOutput(taps, final, spans)
