"""Single-file checkpoints: magic, manifest length, JSON manifest, raw little-endian float64 arrays."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PCSPCKPT1\n"


class IncompatibleCheckpoint(ValueError):
    pass


@dataclass
class Checkpoint:
    groups: dict[str, dict[str, np.ndarray]]
    config_hash: str = ""
    arch_hash: str = ""
    kind: str = "pretrain"
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def student(self) -> dict[str, np.ndarray]:
        return self.groups["student"]

    @property
    def teacher(self) -> dict[str, np.ndarray]:
        return self.groups.get("teacher", {})


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = {}, [], 0
    for group in sorted(ckpt.groups):
        rows = []
        for name in sorted(ckpt.groups[group]):
            arr = np.ascontiguousarray(ckpt.groups[group][name], dtype="<f8")
            rows.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        entries[group] = rows
    manifest = {
        "format": 1,
        "kind": ckpt.kind,
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "arch_hash": ckpt.arch_hash,
        "meta": ckpt.meta,
        "groups": entries,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def from_bytes(raw: bytes) -> Checkpoint:
    if not raw.startswith(MAGIC):
        raise ValueError("not a checkpoint file")
    pos = len(MAGIC)
    (size,) = struct.unpack("<Q", raw[pos:pos + 8])
    manifest = json.loads(raw[pos + 8:pos + 8 + size])
    data = memoryview(raw)[pos + 8 + size:]
    groups = {}
    for group, rows in manifest["groups"].items():
        groups[group] = {
            r["name"]: np.frombuffer(data[r["offset"]:r["offset"] + r["nbytes"]], dtype="<f8")
            .reshape(r["shape"]).astype(np.float64)
            for r in rows
        }
    return Checkpoint(groups, manifest["config_hash"], manifest["arch_hash"], manifest["kind"],
                      manifest["step"], manifest.get("meta", {}))


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load(path, arch_hash: str | None = None) -> Checkpoint:
    ckpt = from_bytes(Path(path).read_bytes())
    if arch_hash is not None and ckpt.arch_hash != arch_hash:
        raise IncompatibleCheckpoint(
            f"{path}: architecture hash {ckpt.arch_hash[:12]} does not match config {arch_hash[:12]}")
    return ckpt


def cast(params: Mapping[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
