"""Point clouds, synthetic labeled scenes, sampling and multi-region augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("plane", "box", "sphere", "cylinder")

CANDIDATE_RATIO = 0.60
RATIO_TOLERANCE = 0.02
TIE_RTOL, TIE_ATOL = 1e-9, 1e-15
GLOBAL_RATIO = (0.40, 0.80)
LOCAL_RATIO = (0.10, 0.30)


@dataclass
class PointCloud:
    coords: np.ndarray
    labels: np.ndarray | None = None
    scene_id: str = ""

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be N x 3, got {self.coords.shape}")
        if len(self.coords) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.coords),):
                raise ValueError("labels length must equal point count")

    def __len__(self) -> int:
        return len(self.coords)

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index, dtype=np.int64)
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.coords[index], labels, self.scene_id)


@dataclass
class SceneObject:
    label: int
    shape: str
    center: np.ndarray
    size: np.ndarray
    yaw: float


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 6
    objects_per_scene: int = 4
    points_per_object: int = 600
    noise_sigma: float = 0.005
    extent: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.objects_per_scene < 1 or self.points_per_object < 1:
            raise ValueError("class, object and point counts must be positive")
        if self.noise_sigma < 0 or self.extent <= 0:
            raise ValueError("noise_sigma must be >= 0 and extent > 0")


def class_shape(label: int) -> tuple[str, np.ndarray]:
    """Primitive and nominal size for a class; classes past the fourth reuse
    primitives with a different aspect so every class stays geometrically distinct."""
    shape = SHAPES[label % len(SHAPES)]
    tier = label // len(SHAPES)
    base = {
        "plane": np.array([1.6, 1.2, 0.0]),
        "box": np.array([0.6, 0.6, 0.6]),
        "sphere": np.array([0.45, 0.45, 0.45]),
        "cylinder": np.array([0.25, 0.25, 1.2]),
    }[shape]
    if tier:
        stretch = np.array([1.0 + 0.8 * tier, 1.0 / (1.0 + 0.5 * tier), 1.0 + 0.6 * tier])
        if shape == "sphere":
            stretch = np.full(3, 0.55)
        base = base * stretch
    return shape, base


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _surface_points(obj: SceneObject, count: int, rng: np.random.Generator) -> np.ndarray:
    sx, sy, sz = obj.size
    if obj.shape == "plane":
        local = np.column_stack([rng.uniform(-sx / 2, sx / 2, count),
                                 rng.uniform(-sy / 2, sy / 2, count),
                                 np.zeros(count)])
    elif obj.shape == "box":
        areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
        face = rng.choice(6, size=count, p=areas / areas.sum())
        u = rng.uniform(-0.5, 0.5, size=(count, 3)) * obj.size
        axis = face // 2
        sign = np.where(face % 2 == 0, -0.5, 0.5)
        u[np.arange(count), axis] = sign * obj.size[axis]
        local = u
    elif obj.shape == "sphere":
        d = rng.normal(size=(count, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        local = d * sx
    else:
        theta = rng.uniform(0, 2 * math.pi, count)
        local = np.column_stack([sx * np.cos(theta), sy * np.sin(theta),
                                 rng.uniform(-sz / 2, sz / 2, count)])
    return local @ _rot_z(obj.yaw).T + obj.center


def _scene_labels(spec: SceneSpec, count: int) -> list[list[int]]:
    k, per = spec.num_classes, spec.objects_per_scene
    return [[(s * per + j) % k for j in range(per)] for s in range(count)]


def generate_scene(spec: SceneSpec, labels: list[int], rng: np.random.Generator,
                   scene_id: str = "") -> tuple[PointCloud, list[SceneObject]]:
    objects, coords, point_labels = [], [], []
    for label in labels:
        shape, size = class_shape(label)
        size = size * rng.uniform(0.85, 1.15)
        xy = rng.uniform(-spec.extent / 2, spec.extent / 2, 2)
        if shape == "plane":
            z = rng.uniform(0.0, 0.8)
        elif shape == "sphere":
            z = size[0] + rng.uniform(0.0, 0.5)
        else:
            z = size[2] / 2
        obj = SceneObject(label, shape, np.array([xy[0], xy[1], z]), size, rng.uniform(0, 2 * math.pi))
        pts = _surface_points(obj, spec.points_per_object, rng)
        if spec.noise_sigma > 0:
            pts = pts + rng.normal(scale=spec.noise_sigma, size=pts.shape)
        objects.append(obj)
        coords.append(pts)
        point_labels.append(np.full(spec.points_per_object, label))
    return PointCloud(np.vstack(coords), np.concatenate(point_labels), scene_id), objects


def generate_corpus(spec: SceneSpec, count: int) -> list[PointCloud]:
    """``count`` labeled scenes; every class occurs in at least two scenes."""
    if count < 2:
        raise ValueError("a corpus needs at least two scenes")
    assignment = _scene_labels(spec, count)
    for c in range(spec.num_classes):
        if sum(c in labels for labels in assignment) < 2:
            raise ValueError(f"class {c} cannot appear in two scenes with "
                             f"{count} scenes of {spec.objects_per_scene} objects")
    scenes = []
    for s, labels in enumerate(assignment):
        rng = np.random.default_rng([spec.seed, s])
        rng.shuffle(labels)
        pc, _ = generate_scene(spec, labels, rng, scene_id=f"scene_{s:04d}")
        scenes.append(pc)
    return scenes


# ---------------------------------------------------------------- sampling


def fps_indices(coords: np.ndarray, k: int, seed_index: int = 0,
                initial: np.ndarray | None = None) -> np.ndarray:
    """Greedy max-min selection. Ties go to the lowest index.

    With ``initial`` the selection continues from those already chosen points
    (``seed_index`` is then unused) until ``k`` points are selected.
    """
    n = len(coords)
    if not 1 <= k <= n:
        raise ValueError(f"cannot select {k} of {n} points")
    if initial is None or len(initial) == 0:
        if not 0 <= seed_index < n:
            raise ValueError("seed_index out of range")
        chosen = [int(seed_index)]
    else:
        chosen = [int(i) for i in initial]
        if len(chosen) > k:
            raise ValueError("initial selection larger than k")
    dist = np.full(n, np.inf)
    for i in chosen:
        d = coords - coords[i]
        dist = np.minimum(dist, np.einsum("ij,ij->i", d, d))
    while len(chosen) < k:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        d = coords - coords[nxt]
        dist = np.minimum(dist, np.einsum("ij,ij->i", d, d))
    return np.asarray(chosen, dtype=np.int64)


def farthest_point_sample(pc: PointCloud, k: int, seed_index: int = 0) -> PointCloud:
    return pc.subset(fps_indices(pc.coords, k, seed_index))


def voxel_indices(coords: np.ndarray, cell_size: float) -> np.ndarray:
    """One point per occupied voxel: the point nearest its voxel's centroid.

    Ties go to the lowest index; the result is sorted ascending.
    """
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    keys = np.floor(coords / cell_size).astype(np.int64)
    keys -= keys.min(axis=0)
    dims = keys.max(axis=0) + 1
    if float(dims[0]) * float(dims[1]) * float(dims[2]) < 2.0**62:
        flat = (keys[:, 0] * dims[1] + keys[:, 1]) * dims[2] + keys[:, 2]
        _, inverse = np.unique(flat, return_inverse=True)
    else:
        _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    nvox = inverse.max() + 1
    counts = np.bincount(inverse, minlength=nvox).astype(np.float64)
    centroid = np.column_stack([np.bincount(inverse, coords[:, d], nvox) for d in range(3)]) / counts[:, None]
    diff = coords - centroid[inverse]
    dist = np.einsum("ij,ij->i", diff, diff)
    # distances equal up to rounding count as ties, which go to the lowest index
    nearest = np.full(nvox, np.inf)
    np.minimum.at(nearest, inverse, dist)
    tied = dist <= nearest[inverse] * (1.0 + TIE_RTOL) + TIE_ATOL
    pick = np.full(nvox, len(coords))
    np.minimum.at(pick, inverse[tied], np.flatnonzero(tied))
    return np.sort(pick)


def voxel_sample(pc: PointCloud, cell_size: float) -> PointCloud:
    return pc.subset(voxel_indices(pc.coords, cell_size))


def normalize_coords(coords: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale the farthest point to radius 1."""
    centered = coords - coords.mean(axis=0)
    radius = np.sqrt(np.einsum("ij,ij->i", centered, centered).max())
    return centered / radius if radius > 0 else centered


def ball_crop(coords: np.ndarray, anchor: int, count: int) -> np.ndarray:
    """Indices of the ``count`` points closest to ``anchor`` (ties by index)."""
    d = coords - coords[anchor]
    dist = np.einsum("ij,ij->i", d, d)
    if count >= len(dist):
        return np.arange(len(dist))
    kth = np.partition(dist, count - 1)[count - 1]
    inside = np.flatnonzero(dist < kth)
    boundary = np.flatnonzero(dist == kth)[: count - len(inside)]
    return np.sort(np.concatenate([inside, boundary]))


DESCRIPTORS_PER_SCALE = 6


def local_descriptors(coords: np.ndarray, ks) -> np.ndarray:
    """Per-point shape descriptors from the k nearest neighbors, one block per k.

    Each block holds linearity, planarity and scattering of the neighborhood
    covariance, its largest spread, |n_z| of the estimated normal and the
    distance to the k-th neighbor. Only points of the same cloud take part.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if n == 0 or not ks:
        return np.zeros((n, DESCRIPTORS_PER_SCALE * len(ks)))
    sq = np.einsum("ij,ij->i", coords, coords)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * coords @ coords.T, 0.0)
    order = np.argsort(dist, axis=1, kind="stable")
    rows = np.arange(n)
    blocks = []
    for k in ks:
        k = min(int(k), n)
        nb = coords[order[:, :k]]
        c = nb - nb.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", c, c) / k
        w, v = np.linalg.eigh(cov)
        w = np.maximum(w[:, ::-1], 0.0)
        l1 = w[:, 0] + 1e-12
        blocks.append(np.column_stack([
            (w[:, 0] - w[:, 1]) / l1,
            (w[:, 1] - w[:, 2]) / l1,
            w[:, 2] / l1,
            np.sqrt(w[:, 0]),
            np.abs(v[:, 2, 0]),
            np.sqrt(dist[rows, order[:, k - 1]]),
        ]))
    return np.hstack(blocks)


def voxel_fps_reduce(coords: np.ndarray, target: int, iters: int = 24) -> np.ndarray:
    """Reduce to exactly ``target`` points: voxel representatives at the finest
    cell size that keeps them within budget, topped up by farthest-point picks."""
    n = len(coords)
    if n < target:
        raise ValueError(f"{n} points cannot be reduced to {target}")
    if n == target:
        return np.arange(n)
    span = float(np.ptp(coords, axis=0).max()) or 1.0
    lo, hi = span * 1e-5, span * 2.0 + 1e-9
    best = voxel_indices(coords, hi)
    if len(best) > target:
        # even the coarsest grid straddles a cell boundary; plain FPS then
        best = best[:0]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        idx = voxel_indices(coords, mid)
        if len(idx) <= target:
            hi, best = mid, idx
            if len(idx) == target:
                break
        else:
            lo = mid
    if len(best) == target:
        return best
    return fps_indices(coords, target, initial=best)


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentedViews:
    candidate: PointCloud
    globals: list[PointCloud]
    locals: list[PointCloud]
    provenance: dict[str, np.ndarray] = field(default_factory=dict)
    crop_ratios: dict[str, float] = field(default_factory=dict)

    @property
    def views(self) -> list[PointCloud]:
        """Global views first, then local views."""
        return [*self.globals, *self.locals]


def augment(pc: PointCloud, n: int, m: int, target_points: int,
            rng: np.random.Generator) -> AugmentedViews:
    if n < 1 or m < 0:
        raise ValueError("need n >= 1 and m >= 0")
    N = len(pc)
    cand_size = int(round(CANDIDATE_RATIO * N))
    smallest = LOCAL_RATIO[0] if m > 0 else GLOBAL_RATIO[0]
    if N < target_points or round(smallest * cand_size) < target_points:
        raise ValueError(f"cloud of {N} points is too small for {target_points}-point views")

    cand_idx = ball_crop(pc.coords, int(rng.integers(N)), cand_size)
    cand_coords = normalize_coords(pc.coords[cand_idx])
    candidate = PointCloud(cand_coords, None if pc.labels is None else pc.labels[cand_idx], pc.scene_id)

    provenance = {"candidate": cand_idx}
    ratios = {"candidate": cand_size / N}
    views: dict[str, list[PointCloud]] = {"global": [], "local": []}
    for kind, count, (lo, hi) in (("global", n, GLOBAL_RATIO), ("local", m, LOCAL_RATIO)):
        for j in range(count):
            ratio = rng.uniform(lo, hi)
            size = max(target_points, int(round(ratio * cand_size)))
            crop = ball_crop(cand_coords, int(rng.integers(cand_size)), size)
            if kind == "global":
                keep = voxel_fps_reduce(cand_coords[crop], target_points)
            else:
                keep = fps_indices(cand_coords[crop], target_points, int(rng.integers(size)))
            local_idx = crop[keep]
            name = f"{kind}_{j}"
            provenance[name] = cand_idx[local_idx]
            ratios[name] = size / cand_size
            view = PointCloud(normalize_coords(cand_coords[local_idx]),
                              None if pc.labels is None else candidate.labels[local_idx], pc.scene_id)
            views[kind].append(view)
    return AugmentedViews(candidate, views["global"], views["local"], provenance, ratios)


def prepare_sample(pc: PointCloud, target_points: int, seed_index: int = 0) -> tuple[PointCloud, np.ndarray]:
    """Whole-scene input for finetuning and inference: FPS to ``target_points``, then normalize."""
    idx = fps_indices(pc.coords, min(target_points, len(pc)), seed_index)
    sub = pc.subset(idx)
    return PointCloud(normalize_coords(sub.coords), sub.labels, pc.scene_id), idx


# ---------------------------------------------------------------- file format

MAGIC = "PCSP1"


def write_pointcloud(pc: PointCloud, path, binary: bool | None = None) -> None:
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".pcspb"
    has_labels = pc.labels is not None
    header = f"{MAGIC} {len(pc)} {int(has_labels)}\n"
    if binary:
        fields = [("xyz", "<f4", (3,))] + ([("label", "<i4")] if has_labels else [])
        rec = np.zeros(len(pc), dtype=fields)
        rec["xyz"] = pc.coords
        if has_labels:
            rec["label"] = pc.labels
        path.write_bytes(header.encode("ascii") + rec.tobytes())
        return
    lines = [header.rstrip("\n")]
    for i, (x, y, z) in enumerate(pc.coords):
        row = f"{float(x)!r} {float(y)!r} {float(z)!r}"
        if has_labels:
            row += f" {int(pc.labels[i])}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n")


def read_pointcloud(path, binary: bool | None = None, scene_id: str | None = None) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing header line")
    parts = raw[:nl].decode("ascii").split()
    if len(parts) != 3 or parts[0] != MAGIC or parts[2] not in ("0", "1"):
        raise ValueError(f"{path}: bad header {raw[:nl]!r}")
    n, has_labels = int(parts[1]), parts[2] == "1"
    body = raw[nl + 1:]
    if binary is None:
        binary = path.suffix == ".pcspb"
    sid = path.stem if scene_id is None else scene_id
    if binary:
        fields = [("xyz", "<f4", (3,))] + ([("label", "<i4")] if has_labels else [])
        dt = np.dtype(fields)
        if len(body) != n * dt.itemsize:
            raise ValueError(f"{path}: expected {n * dt.itemsize} payload bytes, got {len(body)}")
        rec = np.frombuffer(body, dtype=dt)
        return PointCloud(rec["xyz"].astype(np.float64),
                          rec["label"].astype(np.int64) if has_labels else None, sid)
    rows = [line.split() for line in body.decode("ascii").splitlines() if line.strip()]
    width = 4 if has_labels else 3
    if len(rows) != n or any(len(r) != width for r in rows):
        raise ValueError(f"{path}: expected {n} rows of {width} fields")
    coords = np.array([[float(v) for v in r[:3]] for r in rows])
    labels = np.array([int(r[3]) for r in rows]) if has_labels else None
    return PointCloud(coords, labels, sid)
