"""Slow, obviously-correct reference implementations used only by tests."""

from __future__ import annotations

import math

import numpy as np

from pointcsp.numerics import tensor as T


def scan_unrolled(x_proj, A, gate, h0=None, nonlinearity="gated_tanh"):
    """Step-by-step recurrence built from tape primitives, one node per step."""
    x_proj, A, gate = T.as_tensor(x_proj), T.as_tensor(A), T.as_tensor(gate)
    steps, width = x_proj.shape
    h = T.Tensor(np.zeros(width) if h0 is None else h0)
    outs = []
    for t in range(steps):
        z = T.matmul(A, h) + x_proj[t]
        if nonlinearity == "identity":
            h = z
        elif nonlinearity == "tanh":
            h = T.tanh(z)
        else:
            g = gate if gate.ndim == 1 else gate[t]
            h = T.sigmoid(g) * T.tanh(z)
        outs.append(T.reshape(h, (1, width)))
    return T.concat(outs, axis=0)


def scan_numpy_loop(x, A, gate, h0=None):
    """Plain float loop for the gated-tanh recurrence."""
    steps, width = len(x), len(x[0])
    h = [0.0] * width if h0 is None else list(h0)
    out = []
    for t in range(steps):
        g = gate if np.ndim(gate) == 1 else gate[t]
        new = []
        for i in range(width):
            z = sum(A[i][j] * h[j] for j in range(width)) + x[t][i]
            new.append(1.0 / (1.0 + math.exp(-g[i])) * math.tanh(z))
        h = new
        out.append(h)
    return np.array(out)


def fps_bruteforce(coords, k, seed_index=0):
    """Max-min selection recomputing every candidate's distance to the chosen set."""
    chosen = [seed_index]
    n = len(coords)
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i in range(n):
            d = min(sum((coords[i][a] - coords[j][a]) ** 2 for a in range(3)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def voxel_bruteforce(coords, cell):
    """Dict keyed by integer voxel; representative nearest the voxel centroid,
    lowest index among distances equal to 1e-9 relative."""
    groups: dict[tuple, list[int]] = {}
    for i, p in enumerate(coords):
        key = tuple(int(math.floor(v / cell)) for v in p)
        groups.setdefault(key, []).append(i)
    reps = []
    for members in groups.values():
        c = [sum(coords[i][a] for i in members) / len(members) for a in range(3)]
        d = {i: sum((coords[i][a] - c[a]) ** 2 for a in range(3)) for i in members}
        nearest = min(d.values())
        reps.append(min(i for i in members if d[i] <= nearest * (1 + 1e-9) + 1e-15))
    return sorted(reps)


def occupied_voxels(coords, cell):
    return len({tuple(np.floor(p / cell).astype(int)) for p in coords})


def csc_double_loop(teacher, student, exclude_same_view=False):
    n, total = len(teacher), len(student)
    acc, count = 0.0, 0
    for i in range(n):
        for j in range(total):
            if exclude_same_view and i == j:
                continue
            acc += sum(teacher[i][k] * math.log(max(student[j][k], 1e-12)) for k in range(len(teacher[i])))
            count += 1
    return -acc / count


def mse_loop(a, b):
    return sum(sum((a[i][c] - b[i][c]) ** 2 for c in range(len(a[i]))) for i in range(len(a))) / len(a)


def decoder_loop(features, w1, b1, w2, b2):
    out = []
    for f in features:
        hidden = []
        for j in range(len(b1)):
            z = sum(f[i] * w1[i][j] for i in range(len(f))) + b1[j]
            hidden.append(z / (1.0 + math.exp(-z)))
        out.append([sum(hidden[j] * w2[j][k] for j in range(len(hidden))) + b2[k] for k in range(3)])
    return out


def adamw_scalar(theta, grads_fn, steps, lr, wd=0.0, b1=0.9, b2=0.999, eps=1e-8):
    """Per-coordinate scalar AdamW; returns the list of iterates including the start."""
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    path = [list(theta)]
    for t in range(1, steps + 1):
        g = grads_fn(theta)
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            theta[i] = theta[i] * (1 - lr * wd) - lr * mhat / (math.sqrt(vhat) + eps)
        path.append(list(theta))
    return path
