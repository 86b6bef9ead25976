"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive records a node (inputs, saved intermediates, a backward
closure) when gradient tracking is on and at least one input requires a
gradient. ``grad`` walks the recorded nodes in reverse topological order and
accumulates cotangents additively at fan-out.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the enclosed block (thread-local)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _infer_dtype(data), copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor created with non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    __array_priority__ = 1000

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not a primitive")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _result(arr: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    arr = np.asarray(arr)
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor._wrap(arr)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ValueError("matmul needs at least 1-d operands")

    def backward(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if bd.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), backward, "matmul")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    sa = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, sa),), "broadcast")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(a.data, axes).copy(), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    sa = a.shape
    return _result(a.data.reshape(shape).copy(), (a,),
                   lambda g: (g.reshape(sa),), "reshape")


# ---------------------------------------------------------------- elementwise


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    a = as_tensor(a)
    x = a.data
    if floor is not None:
        live = x > floor
        xc = np.where(live, x, floor)
        return _result(np.log(xc), (a,), lambda g: (np.where(live, g / xc, 0.0),), "log")
    if np.any(x <= 0):
        raise NonFiniteError("log of non-positive value")
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(a, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``a / temperature``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a = as_tensor(a)
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((s * (g - (g * s).sum(axis=-1, keepdims=True))) / temperature,)

    return _result(s, (a,), backward, "softmax")


def silu(a) -> Tensor:
    return mul(a, sigmoid(a))


def square(a) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    sa = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, sa).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- indexing


def gather(a, index) -> Tensor:
    """Index along the leading axis (integer array, slice or int)."""
    a = as_tensor(a)
    sa, dt = a.shape, a.dtype
    if isinstance(index, Tensor):
        index = index.data
    if isinstance(index, np.ndarray) or isinstance(index, list):
        index = np.asarray(index, dtype=np.int64)

    def backward(g):
        out = np.zeros(sa, dtype=dt)
        if isinstance(index, np.ndarray):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _result(np.array(a.data[index]), (a,), backward, "gather")


def scatter_add(a, index, n_rows: int) -> Tensor:
    """Sum rows of ``a`` into an ``n_rows``-row output at ``index``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise ValueError("index length must match rows")
    out = np.zeros((n_rows,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, index, a.data)
    return _result(out, (a,), lambda g: (g[index],), "scatter")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


# ---------------------------------------------------------------- composite kernels


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def backward(g):
        dgamma = _unbroadcast(g * xhat, gd.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _result(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


NONLINEARITIES = ("gated_tanh", "tanh", "identity")


def scan(x_proj, A, gate, h0=None, nonlinearity: str = "gated_tanh") -> Tensor:
    """Left-to-right recurrence ``h_t = f(A h_{t-1} + x_t)`` over the leading axis.

    ``x_proj`` is (T, H) and already holds the projected inputs. ``gate``
    carries pre-sigmoid gate logits, either one (H,) vector shared by all
    steps or a (T, H) array of per-step logits; it is ignored unless
    ``nonlinearity`` is ``"gated_tanh"``. Returns every state, shape (T, H).
    """
    if nonlinearity not in NONLINEARITIES:
        raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
    x_proj, A, gate = as_tensor(x_proj), as_tensor(A), as_tensor(gate)
    X, Ad = x_proj.data, A.data
    T, H = X.shape
    if Ad.shape != (H, H):
        raise ValueError(f"state matrix shape {Ad.shape} does not match width {H}")
    h = np.zeros(H, dtype=X.dtype) if h0 is None else np.asarray(h0, dtype=X.dtype)
    if h.shape != (H,):
        raise ValueError(f"initial state width {h.shape} != {H}")
    gated = nonlinearity == "gated_tanh"
    if gated:
        if gate.shape not in ((H,), (T, H)):
            raise ValueError(f"gate shape {gate.shape} incompatible with ({T}, {H})")
        S = np.broadcast_to(_sigmoid_np(gate.data), (T, H))
    AT = Ad.T.copy()
    states = np.empty((T, H), dtype=X.dtype)
    acts = np.empty((T, H), dtype=X.dtype) if nonlinearity != "identity" else None
    h_init = h.copy()
    if nonlinearity == "identity":
        for t in range(T):
            h = h @ AT + X[t]
            states[t] = h
    elif nonlinearity == "tanh":
        for t in range(T):
            h = np.tanh(h @ AT + X[t])
            states[t] = h
        acts = states
    else:
        for t in range(T):
            a = np.tanh(h @ AT + X[t])
            acts[t] = a
            h = S[t] * a
            states[t] = h
    if not np.isfinite(states).all():
        raise NonFiniteError("non-finite recurrent state")

    def backward(g):
        if nonlinearity == "identity":
            K = None
        elif nonlinearity == "tanh":
            K = 1.0 - acts * acts
        else:
            K = S * (1.0 - acts * acts)
        dH = np.empty_like(g)
        carry = np.zeros(H, dtype=g.dtype)
        if K is None:
            for t in range(T - 1, -1, -1):
                dh = g[t] + carry
                dH[t] = dh
                carry = dh @ Ad
            dZ = dH
        else:
            for t in range(T - 1, -1, -1):
                dh = g[t] + carry
                dH[t] = dh
                carry = (dh * K[t]) @ Ad
            dZ = dH * K
        prev = np.vstack([h_init[None, :], states[:-1]])
        dA = dZ.T @ prev
        if gated:
            dgate = _unbroadcast(dH * acts * S * (1.0 - S), gate.shape)
        else:
            dgate = np.zeros(gate.shape, dtype=g.dtype)
        return dZ, dA, dgate

    return _result(states, (x_proj, A, gate), backward, "scan")


# ---------------------------------------------------------------- backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor]):
    """Gradients of a scalar ``output`` with respect to leaf tensors.

    Returns a dict when ``wrt`` is a mapping, else a list. Leaves that do not
    influence ``output`` receive zero gradients.
    """
    if output.size != 1:
        raise ValueError(f"gradient needs a scalar output, got shape {output.shape}")
    items = list(wrt.items()) if isinstance(wrt, Mapping) else list(enumerate(wrt))
    for key, leaf in items:
        if not isinstance(leaf, Tensor) or not leaf.requires_grad:
            raise ValueError(f"parameter {key!r} is detached (requires_grad is False)")
    grads: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
        for node in reversed(_topo_order(output)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=parent.dtype)
    out = {k: grads.get(id(leaf), np.zeros_like(leaf.data)) for k, leaf in items}
    if isinstance(wrt, Mapping):
        return out
    return [out[i] for i in range(len(items))]


def parameters(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap raw arrays as gradient-tracked leaves."""
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def constants(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in arrays.items()}


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
                   names: Iterable[str] | None = None):
    """Evaluate ``fn`` on tracked copies of ``params`` and differentiate it."""
    keep = None if names is None else set(names)
    tracked = {k: Tensor(v, requires_grad=keep is None or k in keep) for k, v in params.items()}
    out = fn(tracked)
    wrt = {k: t for k, t in tracked.items() if t.requires_grad}
    return out, grad(out, wrt)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Stable log-softmax built from primitives (the shift is a constant)."""
    a = as_tensor(a)
    shift = Tensor._wrap(np.array(a.data.max(axis=axis, keepdims=True)))
    z = sub(a, shift)
    return sub(z, log(sum_(exp(z), axis=axis, keepdims=True)))
