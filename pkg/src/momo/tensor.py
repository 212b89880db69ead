"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every op produces a new :class:`Tensor` that remembers its inputs and a
backward rule.  Nodes carry a monotonically increasing sequence number, so
the recording order is a valid topological order of the graph; ``backward``
replays the reachable part of that record in reverse, visiting each op once.

Shapes must match exactly except for two cases: a trailing-axis bias
(``b.shape == a.shape[-b.ndim:]``) and 0-d scalars.
"""
from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32, "grad": True}
_counter = itertools.count()

DEBUG = bool(os.environ.get("MOMO_DEBUG"))


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    prev = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_counter)
        self.name = name

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_leaf(self) -> bool:
        return self._backward is None

    # operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_counter)
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError("non-finite output from finite inputs")
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Leaf gradients add onto whatever is already stored, so calling this for
    several losses before an optimizer step sums their gradients.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return

    # collect the reachable sub-record, replay it newest-first
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# shape rules

def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.ndim == 0:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < b.ndim:
        a, b = b, a
    _check_binary(a, b, "add")
    sb = b.shape
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    sb = b.shape
    return _make(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if a.ndim < b.ndim:
        a, b = b, a
    _check_binary(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape
    return _make(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, sb)))


def div(a: Tensor, b: Tensor) -> Tensor:
    """``a / b`` where ``b`` is a scalar or trailing-axis tensor."""
    _check_binary(a, b, "div")
    ad, bd, sb = a.data, b.data, b.shape
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, _reduce_to(-g * out / bd, sb)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
# rational erf fit, max abs error 1.5e-7 (Abramowitz & Stegun 7.1.26)
_ERF_P = 0.3275911
_ERF_A = (1.061405429, -1.453152027, 1.421413741, -0.284496736, 0.254829592)


def _erf32(z: np.ndarray) -> np.ndarray:
    """erf for float32 arrays as a handful of in-place numpy ufuncs.

    Within ~2e-7 of libm erf, i.e. float32 resolution, at roughly 4x the
    speed of scipy's double-precision routine.
    """
    f = z.dtype.type
    a = np.abs(z)
    t = np.multiply(a, f(_ERF_P))
    t += f(1.0)
    np.reciprocal(t, out=t)
    p = np.full_like(z, f(_ERF_A[0]))
    for c in _ERF_A[1:]:
        p *= t
        p += f(c)
    p *= t
    np.square(a, out=a)
    np.negative(a, out=a)
    np.exp(a, out=a)
    p *= a  # erfc(|z|)
    np.subtract(f(1.0), p, out=p)
    return np.copysign(p, z, out=p)


def _erf(z: np.ndarray) -> np.ndarray:
    return _erf32(z) if z.dtype == np.float32 else erf(z)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU, ``x * Phi(x)``."""
    xd = x.data
    f = xd.dtype.type
    cdf = _erf(xd * f(_SQRT1_2))
    cdf += f(1.0)
    cdf *= f(0.5)
    out = xd * cdf

    def bw(g):
        pdf = np.square(xd)
        pdf *= f(-0.5)
        np.exp(pdf, out=pdf)
        pdf *= xd
        pdf *= f(_INV_SQRT_2PI)
        pdf += cdf
        pdf *= g
        return (pdf,)

    return _make(out, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``.

    ``b`` is either 2-D (a weight shared over all leading axes of ``a``) or
    has exactly the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k = ad.shape[-1]
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, k).T @ g2
            return ga, gb

        return _make(out, (a, b), bw)
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")

    def bwb(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bwb)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: dimension mismatch {x.shape} @ {weight.shape}")
    xd, wd = x.data, weight.data
    k, n = wd.shape
    x2 = xd.reshape(-1, k)
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(xd.shape[:-1] + (n,))

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...] | None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis`` (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        sl = (slice(None),) * axis
        np.add.at(full, sl + (indices,), g)
        return (full,)

    return _make(np.take(x.data, indices, axis=axis), (x,), bw)


def take_along(x: Tensor, indices: np.ndarray, unique: bool = False) -> Tensor:
    """Per-row gather on axis 1: ``out[b, i] = x[b, indices[b, i]]``.

    ``unique=True`` promises no repeated index within a row (faster backward).
    """
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 2 or indices.shape[0] != x.shape[0]:
        raise ValueError(f"take_along: index shape {indices.shape} vs tensor {x.shape}")
    rows = np.arange(x.shape[0])[:, None]
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if unique:
            full[rows, indices] = g
        else:
            np.add.at(full, (rows, indices), g)
        return (full,)

    return _make(x.data[rows, indices], (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup; the gradient lands only on the rows that were used."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.squeeze(s, axis=axis) for s in np.split(g, n, axis=axis)))


def broadcast_rows(v: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Repeat a vector/array over new leading axes ``lead``."""
    shape = v.shape
    out = np.broadcast_to(v.data, lead + shape).copy()
    return _make(out, (v,), lambda g: (g.reshape((-1,) + shape).sum(axis=0),))


# ---------------------------------------------------------------------------
# reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# neural-net primitives

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return (gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0))

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = xd / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (x,), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]`` for logits (n, V)."""
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ValueError(f"cross_entropy: logits {logits.shape} vs {targets.shape[0]} targets")
    n, v = logits.shape
    if n and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target outside [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = np.asarray(-logp[rows, targets].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _make(out, (logits,), bw)


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return _make(out, (pred, target), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def bce_with_logits(logits: Tensor, labels, weights=None) -> Tensor:
    """Weighted binary cross-entropy: ``sum_i w_i * bce_i / sum_i w_i``."""
    y = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=logits.dtype).reshape(logits.shape)
    w = w / w.sum()
    x = logits.data
    # log(1 + exp(-|x|)) formulation stays finite for large |x|
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray((w * per).sum(), dtype=logits.dtype)

    def bw(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return (g * w * (sig - y),)

    return _make(out, (logits,), bw)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))
