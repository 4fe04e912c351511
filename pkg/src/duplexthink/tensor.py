"""Dense-tensor algebra with reverse-mode automatic differentiation.

Everything downstream (encoder, decoder, expert, losses) is built from the
ops in this module. Tensors wrap row-major numpy arrays, float32 by default;
float64 is accepted so tests can run finite-difference checks at tight
tolerances. A computation graph is recorded only while gradients are enabled
and at least one input requires them, so inference builds no graph at all.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, (np.ndarray, np.generic)):
        arr = np.asarray(value)
        if dtype is not None:
            return arr.astype(dtype, copy=False)
        if arr.dtype in (np.float32, np.float64):
            return arr
        return arr.astype(DEFAULT_DTYPE)
    # python scalars and lists land on the default dtype so that mixing a
    # constant into a float32 graph never promotes it to float64
    return np.asarray(value, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    """A dense array plus an optional gradient accumulator.

    grad, when populated by backward(), always has the same shape and dtype
    as data.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_gborrow")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._gborrow = False

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def zero_grad(self) -> None:
        self.grad = None
        self._gborrow = False

    def backward(self) -> None:
        backward(self)


def _wrap(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable | None) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce grad back to shape after numpy broadcasting in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        if t._backward is None:
            # leaf (parameter): own the buffer, optimizers mutate it
            t.grad = np.array(g)
        else:
            # interior node: borrow; the first further accumulation replaces
            # the buffer instead of mutating it, so aliasing stays safe
            t.grad = g
            t._gborrow = True
    elif t._gborrow:
        t.grad = t.grad + g
        t._gborrow = False
    else:
        t.grad += g


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                ga = np.expand_dims(g, -1) * b.data  # (..., k)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.expand_dims(a.data, -1) * g
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), bwd)


# -- transcendental ----------------------------------------------------------


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)

    return _make(out, (a,), bwd)


def log(a) -> Tensor:
    a = _wrap(a)
    out = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU; the approximation and its gradient agree."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        # d = 0.5*(1+t) + 0.5*x*(1-t^2)*C*(1+3*0.044715*x^2), built in place
        d = t * t
        np.subtract(1.0, d, out=d)
        dinner = x2 * (3 * 0.044715 * _GELU_C)
        dinner += _GELU_C
        d *= dinner
        d *= x
        d += 1.0 + t
        d *= 0.5
        d *= g
        _accum(a, d)

    return _make(out.astype(x.dtype, copy=False), (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside [lo, hi]."""
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        inside = (a.data >= lo) & (a.data <= hi)
        _accum(a, g * inside)

    return _make(out, (a,), bwd)


# -- shape manipulation -------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out, (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make(out, (a,), bwd)


def getitem(a, key) -> Tensor:
    a = _wrap(a)
    out = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _accum(a, full)

    return _make(out, (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def bwd(g):
        start = 0
        for t, n in zip(ts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            _accum(t, g[tuple(sl)])
            start += n

    return _make(out, ts, bwd)


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    out = np.broadcast_to(a.data, shape).copy()

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _make(out, (a,), bwd)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        denom = a.data.size
    else:
        denom = a.data.shape[axis] if isinstance(axis, int) else int(np.prod([a.data.shape[i] for i in axis]))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / denom, a.data.shape).copy())

    return _make(out, (a,), bwd)


# -- fused neural ops ----------------------------------------------------------


def softmax(a, axis: int = -1, add_mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax along axis; rejects non-finite input.

    add_mask, when given, is a constant additive bias (e.g. -1e9 at banned
    attention positions) fused into the op to avoid a separate graph node.
    """
    a = _wrap(a)
    x = a.data
    if not np.isfinite(x).all():
        raise ValueError("softmax: input contains NaN or Inf")
    if add_mask is not None:
        x = x + add_mask
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted, out=shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        d = g - dot
        d *= out
        _accum(a, d)

    return _make(out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    x = a.data
    if not np.isfinite(x).all():
        raise ValueError("log_softmax: input contains NaN or Inf")
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        _accum(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bwd)


def layer_norm(a, gain: "Tensor | None" = None, bias: "Tensor | None" = None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, with the affine
    transform fused in when gain/bias are supplied."""
    a = _wrap(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))
        if gain is not None:
            if gain.requires_grad:
                _accum(gain, (g * y).reshape(-1, g.shape[-1]).sum(axis=0))
            g = g * gain.data
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - y * gym))

    parents = tuple(t for t in (a, gain, bias) if t is not None)
    return _make(out.astype(x.dtype, copy=False), parents, bwd)


def rope(a, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position transform on the last axis, which is split in half.

    a: (..., T, dh); cos/sin: (T, dh//2) precomputed for the absolute
    positions of those T frames. Backward rotates by the negated angle.
    """
    a = _wrap(a)
    x = a.data
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bwd(g):
        g1, g2 = g[..., :half], g[..., half:]
        gx = np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1)
        _accum(a, gx)

    return _make(out.astype(x.dtype, copy=False), (a,), bwd)


def take_rows(table, ids) -> Tensor:
    """Row gather (embedding lookup): table (R, d), ids int array of any
    shape -> (ids.shape, d). Backward scatter-adds into the table rows."""
    table = _wrap(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"take_rows: id out of range [0, {table.data.shape[0]})")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _accum(table, gt)

    return _make(out, (table,), bwd)


def take_along_last(a, ids) -> Tensor:
    """Per-row class pick: a (..., V), ids (...) -> (...)."""
    a = _wrap(a)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[-1]):
        raise IndexError(f"take_along_last: index out of range [0, {a.data.shape[-1]})")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        _accum(a, full)

    return _make(out, (a,), bwd)


def stop_gradient(a) -> Tensor:
    """Pass the value through, block all derivative flow."""
    a = _wrap(a)
    return Tensor(a.data)


class GradGate:
    """Switchable pass-through: while .open is False, backward passes over a
    grad_gate edge contribute nothing upstream. Lets one forward graph serve
    several losses with different gradient routing (run backward once per
    loss, toggling the gate)."""

    __slots__ = ("open",)

    def __init__(self, open: bool = True):
        self.open = open


def grad_gate(a, gate: GradGate) -> Tensor:
    """Identity in the forward pass; backward consults gate.open at call time."""
    a = _wrap(a)

    def bwd(g):
        if gate.open:
            _accum(a, g)

    return _make(a.data, (a,), bwd)


# -- scalar library ops --------------------------------------------------------


def softmax_vec(v) -> np.ndarray:
    """Plain-array softmax for callers outside the graph."""
    return softmax(Tensor(np.asarray(v, dtype=np.float64))).data


def kl_divergence(p, q, eps: float = 1e-9) -> float:
    """KL(p || q) for probability vectors; q is floored at eps before the log
    and 0*log(0) terms contribute zero."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shape mismatch {p.shape} vs {q.shape}")
    q = np.maximum(q, eps)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


# -- reverse pass ---------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every tracked tensor.

    loss must be scalar. Grads add onto any existing .grad, so call
    zero_grad on parameters between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: expose the accumulated gradient
            _accum_leaf(node, g)
            continue
        # route through the op; parents collect via _accum into .grad when
        # they are leaves, or into the pending dict when interior
        _route(node, g, grads)
    # interior nodes with no backward left (shouldn't happen) are ignored


def _accum_leaf(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g.astype(node.data.dtype, copy=False)


def _route(node: Tensor, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
    # Temporarily swap _accum targets: interior parents accumulate into the
    # pending-grad dict, leaves into .grad. We reuse the op closures, which
    # call _accum(parent, grad); _accum writes into parent.grad. To keep the
    # closures simple we let every parent accumulate into .grad, then move
    # interior parents' grads into the pending dict.
    node._backward(g)
    for p in node._parents:
        if p._backward is not None and p.grad is not None:
            prev = grads.get(id(p))
            grads[id(p)] = p.grad if prev is None else prev + p.grad
            p.grad = None
