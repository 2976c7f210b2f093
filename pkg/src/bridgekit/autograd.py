"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a :class:`Node` to the thread's
current :class:`Tape`.  :func:`backward` walks the tape in exact reverse
recording order, so no separate topological sort is needed.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "GradCheckReport",
    "as_tensor",
    "backward",
    "binary_cross_entropy_with_logits",
    "concat",
    "cross_entropy",
    "current_tape",
    "dropout",
    "embedding",
    "gelu",
    "grad_check",
    "is_grad_enabled",
    "layer_norm",
    "matmul",
    "no_grad",
    "softmax",
]

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class Tape:
    """Ordered record of operations for one thread."""

    def __init__(self):
        self.records: list[Node] = []

    def record(self, node: "Node") -> None:
        node.index = len(self.records)
        node.tape = self
        self.records.append(node)

    def reset(self) -> None:
        for node in self.records:
            node.consumed = True
            node.tape = None
            node.inputs = ()
            node.output = None
            node.backward_fn = None
        self.records = []

    def __len__(self):
        return len(self.records)


class Node:
    __slots__ = ("inputs", "output", "backward_fn", "index", "tape", "consumed")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.index = -1
        self.tape = None
        self.consumed = False


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    # keep numpy from hijacking reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiu":
            arr = arr.astype(np.float64)
        if requires_grad and arr.dtype.kind != "f":
            raise TypeError("integer tensors cannot require gradients")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    # -- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, exponent):
        return power(self, exponent)

    # -- method forms ---------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(tuple(inputs), out, backward_fn)
        _state.tape.record(node)
        out._node = node
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float, np.number)):
        s = float(b)

        def bw_scalar(g):
            return (g * s,)

        return _make(a.data * s, (a,), bw_scalar)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b, "multiply")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad ** exponent

    def bw(g):
        return (g * exponent * ad ** (exponent - 1),)

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """GeLU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    # in-place arithmetic: this op is memory-bound and sits in every feed-forward block
    t = x * x
    t *= 0.044715 * _GELU_C
    t += _GELU_C
    t *= x
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        d = x * x
        d *= 3 * 0.044715 * _GELU_C
        d += _GELU_C
        s = t * t
        np.subtract(1.0, s, out=s)
        s *= x
        s *= d
        s += t
        s += 1.0
        s *= 0.5
        s *= g
        return (s,)

    return _make(out, (a,), bw)


# -- reductions and shape ops ----------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(sum_(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ValueError(f"broadcast: cannot broadcast {old} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, old),))


def _is_basic_index(index) -> bool:
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in index)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    shape, dtype = a.shape, a.dtype
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ValueError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=ax), tensors, bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one GEMM
        k, m = bd.shape
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, k)

        def bw2(g):
            g2 = g.reshape(-1, m)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make((a2 @ bd).reshape(*lead, m), (a, b), bw2)

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw)


# -- fused neural ops ------------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ValueError(f"softmax over empty axis {axis} of shape {a.shape}")
    out = _softmax_np(a.data, axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis; eps sits inside the square root."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match input {x.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"embedding id out of range [0, {rows}): min {ids.min()}, max {ids.max()}")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw)


IGNORE_INDEX = -100


def cross_entropy(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean cross-entropy over positions whose target is not ``ignore_index``."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n_cls = logits.shape[-1]
    flat = logits.data.reshape(-1, n_cls)
    tgt = targets.reshape(-1)
    valid = tgt != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: no supervised positions")
    if tgt[valid].min() < 0 or tgt[valid].max() >= n_cls:
        raise IndexError(f"cross_entropy: target outside [0, {n_cls})")
    logp = log_softmax_np(flat, -1)
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, tgt[rows]].sum() / count
    shape = logits.shape

    def bw(g):
        grad = np.exp(logp)
        grad[rows, tgt[rows]] -= 1.0
        grad[~valid] = 0.0
        return ((grad * (g / count)).reshape(shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean of elementwise BCE; every output unit is an independent class."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"bce: logits {logits.shape} vs targets {t.shape}")
    x = logits.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def bw(g):
        return ((_sigmoid_np(x) - t) * (g / n),)

    return _make(np.asarray(loss.mean(), dtype=logits.dtype), (logits,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# -- backward --------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it, then consume the tape.

    Leaf gradients accumulate across calls; zero them explicitly between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError(f"non-finite loss value {loss.data!r}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data)
    node = loss._node
    if node is None:
        _accumulate_leaf(loss, seed)
        return
    if node.consumed or node.tape is None:
        raise RuntimeError("backward called twice on the same graph; run the forward pass again")
    tape = node.tape
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for rec in reversed(tape.records[: node.index + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward_fn(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate_leaf(inp, gi)
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.reset()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


# -- verification harness -------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst_index: tuple | None = None
    message: str = ""


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    tol: float = 1e-4,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` at ``point`` with central differences.

    Non-scalar outputs are contracted with a fixed random cotangent.  The
    difference quotient divides by the step actually realized in floating
    point, so linear maps check exactly.  Per-element error is
    ``|a - n| / (max(|a|, |n|) + floor)``.

    ``point`` is perturbed in place and restored, so it may be a parameter
    that ``f`` reads through a closure.
    """
    base = point.data.copy()
    saved_flag, saved_grad = point.requires_grad, point.grad
    try:
        with no_grad():
            y0 = f(point).data.copy()
        if not np.all(np.isfinite(y0)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(y0))[0])
            return GradCheckReport(math.inf, tol, False, bad, f"non-finite output at {bad}")
        rng = np.random.default_rng(seed)
        cot = np.ones_like(y0) if y0.size == 1 else rng.standard_normal(y0.shape)

        point.requires_grad = True
        point.grad = None
        y = f(point)
        if not y.requires_grad:
            analytic = np.zeros_like(base)
        else:
            backward(sum_(mul(y, Tensor(cot.astype(y.dtype)))))
            analytic = point.grad if point.grad is not None else np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = point.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = flat[i]
                yp = f(point).data.copy()
                flat[i] = orig - step
                lo = flat[i]
                ym = f(point).data.copy()
                flat[i] = orig
                if not (np.all(np.isfinite(yp)) and np.all(np.isfinite(ym))):
                    idx = np.unravel_index(i, base.shape)
                    return GradCheckReport(math.inf, tol, False, idx, f"non-finite output perturbing {idx}")
                numeric.reshape(-1)[i] = (((yp - ym) / (hi - lo)) * cot).sum()
    finally:
        point.data[...] = base
        point.requires_grad, point.grad = saved_flag, saved_grad
    err = np.abs(analytic - numeric) / (np.maximum(np.abs(analytic), np.abs(numeric)) + floor)
    if err.size == 0:
        return GradCheckReport(0.0, tol, True)
    worst = np.unravel_index(int(np.argmax(err)), err.shape)
    max_err = float(err[worst])
    return GradCheckReport(max_err, tol, max_err < tol, tuple(int(i) for i in worst))
