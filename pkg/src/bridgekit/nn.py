"""Parameterized blocks: linear maps, embeddings, attention, feed-forward, transformer layers."""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

MASK_VALUE = -1e9
INIT_STD = 0.02


class _InitState(threading.local):
    def __init__(self):
        self.meta = False
        self.dtype = np.float64


_init = _InitState()


@contextmanager
def meta_init():
    """Build modules with zero-cost placeholder parameters (for counting only)."""
    prev = _init.meta
    _init.meta = True
    try:
        yield
    finally:
        _init.meta = prev


@contextmanager
def default_dtype(dtype):
    prev = _init.dtype
    _init.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _init.dtype = prev


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)

    def __repr__(self):
        return f"Parameter(shape={self.shape})"


def _param(shape, fill: Callable[[tuple], np.ndarray]) -> Parameter:
    shape = tuple(int(s) for s in shape)
    if _init.meta:
        p = Parameter.__new__(Parameter)
        Tensor.__init__(p, np.broadcast_to(np.zeros((), dtype=_init.dtype), shape), requires_grad=True)
        return p
    return Parameter(np.asarray(fill(shape), dtype=_init.dtype))


def normal_param(shape, rng: np.random.Generator, std: float = INIT_STD) -> Parameter:
    return _param(shape, lambda s: rng.normal(0.0, std, size=s))


def zeros_param(shape) -> Parameter:
    return _param(shape, np.zeros)


def ones_param(shape) -> Parameter:
    return _param(shape, np.ones)


def full_param(shape, value: float) -> Parameter:
    return _param(shape, lambda s: np.full(s, value))


class Module:
    """Base class; parameters and submodules are discovered from attributes in assignment order."""

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(f"{prefix}{name}", value)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            for child in _children(value):
                yield from child.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)


def _walk(name, value):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(f"{name}.{key}", item)


def _children(value):
    if isinstance(value, Module):
        yield value
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _children(item)
    elif isinstance(value, dict):
        for item in value.values():
            yield from _children(item)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, zero: bool = False):
        if in_dim <= 0 or out_dim <= 0:
            raise ValueError(f"Linear dims must be positive, got {in_dim}x{out_dim}")
        self.weight = zeros_param((in_dim, out_dim)) if zero else normal_param((in_dim, out_dim), rng)
        self.bias = zeros_param((out_dim,))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"Linear expects last dim {self.weight.shape[0]}, got input {x.shape}")
        return x @ self.weight + self.bias


class Embedding(Module):
    def __init__(self, rows: int, dim: int, rng: np.random.Generator):
        self.weight = normal_param((rows, dim), rng)

    @property
    def rows(self) -> int:
        return self.weight.shape[0]

    def __call__(self, ids) -> Tensor:
        return ag.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = ones_param((dim,))
        self.bias = zeros_param((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias)


@dataclass
class AttentionRecord:
    """Attention weights of one block for a batch: ``weights`` is (batch, head, query, key)."""

    layer: int
    part: str
    kind: str
    weights: np.ndarray
    query_mask: np.ndarray
    key_mask: np.ndarray

    @property
    def num_heads(self) -> int:
        return self.weights.shape[1]


def _as_batch_mask(mask, batch: int, length: int) -> np.ndarray:
    if mask is None:
        return np.ones((batch, length), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (batch, length))
    if mask.shape != (batch, length):
        raise ValueError(f"mask shape {mask.shape} does not match (batch={batch}, len={length})")
    return mask


class MultiHeadAttention(Module):
    """Multi-head attention; self-attention when keys/values come from the query sequence."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, dropout: float = 0.0):
        if dim % num_heads:
            raise ValueError(f"width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.dropout = dropout
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.output = Linear(dim, dim, rng)

    def _split(self, t: Tensor, b: int, n: int) -> Tensor:
        h = self.num_heads
        return t.reshape(b, n, h, t.shape[-1] // h).transpose(0, 2, 1, 3)

    def __call__(
        self,
        x: Tensor,
        y: Tensor | None = None,
        key_mask=None,
        record: Callable[[np.ndarray, np.ndarray], None] | None = None,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        if y is None:
            y = x
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
            y = y.reshape(1, *y.shape)
        if x.ndim != 3 or y.ndim != 3 or x.shape[0] != y.shape[0] or x.shape[2] != y.shape[2]:
            raise ValueError(f"attention: incompatible query {x.shape} and key/value {y.shape}")
        b, nq, d = x.shape
        nk = y.shape[1]
        kmask = _as_batch_mask(key_mask, b, nk)
        if not kmask.any(axis=1).all():
            raise ValueError("attention: a sequence has every key masked; softmax is undefined")

        q = self._split(self.query(x), b, nq)
        k = self._split(self.key(y), b, nk)
        v = self._split(self.value(y), b, nk)
        dh = d // self.num_heads
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        additive = np.where(kmask, 0.0, MASK_VALUE).astype(scores.dtype)[:, None, None, :]
        weights = ag.softmax(scores + Tensor(additive), axis=-1)
        if record is not None:
            record(weights.data.copy(), kmask.copy())
        weights = ag.dropout(weights, self.dropout, rng, self.training)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, nq, d)
        out = self.output(ctx)
        if squeeze:
            out = out.reshape(nq, d)
        return out


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 4, hidden: int | None = None):
        hidden = hidden if hidden is not None else expansion * dim
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """MSA + FFN with residuals; ``norm`` is ``"pre"`` (ViT) or ``"post"`` (BERT)."""

    def __init__(
        self,
        dim: int,
        num_heads: int,
        rng: np.random.Generator,
        norm: str = "pre",
        expansion: int = 4,
        dropout: float = 0.0,
    ):
        if norm not in ("pre", "post"):
            raise ValueError(f"norm placement must be 'pre' or 'post', got {norm!r}")
        self.norm = norm
        self.dropout = dropout
        self.attn = MultiHeadAttention(dim, num_heads, rng, dropout)
        self.ln1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng, expansion)
        self.ln2 = LayerNorm(dim)

    def __call__(self, x: Tensor, mask=None, rng=None, record=None) -> Tensor:
        drop = lambda t: ag.dropout(t, self.dropout, rng, self.training)  # noqa: E731
        if self.norm == "pre":
            x = x + drop(self.attn(self.ln1(x), key_mask=mask, rng=rng, record=record))
            return x + drop(self.ffn(self.ln2(x)))
        x = self.ln1(x + drop(self.attn(x, key_mask=mask, rng=rng, record=record)))
        return self.ln2(x + drop(self.ffn(x)))


def zero_output_projections(module: Module) -> None:
    """Zero every attention/FFN output projection (turns residual blocks into identities)."""
    for m in module.modules():
        if isinstance(m, MultiHeadAttention):
            m.output.weight.data[...] = 0.0
            m.output.bias.data[...] = 0.0
        elif isinstance(m, FeedForward):
            m.fc2.weight.data[...] = 0.0
            m.fc2.bias.data[...] = 0.0
