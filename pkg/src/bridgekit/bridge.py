"""Bridge layers: combine the previous cross-modal state with a uni-modal layer representation.

Tags follow the nine combiners compared in the design study::

    a  x + y                       f  W2 GeLU(W1 [x; y])
    b  x * y                       g  MCA(x, y)
    c  alpha x + (1 - alpha) y     h  FFN(MCA(x, y))
    d  same, alpha = sigmoid(W[x; y])
    e  W [x; y]                    i  x + y + W*[x; y],  W* = 0 at init

Every bridge output passes through a LayerNorm.  Cross-modal layer 1 has no
previous state, so its bridge is the LayerNorm alone; combiners exist for
layers 2..L_Z only.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, full_param

BRIDGE_TAGS = "abcdefghi"
BRIDGE_NAMES = {
    "a": "add",
    "b": "mul",
    "c": "learned-interp",
    "d": "gated-interp",
    "e": "linear-concat",
    "f": "mlp-concat",
    "g": "mca",
    "h": "ffn-mca",
    "i": "residual-zero",
}


def check_tag(tag: str) -> str:
    if tag not in BRIDGE_NAMES:
        raise ValueError(f"unknown bridge variant {tag!r}; valid tags are {', '.join(BRIDGE_TAGS)}")
    return tag


def bridge_heads(width: int) -> int:
    return max(1, width // 64)


def layer_index_map(layer: int, num_uni_layers: int, num_cross_layers: int) -> int:
    """Uni-modal layer feeding cross-modal layer ``layer`` (1-based): the top ``num_cross_layers`` in order."""
    if not 1 <= layer <= num_cross_layers <= num_uni_layers:
        raise ValueError(
            f"need 1 <= layer ({layer}) <= cross layers ({num_cross_layers}) <= uni-modal layers ({num_uni_layers})"
        )
    return num_uni_layers - num_cross_layers + layer


class Combiner(Module):
    """The variant-specific part of a bridge layer (everything but the trailing LayerNorm)."""

    def __init__(self, tag: str, width: int, rng: np.random.Generator, heads: int | None = None, dropout: float = 0.0):
        self.tag = check_tag(tag)
        d = width
        if tag == "c":
            self.alpha = full_param((d,), 0.5)
        elif tag == "d":
            self.gate = Linear(2 * d, d, rng)
        elif tag == "e":
            self.proj = Linear(2 * d, d, rng)
        elif tag == "f":
            self.fc1 = Linear(2 * d, 2 * d, rng)
            self.fc2 = Linear(2 * d, d, rng)
        elif tag in "gh":
            self.attn = MultiHeadAttention(d, heads or bridge_heads(d), rng, dropout)
            if tag == "h":
                self.ffn = FeedForward(d, rng)
        elif tag == "i":
            self.proj = Linear(2 * d, d, rng, zero=True)

    def __call__(self, x: Tensor, y: Tensor, mask=None, rng=None) -> Tensor:
        if x.shape != y.shape:
            raise ValueError(f"bridge inputs differ in shape: x {x.shape}, y {y.shape}")
        tag = self.tag
        if tag == "a":
            return x + y
        if tag == "b":
            return x * y
        if tag == "c":
            return self.alpha * x + (1.0 - self.alpha) * y
        if tag == "g":
            return self.attn(x, y, key_mask=mask, rng=rng)
        if tag == "h":
            return self.ffn(self.attn(x, y, key_mask=mask, rng=rng))
        xy = ag.concat([x, y], axis=-1)
        if tag == "d":
            alpha = ag.sigmoid(self.gate(xy))
            return alpha * x + (1.0 - alpha) * y
        if tag == "e":
            return self.proj(xy)
        if tag == "f":
            return self.fc2(ag.gelu(self.fc1(xy)))
        return x + y + self.proj(xy)


class BridgeLayer(Module):
    """LayerNorm(y) for the first cross-modal layer, LayerNorm(combine(x, y)) afterwards."""

    def __init__(self, tag: str, width: int, first: bool, rng: np.random.Generator, heads: int | None = None):
        self.first = first
        self.combiner = None if first else Combiner(tag, width, rng, heads)
        self.norm = LayerNorm(width)

    def __call__(self, x: Tensor | None, y: Tensor, mask=None, rng=None) -> Tensor:
        if self.first:
            if x is not None:
                raise ValueError("the first bridge layer takes no previous cross-modal state")
            return self.norm(y)
        if x is None:
            raise ValueError("bridge layers after the first need the previous cross-modal state")
        return self.norm(self.combiner(x, y, mask, rng))


def bridge_forward(variant: str, layer: int, x, y, params: BridgeLayer | None = None, rng=None, mask=None) -> Tensor:
    """Functional form; builds a fresh bridge layer when ``params`` is not given."""
    if params is None:
        params = BridgeLayer(variant, y.shape[-1], layer == 1, rng or np.random.default_rng(0))
    if layer == 1 and x is not None:
        raise ValueError("cross-modal layer 1 has no previous state; pass x=None")
    return params(x, y, mask)


def combiner_param_count(tag: str, width: int, heads: int | None = None) -> int:
    d = width
    lin = lambda i, o: i * o + o  # noqa: E731
    return {
        "a": 0,
        "b": 0,
        "c": d,
        "d": lin(2 * d, d),
        "e": lin(2 * d, d),
        "f": lin(2 * d, 2 * d) + lin(2 * d, d),
        "g": 4 * lin(d, d),
        "h": 4 * lin(d, d) + lin(d, 4 * d) + lin(4 * d, d),
        "i": lin(2 * d, d),
    }[check_tag(tag)]


def bridge_param_count(tag: str, width: int, num_layers: int) -> int:
    """Closed-form count: 2 L_Z LayerNorms plus 2 (L_Z - 1) combiners, biases included."""
    if width <= 0 or num_layers <= 0:
        raise ValueError("width and number of layers must be positive")
    return 2 * num_layers * 2 * width + 2 * (num_layers - 1) * combiner_param_count(tag, width)
