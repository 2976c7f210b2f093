"""Co-attention cross-modal encoder and its fusion modes.

Modes:

* ``bridge``: every layer is internal; layer l reads uni-modal layer
  ``k(l) = L_uni - L_Z + l`` through a bridge layer.
* ``external``: layer 0 state is the projected top uni-modal layer; layers
  only see their predecessor.
* ``mixed``: ``n_internal`` bridged layers over the top ``n_internal``
  uni-modal layers, then ``n_external`` plain layers.
* ``weighted_sum``: layer 0 state is a softmax-weighted sum of all projected
  uni-modal layers; then plain layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .bridge import BridgeLayer, check_tag, layer_index_map
from .nn import AttentionRecord, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, normal_param, zeros_param

FUSION_MODES = ("bridge", "external", "mixed", "weighted_sum")
PARTS = ("visual", "textual")


@dataclass
class CrossModalConfig:
    depth: int = 2
    width: int = 64
    heads: int = 4
    fusion_mode: str = "bridge"
    bridge: str = "a"
    n_internal: int | None = None
    n_external: int | None = None
    expansion: int = 4
    norm: str = "post"
    dropout: float = 0.0
    bridge_heads: int | None = None

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        check_tag(self.bridge)
        if self.depth < 1:
            raise ValueError("cross-modal depth must be >= 1")
        if self.width % self.heads:
            raise ValueError(f"cross-modal width {self.width} not divisible by {self.heads} heads")
        if self.fusion_mode == "bridge":
            internal = self.depth
        elif self.fusion_mode in ("external", "weighted_sum"):
            internal = 0
        else:
            if self.n_internal is None and self.n_external is None:
                raise ValueError("mixed mode needs n_internal or n_external")
            internal = self.n_internal if self.n_internal is not None else self.depth - self.n_external
        external = self.depth - internal
        if self.n_internal is not None and self.n_internal != internal:
            raise ValueError(f"n_internal={self.n_internal} inconsistent with fusion_mode={self.fusion_mode}")
        if self.n_external is not None and self.n_external != external:
            raise ValueError(
                f"n_internal + n_external must equal depth {self.depth} (got {internal} + {self.n_external})"
            )
        if not 0 <= internal <= self.depth:
            raise ValueError(f"n_internal={internal} outside [0, {self.depth}]")
        self.n_internal, self.n_external = internal, external


@dataclass
class CrossModalState:
    visual: list[Tensor] = field(default_factory=list)
    textual: list[Tensor] = field(default_factory=list)
    visual_mask: np.ndarray | None = None
    text_mask: np.ndarray | None = None

    @property
    def last_visual(self) -> Tensor:
        return self.visual[-1]

    @property
    def last_textual(self) -> Tensor:
        return self.textual[-1]


class CrossModalPart(Module):
    """MSA over own tokens, MCA into the other modality, FFN."""

    def __init__(self, cfg: CrossModalConfig, rng: np.random.Generator):
        d = cfg.width
        self.norm = cfg.norm
        self.dropout = cfg.dropout
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng, cfg.dropout)
        self.ln_self = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, rng, cfg.dropout)
        self.ln_cross = LayerNorm(d)
        self.ffn = FeedForward(d, rng, cfg.expansion)
        self.ln_ffn = LayerNorm(d)

    def __call__(self, x, other, x_mask, other_mask, rng=None, rec_self=None, rec_cross=None):
        drop = lambda t: ag.dropout(t, self.dropout, rng, self.training)  # noqa: E731
        if self.norm == "post":
            h = self.ln_self(x + drop(self.self_attn(x, key_mask=x_mask, record=rec_self, rng=rng)))
            h = self.ln_cross(h + drop(self.cross_attn(h, other, key_mask=other_mask, record=rec_cross, rng=rng)))
            return self.ln_ffn(h + drop(self.ffn(h)))
        h = x + drop(self.self_attn(self.ln_self(x), key_mask=x_mask, record=rec_self, rng=rng))
        h = h + drop(self.cross_attn(self.ln_cross(h), other, key_mask=other_mask, record=rec_cross, rng=rng))
        return h + drop(self.ffn(self.ln_ffn(h)))


class CrossModalLayer(Module):
    def __init__(self, cfg: CrossModalConfig, rng: np.random.Generator):
        self.visual = CrossModalPart(cfg, rng)
        self.textual = CrossModalPart(cfg, rng)

    def __call__(self, zv, zt, v_mask, t_mask, rng=None, record=None, layer: int = 0):
        """Both parts read this layer's inputs; neither sees the other's update."""
        rec = _recorders(record, layer, v_mask, t_mask)
        out_v = self.visual(zv, zt, v_mask, t_mask, rng, rec[("visual", "self")], rec[("visual", "cross")])
        out_t = self.textual(zt, zv, t_mask, v_mask, rng, rec[("textual", "self")], rec[("textual", "cross")])
        return out_v, out_t


def _recorders(sink, layer, v_mask, t_mask):
    out = {}
    for part, qmask in (("visual", v_mask), ("textual", t_mask)):
        for kind in ("self", "cross"):
            if sink is None:
                out[(part, kind)] = None
                continue

            def rec(weights, key_mask, part=part, kind=kind, qmask=qmask):
                b, _, nq, _ = weights.shape
                qm = np.ones((b, nq), dtype=bool) if qmask is None else np.broadcast_to(qmask, (b, nq)).copy()
                sink.append(AttentionRecord(layer, part, kind, weights, qm, key_mask))

            out[(part, kind)] = rec
    return out


class CrossModalEncoder(Module):
    """Input projections, type embeddings, bridge bank (internal layers) and the co-attention stack."""

    def __init__(self, cfg: CrossModalConfig, visual_width: int, text_width: int, rng: np.random.Generator,
                 visual_depth: int | None = None, text_depth: int | None = None):
        self.cfg = cfg
        d = cfg.width
        for name, depth in (("visual", visual_depth), ("textual", text_depth)):
            if depth is not None and depth < cfg.n_internal:
                raise ValueError(f"{name} encoder has {depth} layers but {cfg.n_internal} internal cross-modal layers need bridges")
        self.proj_visual = Linear(visual_width, d, rng)
        self.proj_text = Linear(text_width, d, rng)
        self.type_visual = normal_param((d,), rng)
        self.type_text = normal_param((d,), rng)
        n = cfg.n_internal
        self.bridges_visual = [BridgeLayer(cfg.bridge, d, l == 1, rng, cfg.bridge_heads) for l in range(1, n + 1)]
        self.bridges_text = [BridgeLayer(cfg.bridge, d, l == 1, rng, cfg.bridge_heads) for l in range(1, n + 1)]
        if cfg.fusion_mode == "weighted_sum":
            if visual_depth is None or text_depth is None:
                raise ValueError("weighted_sum mode needs the uni-modal depths")
            self.fusion_visual = zeros_param((visual_depth + 1,))
            self.fusion_text = zeros_param((text_depth + 1,))
        self.layers = [CrossModalLayer(cfg, rng) for _ in range(cfg.depth)]

    # parameter groups used for accounting and learning-rate multipliers
    def bridge_parameters(self):
        return [p for _, p in self.named_parameters() if _is_bridge(_)]

    def _project_visual(self, v: Tensor) -> Tensor:
        return self.proj_visual(v) + self.type_visual

    def _project_text(self, t: Tensor) -> Tensor:
        return self.proj_text(t) + self.type_text

    def __call__(self, v_stack, t_stack, v_mask=None, t_mask=None, rng=None, record=None) -> CrossModalState:
        cfg = self.cfg
        if len(v_stack) - 1 < cfg.n_internal or len(t_stack) - 1 < cfg.n_internal:
            raise ValueError("uni-modal stacks are shallower than the number of internal cross-modal layers")
        state = CrossModalState(visual_mask=v_mask, text_mask=t_mask)
        lv, lt = len(v_stack) - 1, len(t_stack) - 1
        zv = zt = None
        n_int = cfg.n_internal
        for l in range(1, n_int + 1):
            yv = self._project_visual(v_stack[layer_index_map(l, lv, n_int)])
            yt = self._project_text(t_stack[layer_index_map(l, lt, n_int)])
            xv = self.bridges_visual[l - 1](zv, yv, v_mask, rng)
            xt = self.bridges_text[l - 1](zt, yt, t_mask, rng)
            zv, zt = self.layers[l - 1](xv, xt, v_mask, t_mask, rng, record, l)
            state.visual.append(zv)
            state.textual.append(zt)
        if n_int == 0:
            if cfg.fusion_mode == "weighted_sum":
                zv = self._project_visual(_weighted(v_stack, self.fusion_visual))
                zt = self._project_text(_weighted(t_stack, self.fusion_text))
            else:
                zv = self._project_visual(v_stack[-1])
                zt = self._project_text(t_stack[-1])
        for l in range(n_int + 1, cfg.depth + 1):
            zv, zt = self.layers[l - 1](zv, zt, v_mask, t_mask, rng, record, l)
            state.visual.append(zv)
            state.textual.append(zt)
        return state


def _weighted(stack, logits: Tensor) -> Tensor:
    w = ag.softmax(logits)
    total = None
    for j, rep in enumerate(stack):
        term = rep * w[j]
        total = term if total is None else total + term
    return total


def _is_bridge(name: str) -> bool:
    return name.startswith("bridges_")


def pooled_outputs(state: CrossModalState) -> tuple[Tensor, Tensor]:
    """Last-layer class-token (visual) and start-token (textual) rows."""
    return state.last_visual[..., 0, :], state.last_textual[..., 0, :]
