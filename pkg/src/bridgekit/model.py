"""Full two-tower vision-language model: encoders, cross-modal stack and task heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autograd import Tensor
from .crossmodal import CrossModalConfig, CrossModalEncoder, CrossModalState, pooled_outputs
from .encoders import EncoderConfig, TextualEncoder, VisualEncoder, patchify
from .nn import Linear, Module, default_dtype, meta_init
from .objectives import ITMHead, MLMHead, TaskHead
from .rng import make_rng
from .text import LABEL_IGNORE, MAX_TEXT_LEN


@dataclass
class ModelConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    vocab_size: int = 200
    max_text_len: int = MAX_TEXT_LEN
    visual_depth: int = 4
    visual_width: int = 64
    visual_heads: int = 4
    text_depth: int = 4
    text_width: int = 64
    text_heads: int = 4
    cross_depth: int = 2
    cross_width: int = 64
    cross_heads: int = 4
    ffn_expansion: int = 4
    bridge: str = "a"
    fusion_mode: str = "bridge"
    n_internal: int | None = None
    n_external: int | None = None
    dropout: float = 0.0
    visual_norm: str = "pre"
    text_norm: str = "post"
    cross_norm: str = "post"
    num_classes: int = 0

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def cross_config(self) -> CrossModalConfig:
        return CrossModalConfig(
            depth=self.cross_depth,
            width=self.cross_width,
            heads=self.cross_heads,
            fusion_mode=self.fusion_mode,
            bridge=self.bridge,
            n_internal=self.n_internal,
            n_external=self.n_external,
            expansion=self.ffn_expansion,
            norm=self.cross_norm,
            dropout=self.dropout,
        )

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError(f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        EncoderConfig(self.visual_depth, self.visual_width, self.visual_heads, self.num_patches + 1)
        EncoderConfig(self.text_depth, self.text_width, self.text_heads, self.max_text_len)
        cm = self.cross_config()
        for name, depth in (("visual", self.visual_depth), ("text", self.text_depth)):
            if cm.n_internal > depth:
                raise ValueError(f"{cm.n_internal} internal cross-modal layers exceed {name} depth {depth}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def paper_scale_config(**overrides) -> ModelConfig:
    """12-layer 768-wide uni-modal encoders, 6-layer 768-wide cross-modal encoder, 224px / 16px patches."""
    base = dict(
        image_size=224, patch_size=16, vocab_size=50265, max_text_len=514,
        visual_depth=12, visual_width=768, visual_heads=12,
        text_depth=12, text_width=768, text_heads=12,
        cross_depth=6, cross_width=768, cross_heads=12,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Batch:
    """Collated model inputs; ``patches`` is (B, N, P*P*C), ``ids``/``text_mask`` are (B, L)."""

    patches: np.ndarray
    ids: np.ndarray
    text_mask: np.ndarray
    mlm_labels: np.ndarray | None = None


def collate(images, seqs, patch_size: int, dtype=np.float64, trim: bool = True) -> Batch:
    """Stack images and token sequences; with ``trim``, drop trailing all-padding columns."""
    patches = patchify(np.stack(images).astype(dtype), patch_size)
    ids = np.stack([s.ids for s in seqs])
    mask = np.stack([s.mask for s in seqs])
    labels = None
    if any(s.mlm_labels is not None for s in seqs):
        # sequences without labels contribute no supervised positions
        labels = np.stack([s.mlm_labels if s.mlm_labels is not None else np.full_like(s.ids, LABEL_IGNORE)
                           for s in seqs])
    if trim:
        n = int(mask.sum(axis=1).max())
        ids, mask = ids[:, :n], mask[:, :n]
        labels = labels[:, :n] if labels is not None else None
    return Batch(patches, ids, mask, labels)


class VisionLanguageModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        rng = make_rng(seed, "init")
        with default_dtype(dtype):
            patch_dim = cfg.patch_size ** 2 * cfg.channels
            self.visual_encoder = VisualEncoder(
                EncoderConfig(cfg.visual_depth, cfg.visual_width, cfg.visual_heads, cfg.num_patches + 1,
                              cfg.visual_norm, cfg.ffn_expansion, cfg.dropout),
                patch_dim, rng,
            )
            self.text_encoder = TextualEncoder(
                EncoderConfig(cfg.text_depth, cfg.text_width, cfg.text_heads, cfg.max_text_len,
                              cfg.text_norm, cfg.ffn_expansion, cfg.dropout),
                cfg.vocab_size, rng,
            )
            self.cross_modal = CrossModalEncoder(
                cfg.cross_config(), cfg.visual_width, cfg.text_width, rng, cfg.visual_depth, cfg.text_depth
            )
            d = cfg.cross_width
            self.mlm_head = MLMHead(d, cfg.vocab_size, rng)
            self.itm_head = ITMHead(d, rng)
            self.itc_visual = Linear(cfg.visual_width, d, rng)
            self.itc_text = Linear(cfg.text_width, d, rng)
            if cfg.num_classes:
                self.task_head = TaskHead(d, cfg.num_classes, rng)

    @classmethod
    def meta(cls, cfg: ModelConfig) -> "VisionLanguageModel":
        """Shape-only instance for parameter accounting; allocates no weights."""
        with meta_init():
            return cls(cfg)

    @property
    def dtype(self):
        return self.visual_encoder.class_token.dtype

    def encode_unimodal(self, batch: Batch, rng=None):
        v_stack = self.visual_encoder(Tensor(batch.patches.astype(self.dtype, copy=False)), rng)
        t_stack = self.text_encoder(batch.ids, batch.text_mask, rng)
        return v_stack, t_stack

    def fuse(self, v_stack, t_stack, text_mask, rng=None, record=None) -> CrossModalState:
        return self.cross_modal(v_stack, t_stack, None, text_mask, rng, record)

    def __call__(self, batch: Batch, rng=None, record=None) -> CrossModalState:
        v_stack, t_stack = self.encode_unimodal(batch, rng)
        return self.fuse(v_stack, t_stack, batch.text_mask, rng, record)

    def itm_logits(self, batch: Batch, rng=None, record=None) -> Tensor:
        state = self(batch, rng, record)
        return self.itm_head(*pooled_outputs(state))

    def itc_embeddings(self, batch: Batch, rng=None) -> tuple[Tensor, Tensor]:
        v_stack, t_stack = self.encode_unimodal(batch, rng)
        return self.itc_visual(v_stack[-1][:, 0]), self.itc_text(t_stack[-1][:, 0])
