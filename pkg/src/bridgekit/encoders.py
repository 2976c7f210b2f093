"""Uni-modal encoders that expose every intermediate layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Embedding, Linear, Module, TransformerLayer, normal_param


@dataclass
class PatchGrid:
    image: np.ndarray
    patch_size: int

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] < 1:
            raise ValueError(f"image must be H x W x C with C >= 1, got {self.image.shape}")
        h, w, _ = self.image.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} must divide H={h} and W={w}")

    @property
    def num_patches(self) -> int:
        h, w, _ = self.image.shape
        return h * w // self.patch_size ** 2

    @property
    def grid_shape(self) -> tuple[int, int]:
        h, w, _ = self.image.shape
        return h // self.patch_size, w // self.patch_size

    def patches(self) -> np.ndarray:
        return patchify(self.image, self.patch_size)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split H x W x C (or batched B x H x W x C) into row-major flattened P x P x C patches."""
    image = np.asarray(image)
    batched = image.ndim == 4
    if not batched:
        image = image[None]
    b, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"patch size {p} must divide H={h} and W={w}")
    out = image.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(b, (h // p) * (w // p), p * p * c)
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, height: int, width: int, patch_size: int) -> np.ndarray:
    p = patch_size
    n, dim = patches.shape
    c = dim // (p * p)
    out = patches.reshape(height // p, width // p, p, p, c).transpose(0, 2, 1, 3, 4)
    return out.reshape(height, width, c)


@dataclass
class EncoderConfig:
    depth: int
    width: int
    heads: int
    max_positions: int
    norm: str = "pre"
    expansion: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"encoder depth must be >= 1, got {self.depth}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")


class _Encoder(Module):
    def _init_layers(self, cfg: EncoderConfig, rng):
        self.layers = [
            TransformerLayer(cfg.width, cfg.heads, rng, cfg.norm, cfg.expansion, cfg.dropout)
            for _ in range(cfg.depth)
        ]

    def encode(self, x0: Tensor, mask=None, rng=None) -> list[Tensor]:
        """Return ``[x0, x1, ..., xL]``: the embedding plus every layer output."""
        stack = [x0]
        x = x0
        for layer in self.layers:
            x = layer(x, mask, rng=rng)
            stack.append(x)
        return stack


class VisualEncoder(_Encoder):
    """Patch projection, prepended class token, learned positions, then pre-norm layers."""

    def __init__(self, cfg: EncoderConfig, patch_dim: int, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_proj = Linear(patch_dim, cfg.width, rng)
        self.class_token = normal_param((cfg.width,), rng)
        self.positions = normal_param((cfg.max_positions, cfg.width), rng)
        self._init_layers(cfg, rng)

    def embed(self, patches) -> Tensor:
        patches = patches if isinstance(patches, Tensor) else Tensor(patches)
        squeeze = patches.ndim == 2
        if squeeze:
            patches = patches.reshape(1, *patches.shape)
        b, n, _ = patches.shape
        if n + 1 > self.positions.shape[0]:
            raise ValueError(f"{n} patches + class token exceed {self.positions.shape[0]} position rows")
        proj = self.patch_proj(patches)
        cls = ag.broadcast_to(self.class_token.reshape(1, 1, -1), (b, 1, self.cfg.width))
        v0 = ag.concat([cls, proj], axis=1) + self.positions[: n + 1]
        return v0.reshape(n + 1, self.cfg.width) if squeeze else v0

    def __call__(self, patches, rng=None) -> list[Tensor]:
        return self.encode(self.embed(patches), None, rng)


class TextualEncoder(_Encoder):
    """Word embeddings plus learned positions, then post-norm layers."""

    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        self.words = Embedding(vocab_size, cfg.width, rng)
        self.positions = normal_param((cfg.max_positions, cfg.width), rng)
        self._init_layers(cfg, rng)

    def embed(self, ids) -> Tensor:
        ids = np.asarray(ids)
        n = ids.shape[-1]
        if n > self.positions.shape[0]:
            raise ValueError(f"sequence length {n} exceeds {self.positions.shape[0]} position rows")
        return self.words(ids) + self.positions[:n]

    def __call__(self, ids, mask, rng=None) -> list[Tensor]:
        return self.encode(self.embed(ids), mask, rng)
