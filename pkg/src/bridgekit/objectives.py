"""Pre-training and fine-tuning heads, losses, hard-negative sampling, retrieval, AdamW."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import LayerNorm, Linear, Module, Parameter
from .text import LABEL_IGNORE

ITC_TEMPERATURE = 0.07


# -- heads -----------------------------------------------------------------

class MLMHead(Module):
    """linear -> GeLU -> LayerNorm -> vocabulary projection."""

    def __init__(self, width: int, vocab_size: int, rng):
        self.dense = Linear(width, width, rng)
        self.norm = LayerNorm(width)
        self.decoder = Linear(width, vocab_size, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return self.decoder(self.norm(ag.gelu(self.dense(h))))


class PairPooler(Module):
    """tanh(W p + b) per modality, concatenated: the trunk shared by ITM and task heads."""

    def __init__(self, width: int, rng):
        self.visual = Linear(width, width, rng)
        self.textual = Linear(width, width, rng)

    def __call__(self, pooled_v: Tensor, pooled_t: Tensor) -> Tensor:
        return ag.concat([ag.tanh(self.visual(pooled_v)), ag.tanh(self.textual(pooled_t))], axis=-1)


class ITMHead(Module):
    def __init__(self, width: int, rng):
        self.pooler = PairPooler(width, rng)
        self.classifier = Linear(2 * width, 2, rng)

    def __call__(self, pooled_v: Tensor, pooled_t: Tensor) -> Tensor:
        return self.classifier(self.pooler(pooled_v, pooled_t))


def itm_head(pooled_v: Tensor, pooled_t: Tensor, params: ITMHead) -> Tensor:
    return params(pooled_v, pooled_t)


class TaskHead(Module):
    """Pooler trunk, then an MLP classifier: linear(2D) -> GeLU -> LayerNorm -> linear(C)."""

    def __init__(self, width: int, num_classes: int, rng):
        self.pooler = PairPooler(width, rng)
        self.hidden = Linear(2 * width, 2 * width, rng)
        self.norm = LayerNorm(2 * width)
        self.out = Linear(2 * width, num_classes, rng)

    def __call__(self, pooled_v: Tensor, pooled_t: Tensor) -> Tensor:
        return self.out(self.norm(ag.gelu(self.hidden(self.pooler(pooled_v, pooled_t)))))


def task_head_vqa(pooled_v, pooled_t, params: TaskHead, targets) -> tuple[Tensor, Tensor]:
    """Multi-label answer scores with binary cross-entropy (soft targets allowed)."""
    logits = params(pooled_v, pooled_t)
    return logits, ag.binary_cross_entropy_with_logits(logits, targets)


def task_head_ve(pooled_v, pooled_t, params: TaskHead, labels) -> tuple[Tensor, Tensor]:
    """Single-label classification with cross-entropy."""
    logits = params(pooled_v, pooled_t)
    return logits, ag.cross_entropy(logits, labels)


# -- losses ----------------------------------------------------------------

def mlm_loss(text_states: Tensor, mlm_labels, head: MLMHead) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Cross-entropy at supervised positions only.

    Returns ``(loss, logits_at_supervised, targets_at_supervised)``; the head
    runs only on supervised rows.
    """
    labels = np.asarray(mlm_labels)
    idx = np.nonzero(labels != LABEL_IGNORE)
    if idx[0].size == 0:
        raise ValueError("mlm_loss: no supervised positions")
    rows = text_states[idx]
    logits = head(rows)
    targets = labels[idx]
    return ag.cross_entropy(logits, targets), logits.data, targets


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x * ag.power((x * x).sum(axis=-1, keepdims=True) + eps, -0.5)


def itc_logits(img: Tensor, txt: Tensor, temperature: float = ITC_TEMPERATURE) -> Tensor:
    return (l2_normalize(img) @ l2_normalize(txt).T) * (1.0 / temperature)


def itc_loss(img: Tensor, txt: Tensor, temperature: float = ITC_TEMPERATURE) -> tuple[Tensor, Tensor]:
    """Symmetric InfoNCE with diagonal positives; returns ``(loss, image->text logits)``."""
    n = img.shape[0]
    if n < 2:
        raise ValueError("itc_loss needs a batch of at least 2")
    if txt.shape[0] != n:
        raise ValueError(f"itc_loss: {n} images vs {txt.shape[0]} texts")
    logits = itc_logits(img, txt, temperature)
    target = np.arange(n)
    loss = (ag.cross_entropy(logits, target) + ag.cross_entropy(logits.T, target)) * 0.5
    return loss, logits


def hard_negative_sample(similarity, rng: np.random.Generator) -> np.ndarray:
    """For each row draw one off-diagonal column with probability softmax(row), diagonal excluded."""
    sim = np.asarray(similarity.data if isinstance(similarity, Tensor) else similarity, dtype=float)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity must be square, got {sim.shape}")
    n = sim.shape[0]
    if n < 2:
        raise ValueError("hard negative sampling needs at least 2 items")
    logits = sim.copy()
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(n)
    out = np.array([int(np.searchsorted(cdf[i], u[i] * cdf[i, -1], side="right")) for i in range(n)])
    out = np.minimum(out, n - 1)
    # guard against a zero-probability landing on the diagonal through rounding
    for i in np.nonzero(out == np.arange(n))[0]:
        out[i] = int(np.argmax(np.where(np.arange(n) == i, -np.inf, p[i])))
    return out


def itm_pairing(items, rng: np.random.Generator, n_pool: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Decide per item whether its caption stays (label 1) or is swapped for another pair's (label 0).

    ``items`` is an array of pair indices (or a count, meaning ``0..n-1``).
    Returns ``(caption_index, label)``; negatives never reuse the item's own pair.
    """
    own = np.arange(items) if np.ndim(items) == 0 else np.asarray(items, dtype=np.int64)
    pool = n_pool if n_pool is not None else len(own)
    if pool < 2:
        raise ValueError("ITM negatives need at least 2 distinct pairs")
    if own.size and (own.min() < 0 or own.max() >= pool):
        raise ValueError(f"pair indices must lie in [0, {pool})")
    labels = (rng.random(own.size) < 0.5).astype(np.int64)
    offset = rng.integers(1, pool, size=own.size)
    captions = np.where(labels == 1, own, (own + offset) % pool)
    return captions, labels


# -- retrieval ---------------------------------------------------------------

@dataclass
class RetrievalResult:
    text_ranking: np.ndarray   # per image query, candidate text indices best-first
    image_ranking: np.ndarray  # per text query, candidate image indices best-first
    recalls: dict = field(default_factory=dict)

    @property
    def rsum(self) -> float:
        return float(sum(self.recalls.values()))


def _rerank(itc_row: np.ndarray, itm_fn, top_k: int) -> np.ndarray:
    order = np.argsort(-itc_row, kind="stable")
    head = order[:top_k]
    scores = np.asarray(itm_fn(head), dtype=float)
    head = head[np.argsort(-scores, kind="stable")]
    return np.concatenate([head, order[top_k:]])


def _recall_at(ranking: np.ndarray, truth: np.ndarray, k: int) -> float:
    hits = [truth[q] in ranking[q, :k] for q in range(len(ranking))]
    return 100.0 * float(np.mean(hits))


def retrieve(itc_sim: np.ndarray, itm_score, top_k: int, text_to_image=None) -> RetrievalResult:
    """Two-stage ranking: ITC similarity, then ITM positive logit over the top ``top_k``.

    ``itm_score(image_indices, text_indices)`` returns one score per pair.
    ``text_to_image[t]`` is the ground-truth image of text ``t`` (identity by default).
    """
    itc_sim = np.asarray(itc_sim, dtype=float)
    n_img, n_txt = itc_sim.shape
    if not 1 <= top_k <= min(n_img, n_txt):
        raise ValueError(f"top_k={top_k} must be in [1, {min(n_img, n_txt)}]")
    t2i = np.arange(n_txt) if text_to_image is None else np.asarray(text_to_image)
    text_rank = np.stack([
        _rerank(itc_sim[i], lambda ts, i=i: itm_score(np.full(len(ts), i), ts), top_k) for i in range(n_img)
    ])
    image_rank = np.stack([
        _rerank(itc_sim[:, t], lambda ims, t=t: itm_score(ims, np.full(len(ims), t)), top_k) for t in range(n_txt)
    ])
    recalls = {}
    for k in (1, 5, 10):
        kk = min(k, n_txt)
        # an image query is a hit if any of its captions is ranked in the top k
        hits = [np.isin(text_rank[i, :kk], np.nonzero(t2i == i)[0]).any() for i in range(n_img)]
        recalls[f"tr_r{k}"] = 100.0 * float(np.mean(hits))
    for k in (1, 5, 10):
        recalls[f"ir_r{k}"] = _recall_at(image_rank, t2i, min(k, n_img))
    return RetrievalResult(text_rank, image_rank, recalls)


# -- optimization --------------------------------------------------------------

def linear_warmup_decay(step: int, total: int, warmup_fraction: float = 0.1) -> float:
    """Multiplier in [0, 1]: linear ramp over the warmup steps, then linear decay to 0 at ``total``."""
    if total <= 0:
        return 0.0
    warm = warmup_fraction * total
    if warm > 0 and step < warm:
        return step / warm
    return max(0.0, (total - step) / (total - warm))


@dataclass
class ParamGroup:
    params: list
    lr_mult: float = 1.0
    weight_decay: float = 0.0
    name: str = ""


class AdamW:
    """Decoupled weight decay Adam with bias correction."""

    def __init__(self, groups: list[ParamGroup], lr: float, betas=(0.9, 0.98), eps: float = 1e-8):
        self.groups = groups
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {id(p): np.zeros_like(p.data) for g in groups for p in g.params}
        self.v = {id(p): np.zeros_like(p.data) for g in groups for p in g.params}

    def step(self, lr_scale: float = 1.0) -> None:
        b1, b2 = self.betas
        t = self.step_count + 1
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for g in self.groups:
            lr = self.lr * lr_scale * g.lr_mult
            for p in g.params:
                if p.grad is None:
                    continue
                m, v = self.m[id(p)], self.v[id(p)]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad * p.grad
                if lr == 0.0:
                    continue
                if g.weight_decay:
                    p.data *= 1.0 - lr * g.weight_decay
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.step_count = t

    def state_arrays(self, names: dict[int, str]) -> dict[str, np.ndarray]:
        out = {}
        for key, arr in self.m.items():
            out[f"adam.m.{names[key]}"] = arr
        for key, arr in self.v.items():
            out[f"adam.v.{names[key]}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], names: dict[int, str]) -> None:
        for key in self.m:
            self.m[key][...] = arrays[f"adam.m.{names[key]}"]
            self.v[key][...] = arrays[f"adam.v.{names[key]}"]


def optimizer_step(params: list[Parameter], opt: AdamW, step: int, total: int, warmup_fraction: float = 0.1) -> float:
    """Apply one AdamW update at schedule position ``step``; returns the multiplier used."""
    scale = linear_warmup_decay(step, total, warmup_fraction)
    opt.step(scale)
    return scale


def accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    if len(targets) == 0:
        return math.nan
    return float(np.mean(np.argmax(logits, axis=-1) == targets))
