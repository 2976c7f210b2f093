"""Attention-head diversity, cross-attention maps and parameter accounting."""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import no_grad
from .nn import AttentionRecord, Module

KL_EPS = 1e-10


# -- KL diversity ------------------------------------------------------------------

@dataclass
class DiversityReport:
    """Per (layer, part, kind): an (H, H) matrix of mean KL(head_i || head_j); the diagonal is unused."""

    matrices: dict = field(default_factory=dict)
    num_examples: dict = field(default_factory=dict)

    @property
    def keys(self):
        return sorted(self.matrices)

    def num_heads(self, key) -> int:
        return self.matrices[key].shape[0]

    def pairs(self, key) -> list[tuple[int, int, float]]:
        m = self.matrices[key]
        h = m.shape[0]
        return [(i, j, float(m[i, j])) for i in range(h) for j in range(h) if i != j]

    def layer_mean(self, key) -> float:
        return float(np.mean([v for _, _, v in self.pairs(key)]))

    def rows(self) -> list[tuple]:
        return [(*key, i, j, v) for key in self.keys for i, j, v in self.pairs(key)]

    def summary_rows(self) -> list[tuple]:
        return [(*key, self.layer_mean(key), len(self.pairs(key)), self.num_examples[key]) for key in self.keys]


def _kl_per_example(rec: AttentionRecord, eps: float) -> np.ndarray:
    """(B, H, H) KL averaged over each example's valid query positions."""
    w = np.asarray(rec.weights, dtype=np.float64)
    b, h, nq, nk = w.shape
    km = np.broadcast_to(np.asarray(rec.key_mask, dtype=bool), (b, nk))
    qm = np.broadcast_to(np.asarray(rec.query_mask, dtype=bool), (b, nq))
    wk = w * km[:, None, None, :]
    logw = np.log(np.maximum(w, eps))
    own = np.einsum("bhqk,bhqk->bhq", wk, logw)
    cross = np.einsum("bhqk,bgqk->bhgq", wk, logw)
    kl = own[:, :, None, :] - cross                       # (B, H, H, Q)
    counts = qm.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("an example has no valid query positions")
    return (kl * qm[:, None, None, :]).sum(axis=-1) / counts[:, None, None]


def head_kl_diversity(records, eps: float = KL_EPS) -> DiversityReport:
    """Mean KL between every ordered head pair, per (layer, part, kind).

    Per query: ``sum_k A1[k] (log max(A1[k], eps) - log max(A2[k], eps))`` over
    unmasked keys.  Averaged over valid queries within an example, then over
    examples.
    """
    sums: dict = OrderedDict()
    counts: dict = {}
    for rec in records:
        if rec.weights.shape[1] < 2:
            raise ValueError(f"KL diversity needs at least 2 heads, layer {rec.layer} has {rec.weights.shape[1]}")
        key = (rec.layer, rec.part, rec.kind)
        per = _kl_per_example(rec, eps)
        if key in sums and sums[key].shape != per.shape[1:]:
            raise ValueError(f"records for {key} disagree on head count")
        sums[key] = sums.get(key, 0.0) + per.sum(axis=0)
        counts[key] = counts.get(key, 0) + per.shape[0]
    if not sums:
        raise ValueError("no attention records given")
    report = DiversityReport()
    for key, total in sums.items():
        m = total / counts[key]
        np.fill_diagonal(m, 0.0)
        report.matrices[key] = m
        report.num_examples[key] = counts[key]
    return report


def record_attention(model, batch) -> list[AttentionRecord]:
    records: list[AttentionRecord] = []
    model.eval()
    with no_grad():
        model(batch, record=records)
    return records


# -- cross-attention maps -------------------------------------------------------------

def attention_map_from_record(rec: AttentionRecord, query: int, grid_shape, example: int = 0) -> np.ndarray:
    """Head-averaged weights from one text query to the image patches, class column dropped and renormalised."""
    row = np.asarray(rec.weights[example, :, query, :], dtype=np.float64).mean(axis=0)
    patches = row[1:]
    gh, gw = grid_shape
    if patches.size != gh * gw:
        raise ValueError(f"{patches.size} patch weights do not fill a {gh}x{gw} grid")
    total = patches.sum()
    if total <= 0:
        raise ValueError("all attention mass sits on the class token")
    return (patches / total).reshape(gh, gw)


def find_token(tokens: list[str], token: str) -> int:
    """Index (within ``tokens``) of the first token equal to ``token`` ignoring surrounding spaces."""
    want = token.strip()
    for i, tok in enumerate(tokens):
        if tok == token or tok.strip() == want:
            return i
    cands = ", ".join(repr(t.strip()) for t in tokens)
    raise KeyError(f"token {token!r} not in caption; candidates: {cands}")


def cross_attention_map(model, image: np.ndarray, caption: str, token: str, vocab, layer: int | None = None) -> np.ndarray:
    """Map of textual cross-attention from ``token`` to the image patches (last layer by default)."""
    from .model import collate
    from .text import bpe_encode

    cfg = model.cfg
    seq = bpe_encode(caption, vocab, cfg.max_text_len)
    pos = find_token(vocab.tokenize(caption), token) + 1  # after the start token
    batch = collate([image], [seq], cfg.patch_size, model.dtype)
    records = record_attention(model, batch)
    layer = layer or cfg.cross_depth
    for rec in records:
        if rec.layer == layer and rec.part == "textual" and rec.kind == "cross":
            side = cfg.image_size // cfg.patch_size
            return attention_map_from_record(rec, pos, (side, side))
    raise ValueError(f"no textual cross-attention recorded for layer {layer}")


# -- parameter accounting ------------------------------------------------------------------

PARAM_GROUPS = ("visual_encoder", "text_encoder", "cross_modal_input", "bridge", "cross_modal", "heads")


def _group_of(name: str) -> str:
    top, _, rest = name.partition(".")
    if top in ("visual_encoder", "text_encoder"):
        return top
    if top == "cross_modal":
        if rest.startswith("bridges_"):
            return "bridge"
        if rest.startswith("layers."):
            return "cross_modal"
        return "cross_modal_input"
    return "heads"


def count_parameters(model: Module) -> "OrderedDict[str, int]":
    """Exact counts per group plus ``total``; the groups partition the parameters.

    ``bridge`` holds every bridge layer norm and combiner; ``cross_modal``
    holds the co-attention layers alone; ``cross_modal_input`` holds the input
    projections, type embeddings and any fusion weights.
    """
    out = OrderedDict((g, 0) for g in PARAM_GROUPS)
    for name, p in model.named_parameters():
        out[_group_of(name)] += int(p.size)
    out["total"] = sum(out.values())
    return out


# -- writers --------------------------------------------------------------------------------

def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_grid_csv(path, grid: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in np.asarray(grid):
            w.writerow([repr(float(v)) for v in row])


def write_pgm(path, grid: np.ndarray, maxval: int = 255) -> None:
    """Plain (P2) graymap, scaled so the largest cell is white."""
    g = np.asarray(grid, dtype=np.float64)
    peak = g.max()
    scaled = np.zeros(g.shape, dtype=int) if peak <= 0 else np.rint(g / peak * maxval).astype(int)
    lines = ["P2", f"{g.shape[1]} {g.shape[0]}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in scaled]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("not a plain graymap")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)
