"""Datasets, training steps and evaluation for every task a run config can name."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .config import RunConfig
from .crossmodal import pooled_outputs
from .model import Batch, VisionLanguageModel, collate
from .objectives import (
    AdamW,
    ParamGroup,
    accuracy,
    hard_negative_sample,
    itc_loss,
    itm_pairing,
    linear_warmup_decay,
    mlm_loss,
    retrieve,
    task_head_ve,
    task_head_vqa,
)
from .rng import make_rng
from .text import (
    SyntheticPair,
    TokenSequence,
    Vocab,
    apply_mlm_masking,
    bpe_encode,
    bpe_train,
    generate_synthetic_pairs,
)

EVAL_CHUNK = 64
VE_LABELS = ("entailment", "neutral", "contradiction")


# -- toy fine-tuning tasks -----------------------------------------------------

def vqa_items(pairs, palette) -> tuple[list[tuple[int, str]], np.ndarray, tuple]:
    """One question per grid cell: which colour sits there (or 'none')."""
    answers = tuple(palette) + ("none",)
    items, targets = [], []
    for k, pair in enumerate(pairs):
        g = pair.scene.grid
        for r in range(g):
            for c in range(g):
                cell = pair.scene.cells[r][c]
                items.append((k, f"color at {r} {c}"))
                targets.append(answers.index(cell[0] if cell else "none"))
    return items, np.array(targets), answers


def ve_items(pairs, palette) -> tuple[list[tuple[int, str]], np.ndarray, tuple]:
    """Per cell one hypothesis.

    Occupied cells yield the true statement (entailment) or the same shape
    with the next palette colour (contradiction), alternating by cell; empty
    cells yield a statement about an object that is not there (neutral).
    """
    items, labels = [], []
    for k, pair in enumerate(pairs):
        g = pair.scene.grid
        for r in range(g):
            for c in range(g):
                cell = pair.scene.cells[r][c]
                if cell is None:
                    color = palette[(r * g + c + k) % len(palette)]
                    items.append((k, f"{color} square at {r} {c}"))
                    labels.append(VE_LABELS.index("neutral"))
                elif (r * g + c + k) % 2 == 0:
                    items.append((k, f"{cell[0]} {cell[1]} at {r} {c}"))
                    labels.append(VE_LABELS.index("entailment"))
                else:
                    other = palette[(palette.index(cell[0]) + 1) % len(palette)]
                    items.append((k, f"{other} {cell[1]} at {r} {c}"))
                    labels.append(VE_LABELS.index("contradiction"))
    return items, np.array(labels), VE_LABELS


@dataclass
class Split:
    pairs: list[SyntheticPair]
    images: np.ndarray
    captions: list[TokenSequence]
    items: list[tuple[int, TokenSequence]] = field(default_factory=list)
    targets: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class Dataset:
    vocab: Vocab
    train: Split
    held_out: Split
    classes: tuple = ()

    def split(self, name: str) -> Split:
        if name not in ("train", "held_out"):
            raise ValueError(f"unknown split {name!r}; use train or held_out")
        return getattr(self, name)


def build_dataset(cfg: RunConfig, vocab: Vocab | None = None) -> Dataset:
    d, m = cfg.data, cfg.model
    pairs = generate_synthetic_pairs(d.n_pairs + d.n_heldout, d.grid, d.palette, d.shapes, d.seed)
    train_pairs, held_pairs = pairs[: d.n_pairs], pairs[d.n_pairs:]
    task = cfg.run.task
    builder = {"vqa_toy": vqa_items, "ve_toy": ve_items}.get(task)
    raw = {}
    classes: tuple = ()
    for name, group in (("train", train_pairs), ("held_out", held_pairs)):
        raw[name] = builder(group, d.palette) if builder else ([], None, ())
        classes = raw[name][2] or classes
    if vocab is None:
        corpus = [p.caption for p in train_pairs] + [text for _, text in raw["train"][0]]
        vocab = bpe_train(corpus, d.vocab_size)
    if vocab.size > d.vocab_size:
        raise ValueError(f"tokenizer has {vocab.size} ids but the model embeds only {d.vocab_size}")

    def make(group, items_targets):
        items, targets, _ = items_targets
        images = np.stack([p.image(m.image_size, m.channels) for p in group]) if group else np.zeros((0,))
        caps = [bpe_encode(p.caption, vocab, m.max_text_len) for p in group]
        enc = [(k, bpe_encode(text, vocab, m.max_text_len)) for k, text in items]
        return Split(list(group), images, caps, enc, targets)

    return Dataset(vocab, make(train_pairs, raw["train"]), make(held_pairs, raw["held_out"]), classes)


# -- parameter groups ------------------------------------------------------------

_NO_DECAY_SUFFIXES = ("bias", "gain", "alpha", "class_token", "positions", "words.weight",
                      "type_visual", "type_text", "fusion_visual", "fusion_text")


def parameter_groups(model: VisionLanguageModel, cfg: RunConfig) -> list[ParamGroup]:
    """Uni-modal encoders at the base rate, cross-modal stack and bridges at ``cross_lr_mult``,
    heads at ``head_lr_mult``; norms, biases, embeddings and scalar mixers are not decayed."""
    t = cfg.train
    buckets: dict[tuple[str, bool], list] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        kind = "unimodal" if top in ("visual_encoder", "text_encoder") else "cross" if top == "cross_modal" else "head"
        decay = not name.endswith(_NO_DECAY_SUFFIXES)
        buckets.setdefault((kind, decay), []).append(p)
    mult = {"unimodal": 1.0, "cross": t.cross_lr_mult, "head": t.head_lr_mult}
    return [
        ParamGroup(params, mult[kind], t.weight_decay if decay else 0.0, f"{kind}{'' if decay else '_nodecay'}")
        for (kind, decay), params in buckets.items()
    ]


# -- trainer ----------------------------------------------------------------------

def _concat_stack(stack, times: int):
    return [ag.concat([t] * times, axis=0) for t in stack]


def _take_stack(stack, idx: np.ndarray):
    return [t[idx] for t in stack]


class Trainer:
    """Owns model, optimizer, data and the training random stream for one run."""

    def __init__(self, cfg: RunConfig, dataset: Dataset | None = None):
        self.cfg = cfg
        self.data = dataset or build_dataset(cfg)
        self.dtype = np.dtype(cfg.train.dtype)
        self.model = VisionLanguageModel(cfg.model_config(len(self.data.classes)), cfg.train.seed, self.dtype)
        self.opt = AdamW(parameter_groups(self.model, cfg), cfg.train.lr,
                         (cfg.train.beta1, cfg.train.beta2), cfg.train.eps)
        self.rng = make_rng(cfg.train.seed, "train")
        self.step = 0

    # batches
    def _sample(self, n: int) -> np.ndarray:
        b = min(self.cfg.train.batch_size, n)
        return np.sort(self.rng.choice(n, size=b, replace=False))

    def _collate(self, images, seqs) -> Batch:
        return collate(list(images), seqs, self.cfg.model.patch_size, self.dtype)

    # losses
    def pretrain_losses(self, idx: np.ndarray, split: Split, rng, mlm: bool = True) -> dict:
        """MLM on masked captions and ITM on kept/swapped captions, sharing one visual pass."""
        model, vocab = self.model, self.data.vocab
        b = len(idx)
        seqs = []
        if mlm:
            seqs += [apply_mlm_masking(split.captions[i], rng, vocab.size, self.cfg.data.mlm_rate) for i in idx]
        caps, itm_labels = itm_pairing(idx, rng, len(split))
        seqs += [split.captions[c] for c in caps]
        batch = self._collate(split.images[idx], seqs)
        v_stack = model.visual_encoder(Tensor(batch.patches), rng)
        if mlm:
            v_stack = _concat_stack(v_stack, 2)
        t_stack = model.text_encoder(batch.ids, batch.text_mask, rng)
        state = model.fuse(v_stack, t_stack, batch.text_mask, rng)
        pv, pt = pooled_outputs(state)
        out = {}
        lo = b if mlm else 0
        itm_logits = model.itm_head(pv[lo:], pt[lo:])
        out["itm_loss"] = ag.cross_entropy(itm_logits, itm_labels)
        out["itm_acc"] = accuracy(itm_logits.data, itm_labels)
        if mlm:
            labels = batch.mlm_labels[:b]
            loss, logits, targets = mlm_loss(state.last_textual[:b], labels, model.mlm_head)
            out["mlm_loss"] = loss
            out["mlm_acc"] = accuracy(logits, targets)
            out["loss"] = out["mlm_loss"] + out["itm_loss"]
        else:
            out["loss"] = out["itm_loss"]
        return out

    def retrieval_losses(self, idx: np.ndarray, split: Split, rng) -> dict:
        """ITC over the batch, then ITM on positives and ITC-sampled hard negatives in both directions."""
        model = self.model
        b = len(idx)
        batch = self._collate(split.images[idx], [split.captions[i] for i in idx])
        v_stack, t_stack = model.encode_unimodal(batch, rng)
        img = model.itc_visual(v_stack[-1][:, 0])
        txt = model.itc_text(t_stack[-1][:, 0])
        l_itc, logits = itc_loss(img, txt, self.cfg.train.temperature)
        neg_txt = hard_negative_sample(logits.data, rng)
        neg_img = hard_negative_sample(logits.data.T, rng)
        ar = np.arange(b)
        vi = np.concatenate([ar, ar, neg_img])
        ti = np.concatenate([ar, neg_txt, ar])
        mask = batch.text_mask[ti]
        state = model.fuse(_take_stack(v_stack, vi), _take_stack(t_stack, ti), mask, rng)
        labels = np.concatenate([np.ones(b, np.int64), np.zeros(2 * b, np.int64)])
        itm_logits = model.itm_head(*pooled_outputs(state))
        l_itm = ag.cross_entropy(itm_logits, labels)
        return {"loss": l_itc + l_itm, "itc_loss": l_itc, "itm_loss": l_itm,
                "itm_acc": accuracy(itm_logits.data, labels)}

    def task_losses(self, idx: np.ndarray, split: Split, rng) -> dict:
        model = self.model
        pair_idx = np.array([split.items[i][0] for i in idx])
        batch = self._collate(split.images[pair_idx], [split.items[i][1] for i in idx])
        state = model(batch, rng)
        targets = split.targets[idx]
        if self.cfg.run.task == "vqa_toy":
            onehot = np.eye(len(self.data.classes), dtype=self.dtype)[targets]
            logits, loss = task_head_vqa(*pooled_outputs(state), model.task_head, onehot)
        else:
            logits, loss = task_head_ve(*pooled_outputs(state), model.task_head, targets)
        return {"loss": loss, "task_loss": loss, "acc": accuracy(logits.data, targets)}

    def _losses(self, rng) -> dict:
        task = self.cfg.run.task
        split = self.data.train
        if task in ("vqa_toy", "ve_toy"):
            return self.task_losses(self._sample(len(split.items)), split, rng)
        idx = self._sample(len(split))
        if task == "retrieval":
            return self.retrieval_losses(idx, split, rng)
        return self.pretrain_losses(idx, split, rng, mlm=(task == "pretrain"))

    # one optimisation step
    def train_step(self) -> dict:
        t = self.cfg.train
        self.model.train()
        out = self._losses(self.rng)
        self.model.zero_grad()
        out["loss"].backward()
        scale = linear_warmup_decay(self.step, t.steps, t.warmup_fraction)
        self.opt.step(scale)
        self.step += 1
        record = {"step": self.step, "lr": t.lr * scale}
        for key in sorted(out):
            value = out[key]
            record[key] = float(value.data) if isinstance(value, Tensor) else float(value)
        return record

    def train(self, until: int | None = None, sink=None) -> list[dict]:
        """Run steps until ``until`` (default: the configured total); ``sink`` receives each record."""
        stop = self.cfg.train.steps if until is None else min(until, self.cfg.train.steps)
        records = []
        every = self.cfg.train.eval_every
        while self.step < stop:
            rec = self.train_step()
            records.append(rec)
            if sink:
                sink(rec)
            if every and self.step % every == 0:
                ev = {"step": self.step, "eval": self.evaluate("train")}
                records.append(ev)
                if sink:
                    sink(ev)
        return records

    # evaluation
    def evaluate(self, split_name: str = "train") -> dict:
        split = self.data.split(split_name)
        if len(split) < 2:
            raise ValueError(f"split {split_name!r} has fewer than 2 pairs")
        self.model.eval()
        rng = make_rng(self.cfg.train.seed, "eval")
        task = self.cfg.run.task
        with no_grad():
            if task in ("pretrain", "itm_eval"):
                return self._eval_pretrain(split, rng, task == "pretrain")
            if task == "retrieval":
                return self._eval_retrieval(split)
            return self._eval_task(split)

    def _eval_pretrain(self, split: Split, rng, with_mlm: bool) -> dict:
        n = len(split)
        model, vocab = self.model, self.data.vocab
        offsets = rng.integers(1, n, size=n)
        masked = [apply_mlm_masking(s, rng, vocab.size, self.cfg.data.mlm_rate) for s in split.captions]
        itm_logits, itm_labels, mlm_logits, mlm_targets = [], [], [], []
        for lo in range(0, n, EVAL_CHUNK):
            idx = np.arange(lo, min(lo + EVAL_CHUNK, n))
            for caps, label in ((idx, 1), ((idx + offsets[idx]) % n, 0)):
                batch = self._collate(split.images[idx], [split.captions[c] for c in caps])
                itm_logits.append(model.itm_logits(batch).data)
                itm_labels.append(np.full(len(idx), label))
            if with_mlm:
                batch = self._collate(split.images[idx], [masked[i] for i in idx])
                state = model(batch)
                _, logits, targets = mlm_loss(state.last_textual, batch.mlm_labels, model.mlm_head)
                mlm_logits.append(logits)
                mlm_targets.append(targets)
        il, lab = np.concatenate(itm_logits), np.concatenate(itm_labels)
        out = {"itm_acc": accuracy(il, lab), "itm_loss": _ce(il, lab)}
        if with_mlm:
            ml, mt = np.concatenate(mlm_logits), np.concatenate(mlm_targets)
            out.update(mlm_acc=accuracy(ml, mt), mlm_loss=_ce(ml, mt))
            out["loss"] = out["mlm_loss"] + out["itm_loss"]
        else:
            out["loss"] = out["itm_loss"]
        return out

    def _eval_retrieval(self, split: Split) -> dict:
        model = self.model
        n = len(split)
        img, txt = [], []
        for lo in range(0, n, EVAL_CHUNK):
            idx = np.arange(lo, min(lo + EVAL_CHUNK, n))
            batch = self._collate(split.images[idx], [split.captions[i] for i in idx])
            vs, ts = model.encode_unimodal(batch)
            img.append(model.itc_visual(vs[-1][:, 0]).data)
            txt.append(model.itc_text(ts[-1][:, 0]).data)
        img, txt = np.concatenate(img), np.concatenate(txt)
        loss, logits = itc_loss(Tensor(img), Tensor(txt), self.cfg.train.temperature)

        def score(ims, ts):
            batch = self._collate(split.images[ims], [split.captions[t] for t in ts])
            return model.itm_logits(batch).data[:, 1]

        top_k = min(self.cfg.train.top_k, n)
        res = retrieve(logits.data, score, top_k)
        out = {"loss": float(loss.data), "rsum": res.rsum}
        out.update(res.recalls)
        return out

    def _eval_task(self, split: Split) -> dict:
        model = self.model
        logits = []
        for lo in range(0, len(split.items), EVAL_CHUNK):
            chunk = split.items[lo: lo + EVAL_CHUNK]
            batch = self._collate(split.images[[k for k, _ in chunk]], [s for _, s in chunk])
            logits.append(model.task_head(*pooled_outputs(model(batch))).data)
        lg = np.concatenate(logits)
        if self.cfg.run.task == "vqa_toy":
            onehot = np.eye(len(self.data.classes))[split.targets]
            loss = float(ag.binary_cross_entropy_with_logits(Tensor(lg), onehot).data)
        else:
            loss = _ce(lg, split.targets)
        return {"loss": loss, "acc": accuracy(lg, split.targets)}


def _ce(logits: np.ndarray, targets: np.ndarray) -> float:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(targets)), targets].mean())


def format_record(record: dict) -> str:
    """One JSON line; float repr and key order are fixed so identical runs give identical bytes."""
    return json.dumps(record, sort_keys=True, allow_nan=True)


def is_finite_record(record: dict) -> bool:
    return all(math.isfinite(v) for k, v in record.items() if isinstance(v, float))
