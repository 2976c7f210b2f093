"""Character-level BPE tokenizer, MLM masking and the synthetic scene/caption corpus."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BOS, EOS, PAD, MASK, UNK = "[<s>]", "[</s>]", "[pad]", "[mask]", "[unk]"
SPECIALS = (BOS, EOS, PAD, MASK, UNK)
BOS_ID, EOS_ID, PAD_ID, MASK_ID, UNK_ID = range(len(SPECIALS))
MAX_TEXT_LEN = 50
LABEL_IGNORE = -100

# fraction of selected tokens replaced by [mask] / a random token; rest unchanged
MASK_FRACTION = 0.8
RANDOM_FRACTION = 0.1


def _pretokenize(text: str) -> list[str]:
    # spaces stay attached to the following word so decoding is a plain join
    words, cur = [], ""
    for ch in text:
        if ch == " " and cur and not cur.isspace():
            words.append(cur)
            cur = ch
        else:
            cur += ch
    if cur:
        words.append(cur)
    return words


def _escape(tok: str) -> str:
    return tok.encode("unicode_escape").decode("ascii")


def _unescape(tok: str) -> str:
    return tok.encode("ascii").decode("unicode_escape")


@dataclass
class Vocab:
    alphabet: list[str]
    merges: list[tuple[str, str]]
    tokens: list[str] = field(init=False)
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.tokens = list(SPECIALS) + list(self.alphabet) + [a + b for a, b in self.merges]
        self.token_to_id = {}
        for i, tok in enumerate(self.tokens):
            self.token_to_id.setdefault(tok, i)
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, list[str]] = {}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self):
        return self.size

    @property
    def content_ids(self) -> range:
        return range(len(SPECIALS), self.size)

    def _bpe_word(self, word: str) -> list[str]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        parts = list(word)
        while len(parts) > 1:
            best, best_rank = None, None
            for i in range(len(parts) - 1):
                rank = self._ranks.get((parts[i], parts[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best, best_rank = i, rank
            if best is None:
                break
            parts[best : best + 2] = [parts[best] + parts[best + 1]]
        self._cache[word] = parts
        return parts

    def tokenize(self, text: str) -> list[str]:
        return [p for w in _pretokenize(text) for p in self._bpe_word(w)]

    def encode_ids(self, text: str) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in self.tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i >= len(SPECIALS))

    def dumps(self) -> str:
        lines = ["#specials\t" + "\t".join(SPECIALS), "#alphabet\t" + "\t".join(_escape(c) for c in self.alphabet)]
        lines += [f"{_escape(a)}\t{_escape(b)}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        lines = text.split("\n")
        head = lines[0].split("\t")
        if head[0] != "#specials" or tuple(head[1:]) != SPECIALS:
            raise ValueError(f"vocab header does not list the expected specials {SPECIALS}")
        alpha = lines[1].split("\t")
        if alpha[0] != "#alphabet":
            raise ValueError("vocab second line must be the #alphabet header")
        merges = []
        for lineno, line in enumerate(lines[2:], start=3):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"vocab line {lineno}: expected 'left<TAB>right'")
            merges.append((_unescape(parts[0]), _unescape(parts[1])))
        return cls([_unescape(c) for c in alpha[1:] if c != ""], merges)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def bpe_train(corpus: Sequence[str], target_vocab: int) -> Vocab:
    """Learn merges greedily by pair frequency; ties go to the lexicographically smallest pair.

    Stops early when no adjacent pair remains.
    """
    if not corpus:
        raise ValueError("bpe_train needs a non-empty corpus")
    alphabet = sorted({ch for text in corpus for ch in text})
    for ch in ("\t", "\n"):
        if ch in alphabet:
            raise ValueError(f"corpus character {ch!r} is not supported by the vocab file format")
    floor = len(alphabet) + len(SPECIALS)
    if target_vocab <= floor:
        raise ValueError(
            f"target_vocab {target_vocab} must exceed alphabet ({len(alphabet)}) + specials ({len(SPECIALS)}) = {floor}"
        )
    word_freq = Counter(w for text in corpus for w in _pretokenize(text))
    words = [(list(w), n) for w, n in sorted(word_freq.items())]
    merges: list[tuple[str, str]] = []
    while floor + len(merges) < target_vocab:
        pairs: Counter = Counter()
        for parts, n in words:
            for a, b in zip(parts, parts[1:]):
                pairs[(a, b)] += n
        if not pairs:
            break
        top = max(pairs.values())
        pair = min(p for p, c in pairs.items() if c == top)
        merges.append(pair)
        joined = pair[0] + pair[1]
        for parts, _ in words:
            i = 0
            while i < len(parts) - 1:
                if parts[i] == pair[0] and parts[i + 1] == pair[1]:
                    parts[i : i + 2] = [joined]
                i += 1
    return Vocab(alphabet, merges)


@dataclass
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray
    mlm_labels: np.ndarray | None = None

    @property
    def length(self) -> int:
        return int(self.mask.sum())

    @property
    def content_positions(self) -> np.ndarray:
        return np.arange(1, self.length - 1)


def bpe_encode(text: str, vocab: Vocab, max_len: int = MAX_TEXT_LEN) -> TokenSequence:
    if max_len < 2:
        raise ValueError("max_len must leave room for start and end tokens")
    content = vocab.encode_ids(text)[: max_len - 2]
    ids = [BOS_ID, *content, EOS_ID]
    n = len(ids)
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[:n] = ids
    mask = np.zeros(max_len, dtype=bool)
    mask[:n] = True
    return TokenSequence(out, mask)


def apply_mlm_masking(
    seq: TokenSequence,
    rng: np.random.Generator,
    vocab_size: int,
    rate: float = 0.15,
    mask_fraction: float = MASK_FRACTION,
    random_fraction: float = RANDOM_FRACTION,
) -> TokenSequence:
    """Select content tokens with probability ``rate`` (at least one), then 80/10/10 replace.

    Only text is touched; the paired image never passes through here.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must lie in (0, 1), got {rate}")
    pos = seq.content_positions
    if pos.size == 0:
        raise ValueError("sequence has no content tokens to mask")
    chosen = pos[rng.random(pos.size) < rate]
    if chosen.size == 0:
        chosen = pos[[rng.integers(pos.size)]]
    ids = seq.ids.copy()
    labels = np.full_like(seq.ids, LABEL_IGNORE)
    labels[chosen] = seq.ids[chosen]
    action = rng.random(chosen.size)
    to_mask = chosen[action < mask_fraction]
    to_rand = chosen[(action >= mask_fraction) & (action < mask_fraction + random_fraction)]
    ids[to_mask] = MASK_ID
    ids[to_rand] = rng.integers(len(SPECIALS), vocab_size, size=to_rand.size)
    return TokenSequence(ids, seq.mask.copy(), labels)


# -- synthetic scenes ------------------------------------------------------

DEFAULT_PALETTE = ("red", "green", "blue")
DEFAULT_SHAPES = ("square", "circle", "cross")
COLOR_RGB = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.9, 0.1),
    "blue": (0.1, 0.2, 1.0),
    "yellow": (1.0, 0.9, 0.1),
    "white": (1.0, 1.0, 1.0),
    "purple": (0.6, 0.1, 0.8),
    "orange": (1.0, 0.5, 0.0),
    "cyan": (0.0, 0.9, 0.9),
}


@dataclass(frozen=True)
class Scene:
    """``cells[r][c]`` is ``None`` or a ``(color, shape)`` pair."""

    grid: int
    cells: tuple

    def objects(self):
        for r in range(self.grid):
            for c in range(self.grid):
                if self.cells[r][c] is not None:
                    yield r, c, self.cells[r][c]

    def caption(self) -> str:
        return "; ".join(f"{color} {shape} at {r} {c}" for r, c, (color, shape) in self.objects())

    def encode(self) -> str:
        return "|".join(
            ",".join("." if cell is None else f"{cell[0]}:{cell[1]}" for cell in row) for row in self.cells
        )

    @classmethod
    def decode(cls, text: str) -> "Scene":
        rows = [tuple(None if x == "." else tuple(x.split(":")) for x in row.split(",")) for row in text.split("|")]
        return cls(len(rows), tuple(rows))

    def render(self, image_size: int = 16, channels: int = 3) -> np.ndarray:
        return render_scene(self, image_size, channels)


@dataclass
class SyntheticPair:
    pair_id: int
    scene: Scene
    caption: str

    def image(self, image_size: int = 16, channels: int = 3) -> np.ndarray:
        return self.scene.render(image_size, channels)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape == "square":
        m = (np.abs(yy - c) <= size * 0.35) & (np.abs(xx - c) <= size * 0.35)
    elif shape == "circle":
        m = (yy - c) ** 2 + (xx - c) ** 2 <= (size * 0.4) ** 2
    elif shape == "cross":
        m = (np.abs(yy - c) <= size * 0.15) | (np.abs(xx - c) <= size * 0.15)
    elif shape == "triangle":
        m = (yy >= size * 0.15) & (np.abs(xx - c) <= (yy - size * 0.15) * 0.6)
    else:
        # unknown shapes get a deterministic hashed pattern
        seed = sum(map(ord, shape))
        m = np.random.default_rng(seed).random((size, size)) < 0.5
    return m


def render_scene(scene: Scene, image_size: int = 16, channels: int = 3) -> np.ndarray:
    if image_size % scene.grid:
        raise ValueError(f"image size {image_size} not divisible by grid {scene.grid}")
    cell = image_size // scene.grid
    img = np.zeros((image_size, image_size, channels))
    for r, c, (color, shape) in scene.objects():
        rgb = COLOR_RGB.get(color)
        if rgb is None:
            seed = sum(map(ord, color))
            rgb = tuple(np.random.default_rng(seed).random(3))
        rgb = np.resize(np.asarray(rgb, dtype=float), channels)
        m = _shape_mask(shape, cell)
        img[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell][m] = rgb
    return img


def scene_count(grid: int, n_colors: int, n_shapes: int) -> int:
    """Number of non-empty scenes."""
    return (1 + n_colors * n_shapes) ** (grid * grid) - 1


def scene_from_index(index: int, grid: int, palette: Sequence[str], shapes: Sequence[str]) -> Scene:
    base = 1 + len(palette) * len(shapes)
    rows = []
    for _ in range(grid):
        row = []
        for _ in range(grid):
            index, digit = divmod(index, base)
            if digit == 0:
                row.append(None)
            else:
                row.append((palette[(digit - 1) // len(shapes)], shapes[(digit - 1) % len(shapes)]))
        rows.append(tuple(row))
    return Scene(grid, tuple(rows))


def generate_synthetic_pairs(
    n: int,
    grid: int = 2,
    palette: Sequence[str] = DEFAULT_PALETTE,
    shapes: Sequence[str] = DEFAULT_SHAPES,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> list[SyntheticPair]:
    """Sample ``n`` distinct non-empty scenes without replacement, in draw order."""
    total = scene_count(grid, len(palette), len(shapes))
    if n > total:
        raise ValueError(f"requested {n} scenes but only {total} distinct non-empty scenes exist")
    if rng is None:
        from .rng import make_rng

        rng = make_rng(seed, "data")
    picks = rng.choice(total, size=n, replace=False) + 1
    out = []
    for i, idx in enumerate(picks):
        scene = scene_from_index(int(idx), grid, palette, shapes)
        out.append(SyntheticPair(i, scene, scene.caption()))
    return out


def dump_corpus(pairs: Sequence[SyntheticPair]) -> str:
    return "".join(f"{p.pair_id}\t{p.scene.encode()}\t{p.caption}\n" for p in pairs)


def load_corpus(text: str) -> list[SyntheticPair]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"corpus line {lineno}: expected pair_id<TAB>scene<TAB>caption")
        out.append(SyntheticPair(int(parts[0]), Scene.decode(parts[1]), parts[2]))
    return out
