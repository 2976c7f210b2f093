"""INI-style run configuration: ``[section]`` headers and ``key = value`` lines.

Every key has a default, so an empty file is a valid config.  Unknown keys,
bad values and cross-field violations raise :class:`ConfigError` carrying the
offending line number (0 when the problem is not tied to one line).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from typing import Any

from .bridge import BRIDGE_TAGS
from .crossmodal import FUSION_MODES
from .model import ModelConfig

TASKS = ("pretrain", "itm_eval", "retrieval", "vqa_toy", "ve_toy")
DTYPES = ("float64", "float32")
NORMS = ("pre", "post")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass
class DataConfig:
    grid: int = 2
    palette: tuple = ("red", "green", "blue")
    shapes: tuple = ("square", "circle", "cross")
    n_pairs: int = 64
    n_heldout: int = 16
    seed: int = 0
    vocab_size: int = 200
    mlm_rate: float = 0.15


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 64
    lr: float = 4e-4
    cross_lr_mult: float = 5.0
    head_lr_mult: float = 5.0
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    temperature: float = 0.07
    top_k: int = 8
    dtype: str = "float32"
    eval_every: int = 0
    seed: int = 0


@dataclass
class ModelSection:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    max_text_len: int = 50
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


@dataclass
class RunSection:
    task: str = "pretrain"
    output_dir: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSection = field(default_factory=RunSection)

    SECTIONS = ("model", "data", "train", "run")

    def model_config(self, num_classes: int = 0) -> ModelConfig:
        m = self.model
        return ModelConfig(vocab_size=self.data.vocab_size, num_classes=num_classes,
                           **{f.name: getattr(m, f.name) for f in fields(m)})

    def hash(self) -> str:
        """Digest of everything that affects results (the output directory is excluded)."""
        cfg = replace(self, run=replace(self.run, output_dir=""))
        return hashlib.sha256(render_config(cfg).encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        text = render_config(self)
        for dotted, value in overrides.items():
            text += f"\n[{dotted.split('.', 1)[0]}]\n{dotted.split('.', 1)[1]} = {value}\n"
        return parse_config(text, allow_repeat=True)


def _field_types(section) -> dict[str, Any]:
    return {f.name: f for f in fields(section)}


def _coerce(name: str, default, fld, raw: str, line: int):
    kind = fld.type if isinstance(fld.type, str) else str(fld.type)
    raw = raw.strip()
    try:
        if "tuple" in kind:
            items = tuple(x.strip() for x in raw.split(",") if x.strip())
            if not items:
                raise ValueError("empty list")
            return items
        if "None" in kind and raw.lower() in ("none", ""):
            return None
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind} ({exc})", line) from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, allow_repeat: bool = False) -> RunConfig:
    sections = {name: {} for name in RunConfig.SECTIONS}
    lines_of: dict[str, int] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            current = line[1:-1].strip()
            if current not in sections:
                raise ConfigError(f"unknown section [{current}]; expected one of {', '.join(RunConfig.SECTIONS)}", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if current is None:
            raise ConfigError("key outside any [section]", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        section_cls = type(getattr(RunConfig(), current))
        flds = _field_types(section_cls)
        if key not in flds:
            raise ConfigError(f"unknown key {key!r} in [{current}]; valid keys: {', '.join(flds)}", lineno)
        if key in sections[current] and not allow_repeat:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", lineno)
        sections[current][key] = _coerce(key, None, flds[key], value, lineno)
        lines_of[f"{current}.{key}"] = lineno
    cfg = RunConfig(
        model=ModelSection(**sections["model"]),
        data=DataConfig(**sections["data"]),
        train=TrainConfig(**sections["train"]),
        run=RunSection(**sections["run"]),
    )
    validate_config(cfg, lines_of)
    return cfg


def validate_config(cfg: RunConfig, lines_of: dict[str, int] | None = None) -> None:
    lines_of = lines_of or {}

    def fail(key, message):
        raise ConfigError(message, lines_of.get(key, 0))

    m, d, t = cfg.model, cfg.data, cfg.train
    if m.bridge not in BRIDGE_TAGS:
        fail("model.bridge", f"bridge {m.bridge!r} is not a valid variant tag; valid tags are {', '.join(BRIDGE_TAGS)}")
    if m.fusion_mode not in FUSION_MODES:
        fail("model.fusion_mode", f"fusion_mode must be one of {', '.join(FUSION_MODES)}")
    for key in ("visual_norm", "text_norm", "cross_norm"):
        if getattr(m, key) not in NORMS:
            fail(f"model.{key}", f"{key} must be 'pre' or 'post'")
    if cfg.run.task not in TASKS:
        fail("run.task", f"task must be one of {', '.join(TASKS)}")
    if t.dtype not in DTYPES:
        fail("train.dtype", f"dtype must be one of {', '.join(DTYPES)}")
    if m.image_size % d.grid:
        fail("data.grid", f"image_size {m.image_size} not divisible by grid {d.grid}")
    if not 0.0 < d.mlm_rate < 1.0:
        fail("data.mlm_rate", "mlm_rate must lie in (0, 1)")
    if d.n_pairs < 2:
        fail("data.n_pairs", "need at least 2 pairs")
    if t.steps < 0 or t.batch_size < 2:
        fail("train.batch_size", "steps must be >= 0 and batch_size >= 2")
    if not 0.0 <= t.warmup_fraction < 1.0:
        fail("train.warmup_fraction", "warmup_fraction must lie in [0, 1)")
    if m.n_internal is not None and m.n_external is not None and m.n_internal + m.n_external != m.cross_depth:
        fail("model.n_external", f"n_internal + n_external = {m.n_internal + m.n_external} != cross_depth {m.cross_depth}")
    try:
        cfg.model_config().validate()
    except ValueError as exc:
        fail("model.fusion_mode", str(exc))


def render_config(cfg: RunConfig) -> str:
    out = []
    for name in RunConfig.SECTIONS:
        section = getattr(cfg, name)
        out.append(f"[{name}]")
        out += [f"{f.name} = {_format(getattr(section, f.name))}" for f in fields(section)]
        out.append("")
    return "\n".join(out)


def normalize_config(text: str) -> str:
    return render_config(parse_config(text))


# -- sweep grids ------------------------------------------------------------

PRESET_GRIDS = {
    "bridge-tags": [{"model.bridge": tag} for tag in BRIDGE_TAGS],
    "depth": [{"model.cross_depth": str(n)} for n in (1, 2, 3, 4)],
    "fusion": [
        {"model.fusion_mode": "bridge"},
        {"model.fusion_mode": "mixed", "model.n_internal": "1", "model.n_external": "1"},
        {"model.fusion_mode": "external"},
        {"model.fusion_mode": "weighted_sum"},
    ],
}


def parse_grid(text: str) -> list[dict[str, str]]:
    """One override set per line: ``section.key = value; section.key = value``."""
    sets = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        overrides = {}
        for item in line.split(";"):
            item = item.strip()
            if not item:
                continue
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"grid entry {item!r} must look like section.key = value", lineno)
            key, value = (s.strip() for s in item.split("=", 1))
            overrides[key] = value
        sets.append(overrides)
    if not sets:
        raise ConfigError("grid has no override sets")
    return sets
