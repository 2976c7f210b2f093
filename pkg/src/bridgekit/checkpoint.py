"""Binary checkpoints: magic, header length, JSON header, then raw little-endian arrays.

Layout::

    b"BKCKPT\\x00\\x01"  | uint64 LE header length | UTF-8 JSON header | blobs

The header records the format version, the rendered run config and its hash,
the training step, the training RNG state, the tokenizer, and for every array
its name, shape, dtype and byte offset relative to the start of the blob area.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config, render_config
from .rng import restore_rng, rng_state
from .text import Vocab

MAGIC = b"BKCKPT\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return int(self.header["step"])

    @property
    def config(self) -> RunConfig:
        return parse_config(self.header["config"])

    @property
    def vocab(self) -> Vocab:
        return Vocab.loads(self.header["vocab"])


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        data = _le(np.asarray(arr)).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": np.dtype(arr.dtype).str.lstrip("<>|="),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    head = dict(header, format="bridgekit-checkpoint", version=VERSION, tensors=entries)
    raw = json.dumps(head, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16:16 + n].decode())
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 16 + n
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(buf):
            raise CheckpointError(f"{path}: truncated blob for {e['name']}")
        dt = np.dtype("<" + e["dtype"])
        arr = np.frombuffer(buf, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return Checkpoint(header, arrays)


def _param_names(trainer) -> dict[int, str]:
    return {id(p): name for name, p in trainer.model.named_parameters()}


def save_trainer(path, trainer) -> None:
    arrays = {f"param.{k}": v for k, v in trainer.model.state_dict().items()}
    arrays.update(trainer.opt.state_arrays(_param_names(trainer)))
    header = {
        "config": render_config(trainer.cfg),
        "config_hash": trainer.cfg.hash(),
        "step": trainer.step,
        "optimizer_step": trainer.opt.step_count,
        "rng": rng_state(trainer.rng),
        "vocab": trainer.data.vocab.dumps(),
    }
    write_checkpoint(path, header, arrays)


def load_trainer(path, cfg: RunConfig | None = None):
    """Rebuild a trainer from ``path``; with ``cfg``, its hash must match the stored one."""
    from .training import Trainer, build_dataset

    ckpt = read_checkpoint(path)
    stored = ckpt.config
    if cfg is not None and cfg.hash() != ckpt.header["config_hash"]:
        raise CheckpointError(
            f"config hash {cfg.hash()} does not match checkpoint {ckpt.header['config_hash']}; refusing to resume"
        )
    cfg = cfg or stored
    trainer = Trainer(cfg, build_dataset(cfg, ckpt.vocab))
    params = {k[len("param."):]: v for k, v in ckpt.arrays.items() if k.startswith("param.")}
    trainer.model.load_state_dict(params)
    trainer.opt.load_state_arrays(ckpt.arrays, _param_names(trainer))
    trainer.opt.step_count = int(ckpt.header["optimizer_step"])
    trainer.rng = restore_rng(ckpt.header["rng"])
    trainer.step = ckpt.step
    return trainer
