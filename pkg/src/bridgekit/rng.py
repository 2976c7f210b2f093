"""Seeded random streams.

All randomness comes from Philox4x64-10 (counter-based), keyed by
``(seed, stream_id)`` with the counter starting at zero.  Stream ids are
fixed small integers so a seed means the same thing in every run.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"data": 1, "init": 2, "train": 3, "eval": 4, "test": 5}


def make_rng(seed: int, stream: str | int = "train") -> np.random.Generator:
    sid = STREAMS[stream] if isinstance(stream, str) else int(stream)
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, sid], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of a generator's state."""
    return _jsonable(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    st = dict(state)
    st["state"] = {k: np.array(v, dtype=np.uint64) for k, v in state["state"].items()}
    st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
    bg.state = st
    return np.random.Generator(bg)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(x) for x in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
