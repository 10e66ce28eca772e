"""Seedable counter-based random streams.

Streams are keyed Philox generators: the key is a stable hash of the
(seed, label, indices...) tuple, so any stream can be reconstructed in
isolation. Per-sample dataset streams and per-decode Monte Carlo streams
come from here; thread or batch scheduling cannot change what a given
stream produces.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(*parts) -> int:
    """Stable 128-bit key from a tuple of ints and strings."""
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:16], "little")


def stream(*parts) -> np.random.Generator:
    """Independent generator for the given key tuple."""
    return np.random.Generator(np.random.Philox(key=stream_key(*parts)))


def sample_stream(base_seed: int, purpose: str, index: int) -> np.random.Generator:
    """Per-sample stream: hash(base_seed, purpose, index)."""
    return stream(base_seed, purpose, index)


def generator_state(gen: np.random.Generator) -> dict:
    """JSON-safe snapshot of a generator's bit-generator state."""

    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__nd__": v.dtype.str, "data": v.tolist()}
        if isinstance(v, np.integer):
            return int(v)
        return v

    return clean(gen.bit_generator.state)


def restore_generator(state: dict) -> np.random.Generator:
    """Rebuild a generator from a `generator_state` snapshot."""

    def undo(v):
        if isinstance(v, dict):
            if "__nd__" in v:
                return np.array(v["data"], dtype=np.dtype(v["__nd__"]))
            return {k: undo(x) for k, x in v.items()}
        return v

    st = undo(state)
    bg_cls = getattr(np.random, st["bit_generator"])
    bg = bg_cls()
    bg.state = st
    return np.random.Generator(bg)
