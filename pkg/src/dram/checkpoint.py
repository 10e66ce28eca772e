"""Versioned binary checkpoints.

Layout: magic 'DRCK', u32 version, u32 header length, JSON header, raw
little-endian float64 tensor payload. The header stores the resolved config
text and its hash; loading refuses a checkpoint whose config hash differs
from the caller's unless explicitly overridden. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .data import FormatError

MAGIC = b"DRCK"
VERSION = 1


class CheckpointMismatch(ValueError):
    """Checkpoint config hash differs from the active configuration."""


def save_checkpoint(path, params, opt_state, epoch: int, config_text: str,
                    config_hash: str, rng_state: dict | None = None) -> None:
    tensors = dict(params.arrays())
    for name, v in opt_state.velocity.items():
        tensors[f"velocity/{name}"] = v
    manifest = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        tensors[name] = arr
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "epoch": epoch,
        "config_hash": config_hash,
        "config_text": config_text,
        "learning_rate": opt_state.learning_rate,
        "momentum": opt_state.momentum,
        "lr_decay": opt_state.lr_decay,
        "rng_state": rng_state,
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for name, arr in tensors.items():
            f.write(arr.tobytes())


def load_checkpoint(path, expect_hash: str | None = None, allow_mismatch: bool = False) -> dict:
    """Returns {params: {name: array}, velocity, epoch, config_text, config_hash,
    learning_rate, momentum, lr_decay, rng_state}."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} at offset 0 (want {MAGIC!r})")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        hbytes = f.read(hlen)
        if len(hbytes) < hlen:
            raise FormatError(f"truncated checkpoint header: {len(hbytes)} of {hlen} bytes")
        header = json.loads(hbytes.decode("utf8"))
        payload = f.read()
    need = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        need = max(need, entry["offset"] + 8 * count)
    if len(payload) < need:
        raise FormatError(f"truncated checkpoint payload: {len(payload)} bytes, need {need}")
    if expect_hash is not None and header["config_hash"] != expect_hash:
        if not allow_mismatch:
            raise CheckpointMismatch(
                f"checkpoint config hash {header['config_hash']} != active {expect_hash}; "
                "pass the override flag to load anyway"
            )
    params, velocity = {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape).copy()
        if entry["name"].startswith("velocity/"):
            velocity[entry["name"][len("velocity/"):]] = arr
        else:
            params[entry["name"]] = arr
    return {
        "params": params,
        "velocity": velocity,
        "epoch": header["epoch"],
        "config_text": header["config_text"],
        "config_hash": header["config_hash"],
        "learning_rate": header["learning_rate"],
        "momentum": header["momentum"],
        "lr_decay": header["lr_decay"],
        "rng_state": header.get("rng_state"),
    }


def describe_checkpoint(path) -> str:
    """Human-readable summary for inspect-ckpt."""
    ck = load_checkpoint(path)
    lines = [
        f"epoch: {ck['epoch']}",
        f"config_hash: {ck['config_hash']}",
        f"learning_rate: {ck['learning_rate']}",
        f"momentum: {ck['momentum']} lr_decay: {ck['lr_decay']}",
        f"parameters: {sum(a.size for a in ck['params'].values())} in {len(ck['params'])} tensors",
    ]
    for name in sorted(ck["params"]):
        lines.append(f"  {name} {tuple(ck['params'][name].shape)}")
    if ck["velocity"]:
        lines.append(f"velocity slots: {len(ck['velocity'])}")
    lines.append("config:")
    for ln in ck["config_text"].strip().splitlines():
        lines.append(f"  {ln}")
    return "\n".join(lines)
