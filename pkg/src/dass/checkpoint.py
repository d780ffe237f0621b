"""Versioned binary checkpoint container.

Layout: 8-byte magic ``DASSCKPT``, one format version byte, a length-prefixed
JSON header (phase, config hash, RNG state, genotype, per-layer k, metadata),
then length-prefixed named tensors as little-endian float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DASSCKPT"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, truncated or mismatched checkpoint file."""


def rng_state_to_json(gen: np.random.Generator) -> dict:
    state = gen.bit_generator.state

    def clean(v):
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return clean(state)


def rng_state_from_json(state: dict) -> np.random.Generator:
    bg_name = state["bit_generator"]
    bg = getattr(np.random, bg_name)()

    def revive(v):
        if isinstance(v, list):
            return np.array(v, dtype=np.uint64)
        if isinstance(v, dict):
            return {k: revive(x) for k, x in v.items()}
        return v

    bg.state = revive(state)
    return np.random.Generator(bg)


def save_checkpoint(path: str | Path, header: dict,
                    tensors: list[tuple[str, np.ndarray]]):
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<B", FORMAT_VERSION)
    header = dict(header)
    header["n_tensors"] = len(tensors)
    header_bytes = json.dumps(header, sort_keys=True).encode()
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for name, arr in tensors:
        name_b = name.encode()
        arr32 = np.asarray(arr, dtype="<f4")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<B", arr32.ndim)
        for d in arr32.shape:
            blob += struct.pack("<I", d)
        payload = arr32.tobytes()
        blob += struct.pack("<Q", len(payload))
        blob += payload
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def load_checkpoint(path: str | Path,
                    expect_config_hash: str | None = None) -> tuple[dict, dict]:
    """Parse a checkpoint into (header, {name: float32 array}).

    A config-hash mismatch is refused, reporting both hashes.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(
                f"{path}: truncated checkpoint while reading {what} "
                f"(need {n} bytes at offset {pos}, file has {len(raw)})")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8, "magic")) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = struct.unpack("<B", take(1, "version"))[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(bytes(take(hlen, "header")).decode())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header JSON: {e.msg}") from None

    if expect_config_hash is not None and header.get("config_hash") != expect_config_hash:
        raise CheckpointError(
            f"{path}: config hash mismatch: checkpoint {header.get('config_hash')} "
            f"vs current {expect_config_hash}")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(header.get("n_tensors", 0)):
        (nlen,) = struct.unpack("<H", take(2, "tensor name length"))
        name = bytes(take(nlen, "tensor name")).decode()
        (ndim,) = struct.unpack("<B", take(1, "tensor rank"))
        shape = tuple(struct.unpack("<I", take(4, "tensor dim"))[0] for _ in range(ndim))
        (blen,) = struct.unpack("<Q", take(8, "tensor size"))
        data = np.frombuffer(take(blen, f"tensor {name}"), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after last tensor")
    return header, tensors
