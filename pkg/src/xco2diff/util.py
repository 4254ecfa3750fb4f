"""Shared helpers: seeded RNG substreams, config hashing, binary I/O primitives."""
from __future__ import annotations

import hashlib
import json
import struct
from typing import Any

import numpy as np

# Stream labels are folded into the SeedSequence entropy so that e.g. the
# scene stream and the noise stream of the same index never collide.
_STREAM_LABELS = {
    "scene": 0x5C3,
    "noise": 0x401,
    "eof": 0xE0F,
    "train": 0x7A1,
    "sample": 0x5A9,
    "discrepancy": 0xD15,
    "init": 0x111,
}


def substream(master_seed: int, label: str, *indices: int) -> np.random.Generator:
    """Return an independent, reproducible generator for one unit of work.

    The stream depends only on (master_seed, label, indices), never on how
    many other streams were created before it, so parallel and serial
    schedules produce identical draws.
    """
    if label not in _STREAM_LABELS:
        raise ValueError(f"unknown stream label {label!r}")
    entropy = (int(master_seed), _STREAM_LABELS[label]) + tuple(int(i) for i in indices)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and fixed separators so hashes are stable."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Little-endian binary primitives shared by the artifact file formats.

def write_u32(f, *values: int) -> None:
    for v in values:
        if not 0 <= v < 2**32:
            raise ValueError(f"u32 out of range: {v}")
        f.write(struct.pack("<I", v))


def read_u32(f, n: int = 1):
    raw = f.read(4 * n)
    if len(raw) != 4 * n:
        raise ValueError("truncated file: expected u32 block")
    vals = struct.unpack(f"<{n}I", raw)
    return vals[0] if n == 1 else vals


def write_f64(f, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_f64(f, count: int) -> np.ndarray:
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated file: expected f64 block")
    return np.frombuffer(raw, dtype="<f8", count=count).astype(np.float64)
