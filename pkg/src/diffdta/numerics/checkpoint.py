"""Binary checkpoint I/O.

Layout: magic bytes ``CODF``, format version (u16 LE), then one record per
entry sorted by name: name length (u32 LE), UTF-8 name, rank (u8), one u32
per dimension, then the values as 32-bit little-endian floats in row-major
order. Optimizer state uses the same layout in a sibling file (entries
``<name>.m`` / ``<name>.v`` plus a rank-0 ``adam.step``).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .params import ParamStore

MAGIC = b"CODF"
FORMAT_VERSION = 1


def write_entries(path, entries: dict[str, np.ndarray]) -> None:
    """Write named arrays sorted by name; values stored as float32 LE."""
    buf = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    for name in sorted(entries):
        arr = np.asarray(entries[name], dtype="<f4")  # tobytes() emits C order
        raw = name.encode("utf-8")
        buf.append(struct.pack("<I", len(raw)))
        buf.append(raw)
        buf.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.append(struct.pack("<I", d))
        buf.append(arr.tobytes())
    Path(path).write_bytes(b"".join(buf))


def read_entries(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic {data[:4]!r})")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    entries: dict[str, np.ndarray] = {}
    while pos < len(data):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        entries[name] = arr.copy()
    return entries


def save_params(path, store: ParamStore, meta: dict[str, float] | None = None) -> None:
    """Checkpoint parameter values, plus optional rank-0 ``meta.*`` entries."""
    entries = {name: t.data for name, t in store.items()}
    for key, val in (meta or {}).items():
        entries[f"meta.{key}"] = np.asarray(np.float32(val))
    write_entries(path, entries)


def load_params(path, store: ParamStore) -> dict[str, float]:
    """Load values into an already-built store; returns the ``meta.*`` entries."""
    entries = read_entries(path)
    meta = {}
    values = {}
    for name, arr in entries.items():
        if name.startswith("meta."):
            meta[name[len("meta."):]] = float(arr)
        else:
            values[name] = arr
    missing = [n for n in store.names() if n not in values]
    if missing:
        raise ValueError(f"{path}: checkpoint is missing parameters {missing[:5]}")
    store.load_values(values)
    return meta


def adam_sibling_path(ckpt_path) -> Path:
    return Path(str(ckpt_path) + ".adam")


def save_adam(ckpt_path, store: ParamStore) -> None:
    entries: dict[str, np.ndarray] = {"adam.step": np.asarray(np.float32(store.step))}
    for name in store.adam_m:
        entries[f"{name}.m"] = store.adam_m[name]
        entries[f"{name}.v"] = store.adam_v[name]
    write_entries(adam_sibling_path(ckpt_path), entries)


def load_adam(ckpt_path, store: ParamStore) -> None:
    entries = read_entries(adam_sibling_path(ckpt_path))
    store.reset_adam()
    store.step = int(entries.pop("adam.step"))
    for name, arr in entries.items():
        base, kind = name.rsplit(".", 1)
        target = store.adam_m if kind == "m" else store.adam_v
        target[base] = arr.astype(store.dtype)
