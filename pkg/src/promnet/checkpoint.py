"""PRCK checkpoint container.

Layout (little-endian)::

    "PRCK" | u32 version | u64 table offset
    table: u32 count, then per entry
        u32 name length | utf-8 name | u8 dtype | u8 rank | u64 extents[rank] | u64 offset | u64 length
    payload blobs (offsets are absolute)
    u32 CRC32 of every preceding byte

Entries are ``param/<name>``, ``buffer/<layer>.mean|var``, ``rmsprop/<name>``
and one ``__meta__`` uint8 blob holding sorted-key JSON (model kind and
config, optimizer hyperparameters, epoch, RNG state).
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import FormatError
from .model import SequenceModel, build_model
from .optim import RmsPropState

MAGIC = b"PRCK"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}
META = "__meta__"


class TruncatedError(FormatError):
    """File ends before the structure it declares."""


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    try:
        return _CODES[np.dtype(dt)]
    except KeyError:
        raise FormatError(f"cannot store dtype {arr.dtype} in a checkpoint") from None


def pack_entries(entries: dict[str, np.ndarray]) -> bytes:
    names = list(entries)
    table_len = 4
    for name in names:
        table_len += 4 + len(name.encode("utf-8")) + 2 + 8 * entries[name].ndim + 16
    offset = _HEADER.size + table_len
    table = bytearray(struct.pack("<I", len(names)))
    blobs = []
    for name in names:
        arr = entries[name]
        code = _dtype_code(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        raw = name.encode("utf-8")
        table += struct.pack("<I", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
        table += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        table += struct.pack("<QQ", offset, len(blob))
        blobs.append(blob)
        offset += len(blob)
    body = _HEADER.pack(MAGIC, VERSION, _HEADER.size) + bytes(table) + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def unpack_entries(data: bytes, source="<bytes>") -> dict[str, np.ndarray]:
    if len(data) < _HEADER.size:
        raise TruncatedError(f"{source}: truncated checkpoint header ({len(data)} bytes)")
    magic, version, table_at = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    end = len(data) - 4

    def need(pos, n, what):
        if pos + n > end:
            raise TruncatedError(f"{source}: truncated checkpoint while reading {what}")

    need(table_at, 4, "parameter table")
    (count,) = struct.unpack_from("<I", data, table_at)
    pos = table_at + 4
    specs = []
    for _ in range(count):
        need(pos, 4, "parameter table")
        (n,) = struct.unpack_from("<I", data, pos)
        need(pos + 4, n + 2, "parameter table")
        name = data[pos + 4:pos + 4 + n].decode("utf-8")
        code, rank = struct.unpack_from("<BB", data, pos + 4 + n)
        pos += 6 + n
        need(pos, 8 * rank + 16, f"table entry {name!r}")
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        off, length = struct.unpack_from("<QQ", data, pos + 8 * rank)
        pos += 8 * rank + 16
        if code not in _DTYPES:
            raise FormatError(f"{source}: entry {name!r} has unknown dtype code {code}")
        need(off, length, f"payload of {name!r}")
        specs.append((name, _DTYPES[code], shape, off, length))
    stored = struct.unpack_from("<I", data, end)[0]
    crc = zlib.crc32(data[:end])
    if crc != stored:
        raise FormatError(f"{source}: CRC32 mismatch over header/table/payload "
                          f"(stored {stored:08x}, computed {crc:08x})")
    out = {}
    for name, dtype, shape, off, length in specs:
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != length:
            raise FormatError(f"{source}: entry {name!r} length {length} does not match shape {shape}")
        out[name] = np.frombuffer(data, dtype=dtype, count=length // dtype.itemsize, offset=off).reshape(shape).copy()
    return out


def _meta_blob(meta: dict) -> np.ndarray:
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8)


def checkpoint_entries(net: SequenceModel, optimizer_state: RmsPropState | None = None,
                       extra: dict | None = None) -> dict[str, np.ndarray]:
    meta = {"kind": net.kind, "config": net.config.to_dict(), "param_count": net.parameter_count()}
    if optimizer_state is not None:
        meta["optimizer"] = optimizer_state.hyperparameters()
    meta.update(extra or {})
    entries = {META: _meta_blob(meta)}
    for name, node in net.params.items():
        entries[f"param/{name}"] = node.value
    for layer, stats in net.buffers.items():
        entries[f"buffer/{layer}.mean"] = stats.mean
        entries[f"buffer/{layer}.var"] = stats.var
    if optimizer_state is not None:
        for name, ms in optimizer_state.ms.items():
            entries[f"rmsprop/{name}"] = ms
    return entries


def save_checkpoint(net: SequenceModel, optimizer_state: RmsPropState | None, path: str | os.PathLike,
                    extra: dict | None = None) -> int:
    """Write a checkpoint; ``extra`` lands in the metadata (epoch, rng state...). Returns bytes written."""
    data = pack_entries(checkpoint_entries(net, optimizer_state, extra))
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path: str | os.PathLike) -> tuple[SequenceModel, RmsPropState | None, dict]:
    """Returns ``(net, optimizer_state or None, metadata)``."""
    entries = unpack_entries(Path(path).read_bytes(), path)
    if META not in entries:
        raise FormatError(f"{path}: checkpoint has no {META} entry")
    meta = json.loads(entries[META].tobytes().decode("utf-8"))
    dtypes = {a.dtype for k, a in entries.items() if k.startswith("param/")}
    if len(dtypes) != 1:
        raise FormatError(f"{path}: parameters have mixed dtypes {sorted(map(str, dtypes))}")
    with T.precision("float64" if dtypes.pop() == np.float64 else "float32"):
        net = build_model(meta["kind"], meta["config"])
    for name, node in net.params.items():
        key = f"param/{name}"
        if key not in entries:
            raise FormatError(f"{path}: missing parameter {name!r}")
        if entries[key].shape != node.shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {entries[key].shape}, model expects {node.shape}")
        node.value = entries[key]
    for layer, stats in net.buffers.items():
        stats.mean = entries[f"buffer/{layer}.mean"]
        stats.var = entries[f"buffer/{layer}.var"]
    state = None
    if "optimizer" in meta:
        hyper = meta["optimizer"]
        state = RmsPropState(hyper["lr"], hyper["decay"], hyper["eps"], steps=hyper.get("steps", 0))
        state.ms = {name: entries[f"rmsprop/{name}"] for name in net.params}
    return net, state, meta


def parameter_payload_bytes(net: SequenceModel) -> int:
    return sum(n.value.nbytes for n in net.params.values())
