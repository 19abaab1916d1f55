"""Single-file checkpoint container with bit-exact roundtrips.

Byte layout (all integers little-endian):

  offset 0   magic ``RASF`` (4 bytes)
  offset 4   format version, u32 (currently 1)
  offset 8   config length nc, u32
  offset 12  config blob, UTF-8 JSON, canonical key order
  then       tensor count, u32
  then       per tensor, sorted by name:
               name length u16, name UTF-8, dtype tag u8 (0 = float32),
               ndim u8, dims u32 each, absolute payload offset u64, nbytes u64
  then       zero padding so every tensor offset is 64-byte aligned
  payload    raw little-endian float32 tensor data

Saving the same model and config twice produces identical bytes, which is what
makes golden checkpoints pinnable. Loading validates magic, version, table
consistency and payload length before any tensor is materialized; corrupted
files never yield a partial model.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointFormatError, CheckpointShapeError, CheckpointTruncationError
from .model import DitModel, ModelConfig, param_shapes

MAGIC = b"RASF"
VERSION = 1
ALIGN = 64
DTYPE_TAGS = {0: np.dtype("<f4")}


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def save(model: DitModel, config: dict, path) -> None:
    """Write the model's tensors and a config dict to ``path``.

    The stored config always carries the model architecture under ``model``;
    extra keys from ``config`` ride along verbatim.
    """
    cfg_dict = dict(config)
    cfg_dict["model"] = model.cfg.to_dict()
    blob = json.dumps(cfg_dict, sort_keys=True).encode("utf-8")

    names = sorted(model.params)
    table = bytearray()
    header_fixed = len(MAGIC) + 4 + 4 + len(blob) + 4
    entry_sizes = []
    for name in names:
        arr = model.params[name]
        entry_sizes.append(2 + len(name.encode()) + 1 + 1 + 4 * arr.ndim + 8 + 8)
    payload_start = _align(header_fixed + sum(entry_sizes))

    offset = payload_start
    offsets = {}
    for name in names:
        arr = model.params[name]
        offsets[name] = offset
        offset = _align(offset + arr.size * 4)

    for name in names:
        arr = model.params[name]
        nb = name.encode("utf-8")
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<BB", 0, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", offsets[name], arr.size * 4)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(names)))
        fh.write(table)
        fh.write(b"\0" * (payload_start - header_fixed - len(table)))
        for name in names:
            fh.seek(offsets[name])
            data = np.ascontiguousarray(model.params[name], dtype="<f4")
            fh.write(data.tobytes())
        end = offsets[names[-1]] + model.params[names[-1]].size * 4 if names else payload_start
        fh.seek(0, 2)
        if fh.tell() < end:
            fh.write(b"\0" * (end - fh.tell()))


def _read_exact(data: bytes, start: int, size: int, what: str) -> bytes:
    if start + size > len(data):
        raise CheckpointTruncationError(f"file ends inside {what}")
    return data[start:start + size]


def load(path) -> tuple[DitModel, dict]:
    """Load a checkpoint; returns the model and the stored config dict."""
    with open(path, "rb") as fh:
        data = fh.read()

    if _read_exact(data, 0, 4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic bytes; not a RASF checkpoint")
    version, nc = struct.unpack("<II", _read_exact(data, 4, 8, "header"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    blob = _read_exact(data, 12, nc, "config blob")
    try:
        config = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"config blob is not valid JSON: {e}") from e

    pos = 12 + nc
    (count,) = struct.unpack("<I", _read_exact(data, pos, 4, "tensor count"))
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(data, pos, 2, "tensor table"))
        pos += 2
        name = _read_exact(data, pos, nlen, "tensor table").decode("utf-8")
        pos += nlen
        tag, ndim = struct.unpack("<BB", _read_exact(data, pos, 2, "tensor table"))
        pos += 2
        dims = struct.unpack(f"<{ndim}I", _read_exact(data, pos, 4 * ndim, "tensor table"))
        pos += 4 * ndim
        offset, nbytes = struct.unpack("<QQ", _read_exact(data, pos, 16, "tensor table"))
        pos += 16
        if tag not in DTYPE_TAGS:
            raise CheckpointShapeError(f"tensor {name}: unknown dtype tag {tag}")
        entries.append((name, DTYPE_TAGS[tag], dims, offset, nbytes))

    spans = []
    for name, dtype, dims, offset, nbytes in entries:
        expect = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if dims else dtype.itemsize
        if dims and expect != nbytes:
            raise CheckpointShapeError(f"tensor {name}: declared {nbytes} bytes for shape {dims}")
        if offset % ALIGN:
            raise CheckpointShapeError(f"tensor {name}: offset {offset} not {ALIGN}-byte aligned")
        if offset + nbytes > len(data):
            raise CheckpointTruncationError(f"tensor {name}: payload truncated")
        spans.append((offset, offset + nbytes, name))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointShapeError(f"tensors {n0} and {n1} overlap")

    if "model" not in config:
        raise CheckpointFormatError("config blob lacks the model architecture")
    cfg = ModelConfig.from_dict(config["model"])
    expected = param_shapes(cfg)
    params = {}
    for name, dtype, dims, offset, nbytes in entries:
        arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        params[name] = np.ascontiguousarray(arr.reshape(dims).astype(np.float32, copy=False))
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointShapeError(f"missing tensors: {missing[:4]}{'...' if len(missing) > 4 else ''}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointShapeError(f"tensor {name}: shape {params[name].shape} != {shape}")
    return DitModel(cfg=cfg, params=params), config
