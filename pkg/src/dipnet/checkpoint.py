"""Checkpoint persistence: little-endian binary, checksummed, versioned.

Layout: an 8-byte magic, a u32 format version, the sha256 digest of the
canonical config JSON, the config JSON itself, the epoch, an opaque RNG/state
JSON blob, two name-indexed tensor tables (parameters, momentum buffers),
and a trailing sha256 over everything before it. Round trips are
bit-identical so training resumes exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

MAGIC = b"DIPCKPT1"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    """Loaded config does not match what the caller expects."""


def _write_table(buf, table):
    buf.write(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name])
        dtype = arr.dtype.newbyteorder("<")
        if np.dtype(dtype) not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DTYPE_CODES[np.dtype(dtype)], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(dtype, copy=False).tobytes())


def _read_table(buf):
    (count,) = struct.unpack("<I", buf.read(4))
    table = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", buf.read(2))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        data = buf.read(nbytes)
        if len(data) != nbytes:
            raise CheckpointCorruptError(f"tensor {name} truncated")
        table[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return table


def save_checkpoint(path, config, epoch, params, momentum, rng_state=None):
    """Write the state dict; ``config`` and ``rng_state`` are JSON-able."""
    config_json = json.dumps(config, sort_keys=True).encode("utf-8")
    rng_json = json.dumps(rng_state if rng_state is not None else {},
                          sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(hashlib.sha256(config_json).digest())
    buf.write(struct.pack("<I", len(config_json)))
    buf.write(config_json)
    buf.write(struct.pack("<q", int(epoch)))
    buf.write(struct.pack("<I", len(rng_json)))
    buf.write(rng_json)
    _write_table(buf, {k: _as_array(v) for k, v in params.items()})
    _write_table(buf, {k: _as_array(v) for k, v in momentum.items()})
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def _as_array(v):
    return v.data if hasattr(v, "data") and isinstance(v.data, np.ndarray) else np.asarray(v)


def load_checkpoint(path):
    """Read and verify; returns (config, epoch, params, momentum, rng_state)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 + 32 + 32:
        raise CheckpointCorruptError("file too short")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError("checksum mismatch")
    buf = io.BytesIO(body)
    if buf.read(len(MAGIC)) != MAGIC:
        raise CheckpointCorruptError("bad magic")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {VERSION}")
    config_digest = buf.read(32)
    (clen,) = struct.unpack("<I", buf.read(4))
    config_json = buf.read(clen)
    if hashlib.sha256(config_json).digest() != config_digest:
        raise CheckpointCorruptError("config digest mismatch")
    config = json.loads(config_json)
    (epoch,) = struct.unpack("<q", buf.read(8))
    (rlen,) = struct.unpack("<I", buf.read(4))
    rng_state = json.loads(buf.read(rlen))
    params = _read_table(buf)
    momentum = _read_table(buf)
    return config, epoch, params, momentum, rng_state
