"""Versioned binary checkpoints.

Layout (little-endian)::

    magic       8 bytes  b"TQVLACK1"
    version     u32
    meta_len    u32, then meta_len bytes of UTF-8 JSON
    n_params    u32
    per param:  name_len u32, name, ndim u32, dims u32 * ndim, float64 * prod(dims)
    has_opt     u8
    if has_opt: step u64, lr, weight_decay, beta1, beta2, eps (float64 each),
                then for each param in the order above: m buffer, v buffer
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..validation import FormatVersionError
from .optim import OptimizerState

MAGIC = b"TQVLACK1"
VERSION = 1


def _write_array(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def dumps(params: dict, meta: dict | None = None, opt: OptimizerState | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    names = list(params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(params[name], dtype=np.float64)
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        _write_array(buf, arr)
    if opt is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<Q", opt.step))
        buf.write(struct.pack("<5d", opt.lr, opt.weight_decay, opt.beta1, opt.beta2, opt.eps))
        for name in names:
            _write_array(buf, opt.m[name])
            _write_array(buf, opt.v[name])
    return buf.getvalue()


def loads(blob: bytes):
    """Return (params, meta, optimizer_state_or_None)."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ValueError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise FormatVersionError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatVersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode())
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nl,) = struct.unpack("<I", take(4))
        name = bytes(take(nl)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    opt = None
    if bytes(take(1)) == b"\x01":
        (step,) = struct.unpack("<Q", take(8))
        lr, wd, b1, b2, eps = struct.unpack("<5d", take(40))
        opt = OptimizerState(lr, wd, b1, b2, eps, step)
        for name, arr in params.items():
            opt.m[name] = np.frombuffer(take(8 * arr.size), dtype="<f8").reshape(arr.shape).copy()
            opt.v[name] = np.frombuffer(take(8 * arr.size), dtype="<f8").reshape(arr.shape).copy()
    return params, meta, opt


def save(path, params, meta=None, opt=None):
    Path(path).write_bytes(dumps(params, meta, opt))


def load(path):
    return loads(Path(path).read_bytes())
