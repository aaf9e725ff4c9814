"""Parameter initialisation and the ``.lcnw`` / ``.lct`` binary container.

Layout (all integers little-endian)::

    "LCNW"                      4-byte magic
    version        u32          currently 1
    count          u32          number of tensors
    count x {
        name_len   u32
        name       name_len bytes, UTF-8
        dtype      u8           0 = float32
        ndim       u8
        dims       ndim x u32
        payload    4 * prod(dims) bytes, little-endian float32
    }

The file must end exactly after the last payload.  A ``.lct`` file is the
same container holding a single tensor named ``data``.
"""

from __future__ import annotations

import math
import os
import struct
from typing import Mapping

import numpy as np

from .errors import CorruptFileError, ShapeMismatchError

MAGIC = b"LCNW"
VERSION = 1
DTYPE_F32 = 0
TENSOR_NAME = "data"

_U32 = struct.Struct("<I")
_LE_F32 = np.dtype("<f4")


def init_params(model, seed: int = 0):
    """Fill ``model.params`` deterministically from ``seed``; returns ``model``.

    Conv weights (SE transforms included) draw from N(0, 2/fan_out), FC
    weights from N(0, 0.01**2); biases and BN shifts are 0, BN scales 1,
    running statistics start at mean 0 / variance 1.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for spec in model.param_specs():
        if spec.role == "conv":
            value = rng.normal(0.0, math.sqrt(2.0 / spec.fan_out), spec.shape)
        elif spec.role == "linear":
            value = rng.normal(0.0, 0.01, spec.shape)
        elif spec.role in ("bn_gamma", "bn_var"):
            value = np.ones(spec.shape)
        else:
            value = np.zeros(spec.shape)
        if spec.name in params:
            raise ValueError(f"duplicate parameter name {spec.name!r}")
        params[spec.name] = value.astype(np.float32)
    model.params = params
    return model


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype != np.float32:
            raise TypeError(f"tensor {name!r} has dtype {arr.dtype}; only float32 is storable")
        if arr.ndim < 1 or arr.ndim > 255 or 0 in arr.shape:
            raise ShapeMismatchError(f"tensor {name!r} has unstorable shape {arr.shape}")
        raw = name.encode("utf-8")
        chunks += [_U32.pack(len(raw)), raw, bytes([DTYPE_F32, arr.ndim])]
        chunks += [_U32.pack(d) for d in arr.shape]
        chunks.append(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    return b"".join(chunks)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    """Parse a container, raising :class:`CorruptFileError` on any malformation."""
    pos = 0
    current: str | None = None

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if n > len(buf) - pos:
            raise CorruptFileError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos, current)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    def u32(what: str) -> int:
        return _U32.unpack(take(4, what))[0]

    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CorruptFileError("bad magic", 0)
    pos = 4
    version = u32("version")
    if version != VERSION:
        raise CorruptFileError(f"unsupported version {version}", 4)
    count = u32("tensor count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        current = None
        start = pos
        raw = take(u32("name length"), "name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFileError("tensor name is not valid UTF-8", start + 4) from None
        if name in out:
            raise CorruptFileError("duplicate tensor name", start, name)
        current = name
        dtype_at = pos
        dtype, ndim = take(2, "dtype/ndim")
        if dtype != DTYPE_F32:
            raise CorruptFileError(f"unknown dtype code {dtype}", dtype_at, name)
        if ndim == 0:
            raise CorruptFileError("tensor has zero dimensions", dtype_at + 1, name)
        dims_at = pos
        dims = [u32("dims") for _ in range(ndim)]
        if 0 in dims:
            raise CorruptFileError(f"tensor has a zero extent {dims}", dims_at, name)
        payload = take(4 * math.prod(dims), "payload")
        out[name] = np.frombuffer(payload, dtype=_LE_F32).astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise CorruptFileError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return out


def write_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    data = encode_tensors(tensors)
    with open(path, "wb") as f:
        f.write(data)


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_tensors(f.read())


def save_weights(model, path: str | os.PathLike) -> None:
    write_tensors(path, model.params)


def load_weights(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return read_tensors(path)


def assign_weights(model, tensors: Mapping[str, np.ndarray]) -> None:
    """Replace ``model.params`` with ``tensors`` after checking names and shapes."""
    expected = {s.name: s.shape for s in model.param_specs()}
    missing = sorted(expected.keys() - tensors.keys())
    extra = sorted(tensors.keys() - expected.keys())
    if missing or extra:
        raise ShapeMismatchError(f"weight names do not match the model: missing={missing[:5]} unexpected={extra[:5]}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise ShapeMismatchError(f"{name}: file has shape {tuple(tensors[name].shape)}, model expects {shape}")
    model.params = {name: np.array(tensors[name], dtype=np.float32) for name in expected}


def save_tensor(path: str | os.PathLike, tensor: np.ndarray) -> None:
    write_tensors(path, {TENSOR_NAME: tensor})


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    tensors = read_tensors(path)
    if list(tensors) != [TENSOR_NAME]:
        raise CorruptFileError(f"expected exactly one tensor named {TENSOR_NAME!r}, found {list(tensors)}", 8)
    return tensors[TENSOR_NAME]
