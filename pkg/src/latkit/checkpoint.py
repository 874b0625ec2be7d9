"""Binary model checkpoints.

Layout, all integers little-endian u32::

    b"LATM" | version | H W C num_classes conv1_kernel conv1_filters
    conv2_kernel conv2_filters dense_units | n_tensors
    then per tensor, in PARAM_NAMES order: rank | dims... | f32 payload
"""

from __future__ import annotations

import hashlib
import io
import os
import struct

import numpy as np

from latkit.errors import BadMagicError, InputError, ParseError, TruncatedError
from latkit.tensor_core import PARAM_NAMES, Architecture, Model

MAGIC = b"LATM"
VERSION = 1


def _arch_fields(arch: Architecture):
    h, w, c = arch.input_shape
    return (h, w, c, arch.num_classes, arch.conv1_kernel, arch.conv1_filters,
            arch.conv2_kernel, arch.conv2_filters, arch.dense_units)


def model_to_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    fields = _arch_fields(model.arch)
    buf.write(struct.pack(f"<I{len(fields)}II", VERSION, *fields, len(PARAM_NAMES)))
    for name in PARAM_NAMES:
        arr = np.asarray(model.params[name], dtype="<f4")
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        return struct.unpack(f"<{count}I", self.take(4 * count))


def model_from_bytes(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a LATM checkpoint")
    (version,) = r.u32()
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    h, w, c, classes, k1, f1, k2, f2, units = r.u32(9)
    arch = Architecture((h, w, c), classes, k1, f1, k2, f2, units)
    (count,) = r.u32()
    if count != len(PARAM_NAMES):
        raise ParseError(f"expected {len(PARAM_NAMES)} tensors, found {count}")
    params = {}
    for name in PARAM_NAMES:
        (rank,) = r.u32()
        dims = r.u32(rank)
        size = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise ParseError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return Model(arch, params)


def save_model(model: Model, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(model_to_bytes(model))
    os.replace(tmp, path)


def load_model(path) -> Model:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    return model_from_bytes(data)


def fingerprint(model: Model) -> str:
    """Short content hash, used to tie adversarial sets to the model they attacked."""
    return hashlib.sha256(model_to_bytes(model)).hexdigest()[:16]
