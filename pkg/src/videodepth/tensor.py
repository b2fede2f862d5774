"""Dense float32 tensors, a seeded RNG, and the DCRF binary tensor format.

Tensors are plain ``numpy.ndarray`` values with dtype float32 and C (row-major)
order. The helpers here enforce the shape rules shared by every module and
provide the on-disk format used for corpora, latents, checkpoints and
predictions.

DCRF layout (little-endian, no padding)::

    magic   4 bytes  b"DCRF"
    version u32      1
    dtype   u32      1 (= float32)
    ndim    u32
    dims    ndim x u64
    payload prod(dims) x f32, row-major
"""

from __future__ import annotations

import os
import struct
from typing import Sequence

import numpy as np

MAGIC = b"DCRF"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIII")
_MAX_ELEMENTS = 2**62


class ShapeError(ValueError):
    """Invalid dimension list or incompatible operand shapes."""


class TensorFileError(Exception):
    """Base class for DCRF decoding failures."""


class BadMagicError(TensorFileError):
    pass


class UnsupportedFormatError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class DimensionOverflowError(TensorFileError):
    pass


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ShapeError("shape must have at least one dimension")
    for d in dims:
        if d < 1:
            raise ShapeError(f"dimension sizes must be >= 1, got {list(dims)}")
    return dims


def tensor_new(shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    return np.full(check_shape(shape), fill, dtype=np.float32)


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


class Rng:
    """Seeded generator: numpy PCG64 bit stream, ziggurat normal sampler.

    Child streams use ``child_seed = SeedSequence(parent_seed, spawn_key=(i,))``
    reduced to one u64, so parallel workers never share a stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return self.gen.standard_normal(check_shape(shape)).astype(np.float32)

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] (inclusive)."""
        return int(self.gen.integers(low, high + 1))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.gen.uniform(low, high, size)

    def child(self, index: int) -> "Rng":
        return Rng(derive_seed(self.seed, index))


def derive_seed(parent_seed: int, index: int) -> int:
    ss = np.random.SeedSequence(int(parent_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def randn(rng: Rng, shape: Sequence[int]) -> np.ndarray:
    return rng.normal(shape)


# Elementwise ops: float32 in, float32 out, one IEEE rounding per operation.


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return np.add(a, b, dtype=np.float32)


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return np.multiply(a, b, dtype=np.float32)


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return np.multiply(a, np.float32(s), dtype=np.float32)


def lerp(a: np.ndarray, b: np.ndarray, w: float) -> np.ndarray:
    """``a + w * (b - a)`` evaluated in float32."""
    _same_shape(a, b)
    w = np.float32(w)
    return np.add(a, np.multiply(w, np.subtract(b, a, dtype=np.float32), dtype=np.float32), dtype=np.float32)


def save_tensor(path: str | os.PathLike, t: np.ndarray) -> None:
    t = as_tensor(t)
    dims = check_shape(t.shape)
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, len(dims))
    header += struct.pack(f"<{len(dims)}Q", *dims)
    with open(path, "wb") as f:
        f.write(header)
        f.write(t.astype("<f4", copy=False).tobytes(order="C"))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    return decode_tensor(raw, name=str(path))


def decode_tensor(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{name}: header truncated ({len(raw)} bytes)")
    magic, version, dtype, ndim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{name}: bad magic {magic!r}")
    if version != VERSION or dtype != DTYPE_F32:
        raise UnsupportedFormatError(f"{name}: version={version} dtype={dtype} not supported")
    if ndim == 0:
        raise UnsupportedFormatError(f"{name}: ndim must be >= 1")
    off = _HEADER.size
    if len(raw) < off + 8 * ndim:
        raise TruncatedPayloadError(f"{name}: dimension table truncated")
    dims = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    count = 1
    for d in dims:
        if d == 0:
            raise UnsupportedFormatError(f"{name}: zero-sized dimension")
        count *= d
        if count > _MAX_ELEMENTS:
            raise DimensionOverflowError(f"{name}: dimensions {dims} overflow")
    need = count * 4
    have = len(raw) - off
    if have < need:
        raise TruncatedPayloadError(f"{name}: payload has {have // 4} elements, header claims {count}")
    if have > need:
        raise UnsupportedFormatError(f"{name}: {have - need} trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
    return data.astype(np.float32).reshape(dims)
