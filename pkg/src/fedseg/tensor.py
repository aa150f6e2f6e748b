"""Dense tensors, the seeded random stream, and the FDT1 tensor file format.

Tensors are plain ``numpy.ndarray`` objects (row-major, NCHW for image
batches) with 1 to 4 dimensions and a float32 or float64 element type. The
helpers below enforce that contract at module boundaries.

Random numbers come from ``Rng``: the PCG64 (XSL-RR 128/64) generator as
shipped in numpy, seeded with a 64-bit integer through numpy's SeedSequence.
Only the raw 64-bit output stream is used; uniforms take the top 53 bits and
normals are produced by Box-Muller, so the value stream does not depend on
numpy's distribution code.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ShapeError

FDT1_MAGIC = b"FDT1"
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

MASK64 = (1 << 64) - 1


def check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("shape must have at least one dimension")
    if len(shape) > 4:
        raise ShapeError(f"shape {shape} has more than 4 dimensions")
    if any(d < 1 for d in shape):
        raise ShapeError(f"shape {shape} has a dimension smaller than 1")
    return shape


def zeros(shape, dtype=np.float32) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=dtype)


def fill(shape, value, dtype=np.float32) -> np.ndarray:
    return np.full(check_shape(shape), value, dtype=dtype)


def _binary(a, b, fn):
    a = np.asarray(a)
    if np.ndim(b) == 0:
        return fn(a, np.asarray(b, dtype=a.dtype))
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return fn(a, b)


def add(a, b):
    return _binary(a, b, np.add)


def sub(a, b):
    return _binary(a, b, np.subtract)


def mul(a, b):
    return _binary(a, b, np.multiply)


def scale(a, factor):
    if np.ndim(factor) != 0:
        raise ShapeError("scale takes a scalar factor")
    return _binary(a, factor, np.multiply)


def reshape(t, shape):
    shape = check_shape(shape)
    t = np.asarray(t)
    if int(np.prod(shape)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} into {shape}")
    return t.reshape(shape)


# --- random stream -------------------------------------------------------


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 finalizer, used to derive child seeds."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class Rng:
    """Seeded PCG64 stream with Box-Muller normals."""

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed <= MASK64:
            raise ParameterError(f"seed {seed} is not a 64-bit unsigned integer")
        self.seed = seed
        self._bits = np.random.PCG64(seed)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64)

    def next_u64(self) -> int:
        return int(self._bits.random_raw())

    def uniform(self, n: int, low=0.0, high=1.0) -> np.ndarray:
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return low + (high - low) * u

    def uniform1(self, low=0.0, high=1.0) -> float:
        return float(self.uniform(1, low, high)[0])

    def below(self, bound: int) -> int:
        """Integer in [0, bound)."""
        if bound < 1:
            raise ParameterError("bound must be positive")
        return self.next_u64() % bound

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return order

    def standard_normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]


def rng_normal(rng: Rng, shape, mean=0.0, std=1.0, dtype=np.float32) -> np.ndarray:
    shape = check_shape(shape)
    if std < 0:
        raise ParameterError(f"std must be non-negative, got {std}")
    z = rng.standard_normal(int(np.prod(shape)))
    return (mean + std * z).reshape(shape).astype(dtype)


# --- FDT1 ----------------------------------------------------------------


def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    dt = t.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        raise FormatError(f"unsupported tensor dtype {t.dtype}")
    shape = check_shape(t.shape)
    head = FDT1_MAGIC + struct.pack("<BB", _DTYPE_TAGS[dt], len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    return head + np.ascontiguousarray(t, dtype=dt).tobytes()


def tensor_from_bytes(buf, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one FDT1 record starting at ``offset``; returns (tensor, end offset)."""
    buf = memoryview(buf)
    if len(buf) - offset < 6:
        raise FormatError(f"truncated FDT1 header at offset {offset}")
    if bytes(buf[offset:offset + 4]) != FDT1_MAGIC:
        raise FormatError(f"bad FDT1 magic at offset {offset}")
    tag, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if tag not in _TAG_DTYPES:
        raise FormatError(f"unknown FDT1 dtype tag {tag} at offset {offset + 4}")
    if not 1 <= ndim <= 4:
        raise FormatError(f"bad FDT1 ndim {ndim} at offset {offset + 5}")
    pos = offset + 6
    if len(buf) - pos < 4 * ndim:
        raise FormatError(f"truncated FDT1 dims at offset {pos}")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    if any(d == 0 for d in shape):
        raise FormatError(f"zero dimension in FDT1 record at offset {pos}")
    pos += 4 * ndim
    dtype = _TAG_DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated FDT1 data at offset {pos}")
    data = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(shape)
    return data.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(t: np.ndarray, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after FDT1 record")
    return t
