"""Named parameter collections and the FDLC checkpoint encoding."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import AlignmentError, FormatError
from .tensor import tensor_from_bytes, tensor_to_bytes

FDLC_MAGIC = b"FDLC"
FDLC_VERSION = 1


class ParameterSet:
    """Ordered ``name -> tensor`` mapping; order is the model's canonical order."""

    def __init__(self, items=()):
        if isinstance(items, (dict, ParameterSet)):
            items = items.items()
        self._d = {}
        for name, t in items:
            if name in self._d:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._d[name] = np.asarray(t)

    def names(self):
        return list(self._d)

    def items(self):
        return self._d.items()

    def values(self):
        return self._d.values()

    def __getitem__(self, name):
        return self._d[name]

    def __contains__(self, name):
        return name in self._d

    def __iter__(self):
        return iter(self._d)

    def __len__(self):
        return len(self._d)

    def copy(self):
        return ParameterSet((k, v.copy()) for k, v in self._d.items())

    def num_elements(self):
        return sum(v.size for v in self._d.values())

    def check_aligned(self, other):
        """Raise ``AlignmentError`` naming the first entry that differs."""
        a, b = self.names(), other.names()
        for i in range(max(len(a), len(b))):
            na = a[i] if i < len(a) else None
            nb = b[i] if i < len(b) else None
            if na != nb:
                raise AlignmentError(f"parameter {i}: {na!r} vs {nb!r}", name=na or nb)
            if self[na].shape != other[nb].shape:
                raise AlignmentError(
                    f"parameter {na!r}: shape {self[na].shape} vs {other[nb].shape}", name=na)

    def aligned(self, other):
        try:
            self.check_aligned(other)
        except AlignmentError:
            return False
        return True

    def __eq__(self, other):
        """Bit-exact equality: same names, order, dtypes, shapes and bytes."""
        if not isinstance(other, ParameterSet) or self.names() != other.names():
            return False
        for name, a in self.items():
            b = other[name]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True

    def __repr__(self):
        return f"ParameterSet({len(self)} tensors, {self.num_elements()} elements)"

    # FDLC --------------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [FDLC_MAGIC, struct.pack("<HI", FDLC_VERSION, len(self))]
        for name, t in self.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
            out.append(tensor_to_bytes(t))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf) -> "ParameterSet":
        buf = memoryview(buf)
        if len(buf) < 10:
            raise FormatError("truncated FDLC header at offset 0")
        if bytes(buf[:4]) != FDLC_MAGIC:
            raise FormatError("bad FDLC magic at offset 0")
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != FDLC_VERSION:
            raise FormatError(f"unsupported FDLC version {version} at offset 4")
        pos = 10
        items = []
        for _ in range(count):
            if len(buf) - pos < 2:
                raise FormatError(f"truncated FDLC entry at offset {pos}")
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if len(buf) - pos < n:
                raise FormatError(f"truncated FDLC name at offset {pos}")
            try:
                name = bytes(buf[pos:pos + n]).decode("utf-8")
            except UnicodeDecodeError as e:
                raise FormatError(f"FDLC name is not UTF-8 at offset {pos}") from e
            pos += n
            t, pos = tensor_from_bytes(buf, pos)
            items.append((name, t))
        if pos != len(buf):
            raise FormatError(f"{len(buf) - pos} trailing bytes after FDLC entries")
        try:
            return cls(items)
        except ValueError as e:
            raise FormatError(str(e)) from e

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())
