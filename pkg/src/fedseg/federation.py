"""FedAvg aggregation, parameter-set diagnostics, and the FDLP message codec.

FDLP frame layout (all integers little-endian)::

    offset  size  field
    0       4     u32 length of everything after this field
    4       4     magic "FDLP"
    8       2     u16 version (1)
    10      1     u8  kind
    11      4     u32 round
    15      4     u32 node_id
    19      8     u64 sample_count
    27      4     u32 payload length
    31      n     payload: FDLC parameter set, UTF-8 error text, or nothing
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ProtocolError, UsageError
from .params import ParameterSet

FDLP_MAGIC = b"FDLP"
FDLP_VERSION = 1
DEFAULT_MAX_FRAME = 256 * 1024 * 1024
_HEADER = struct.Struct("<4sHBIIQI")
HEADER_SIZE = 4 + _HEADER.size  # includes the length prefix


class Kind(enum.IntEnum):
    HELLO = 1
    GLOBAL_MODEL = 2
    LOCAL_UPDATE = 3
    DONE = 4
    ERROR = 5


_WITH_PARAMS = (Kind.GLOBAL_MODEL, Kind.LOCAL_UPDATE)


@dataclass
class FedConfig:
    rounds: int = 1
    nodes: int = 2
    local_epochs: int = 1
    batch_size: int = 4
    lr: float = 0.0002
    seed: int = 0
    weighting: str = "sample_count"
    timeout_s: float = 120.0
    retries: int = 3
    eval_each_round: bool = False

    def __post_init__(self):
        for name in ("rounds", "nodes", "local_epochs", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"federation.{name} must be a positive integer, got {v!r}")
        if self.batch_size < 2:
            raise ConfigError("federation.batch_size must be >= 2 (batch-norm needs two samples)")
        if not self.lr > 0:
            raise ConfigError(f"federation.lr must be positive, got {self.lr!r}")
        if self.weighting not in ("sample_count", "uniform"):
            raise ConfigError(f"federation.weighting must be 'sample_count' or 'uniform', "
                              f"got {self.weighting!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"federation.seed must be a 64-bit unsigned integer, got {self.seed!r}")
        if not self.timeout_s > 0:
            raise ConfigError("federation.timeout_s must be positive")
        if not isinstance(self.retries, int) or self.retries < 1:
            raise ConfigError("federation.retries must be a positive integer")


def fedavg(updates, weighting="sample_count") -> ParameterSet:
    """Weighted mean of aligned parameter sets.

    ``updates`` is a list of ``(ParameterSet, sample_count)`` already sorted
    by node id; terms are accumulated in float64 in that order and cast back
    to each tensor's dtype.
    """
    if not updates:
        raise UsageError("fedavg needs at least one update")
    first = updates[0][0]
    for ps, _ in updates[1:]:
        first.check_aligned(ps)
    if weighting == "uniform":
        weights = [1.0 / len(updates)] * len(updates)
    elif weighting == "sample_count":
        counts = [float(c) for _, c in updates]
        if any(c < 0 for c in counts):
            raise UsageError("sample counts must be non-negative")
        total = sum(counts)
        if total <= 0:
            raise UsageError("sample counts sum to zero")
        weights = [c / total for c in counts]
    else:
        raise UsageError(f"unknown weighting {weighting!r}")
    out = []
    for name, t in first.items():
        acc = np.zeros(t.shape, dtype=np.float64)
        for (ps, _), w in zip(updates, weights):
            acc += w * ps[name].astype(np.float64)
        out.append((name, acc.astype(t.dtype)))
    return ParameterSet(out)


def diff_norm(a: ParameterSet, b: ParameterSet) -> float:
    a.check_aligned(b)
    total = 0.0
    for name, t in a.items():
        d = t.astype(np.float64) - b[name].astype(np.float64)
        total += float(np.dot(d.ravel(), d.ravel()))
    return math.sqrt(total)


# --- messages ----------------------------------------------------------------


@dataclass
class FedMessage:
    kind: Kind
    round: int = 0
    node_id: int = 0
    sample_count: int = 0
    params: ParameterSet | None = None
    error_text: str | None = None

    def __post_init__(self):
        self.kind = Kind(self.kind)
        if self.kind in _WITH_PARAMS and self.params is None:
            raise UsageError(f"{self.kind.name} message needs a parameter payload")
        if self.kind not in _WITH_PARAMS and self.params is not None:
            raise UsageError(f"{self.kind.name} message cannot carry parameters")
        if self.kind == Kind.ERROR and self.error_text is None:
            self.error_text = ""
        if self.kind != Kind.ERROR and self.error_text is not None:
            raise UsageError(f"{self.kind.name} message cannot carry error text")
        for name, bits in (("round", 32), ("node_id", 32), ("sample_count", 64)):
            v = getattr(self, name)
            if not 0 <= v < 2 ** bits:
                raise UsageError(f"{name}={v} does not fit in u{bits}")


def encode(msg: FedMessage) -> bytes:
    if msg.params is not None:
        payload = msg.params.to_bytes()
    elif msg.error_text is not None:
        payload = msg.error_text.encode("utf-8")
    else:
        payload = b""
    body = _HEADER.pack(FDLP_MAGIC, FDLP_VERSION, int(msg.kind), msg.round, msg.node_id,
                        msg.sample_count, len(payload)) + payload
    return struct.pack("<I", len(body)) + body


def decode(frame, max_frame=DEFAULT_MAX_FRAME) -> FedMessage:
    """Parse one complete frame; every defect raises ``ProtocolError`` with its offset."""
    frame = memoryview(bytes(frame))
    if len(frame) < 4:
        raise ProtocolError("truncated length prefix", offset=len(frame))
    (length,) = struct.unpack_from("<I", frame, 0)
    if length > max_frame:
        raise ProtocolError(f"frame length {length} exceeds cap {max_frame}", offset=0)
    if len(frame) - 4 != length:
        raise ProtocolError(
            f"length prefix says {length} bytes but {len(frame) - 4} follow", offset=0)
    if length < _HEADER.size:
        raise ProtocolError("truncated header", offset=len(frame))
    magic, version, kind, rnd, node, count, plen = _HEADER.unpack_from(frame, 4)
    if magic != FDLP_MAGIC:
        raise ProtocolError(f"bad magic {bytes(magic)!r}", offset=4)
    if version != FDLP_VERSION:
        raise ProtocolError(f"unsupported version {version}", offset=8)
    try:
        kind = Kind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}", offset=10) from None
    if plen != length - _HEADER.size:
        raise ProtocolError(
            f"payload length {plen} disagrees with frame length {length}", offset=27)
    payload = frame[HEADER_SIZE:]
    params = text = None
    if kind in _WITH_PARAMS:
        try:
            params = ParameterSet.from_bytes(payload)
        except FormatError as e:
            raise ProtocolError(f"bad parameter payload: {e}", offset=HEADER_SIZE) from e
    elif kind == Kind.ERROR:
        try:
            text = bytes(payload).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError("error text is not UTF-8", offset=HEADER_SIZE + e.start) from None
    elif plen:
        raise ProtocolError(f"{kind.name} must not carry a payload", offset=27)
    return FedMessage(kind, rnd, node, count, params, text)


def read_frame(read_exact, max_frame=DEFAULT_MAX_FRAME) -> bytes:
    """Pull one whole frame from a byte stream.

    ``read_exact(n)`` must return exactly ``n`` bytes or raise. The length
    prefix is checked against ``max_frame`` before the body is read.
    """
    head = read_exact(4)
    (length,) = struct.unpack("<I", head)
    if length > max_frame:
        raise ProtocolError(f"frame length {length} exceeds cap {max_frame}", offset=0)
    return head + read_exact(length)
