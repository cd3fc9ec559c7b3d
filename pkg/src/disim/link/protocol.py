"""Bit-exact binary framing for the master-slave joint-state exchange.

Layout (all little-endian):

    offset  size  field
    0       4     magic "SDM1"
    4       1     version (1)
    5       1     kind (1 joint_state, 2 torque_cmd, 3 heartbeat)
    6       4     seq, u32
    10      8     t_us, u64
    18      1     n, joint count
    19      24*n  payload: per joint (q, qd, tau_ext) as f64 triples
    19+24n  4     crc32 over every preceding byte
                  (IEEE 0x04C11DB7 reflected, init/xor 0xFFFFFFFF)

The CRC parameters are exactly zlib.crc32. Total length 19 + 24 n + 4.
Heartbeats carry no joints (n = 0); the two state kinds require n >= 1.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SDM1"
VERSION = 1

KIND_JOINT_STATE = 1
KIND_TORQUE_CMD = 2
KIND_HEARTBEAT = 3
_KINDS = (KIND_JOINT_STATE, KIND_TORQUE_CMD, KIND_HEARTBEAT)

_HEADER = struct.Struct("<4sBBIQB")
_CRC = struct.Struct("<I")
HEADER_LEN = _HEADER.size          # 19
OVERHEAD = HEADER_LEN + _CRC.size  # 23


class ProtocolError(ValueError):
    pass


class BadMagic(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class Truncated(ProtocolError):
    """Byte length is inconsistent with the declared frame."""


class ChecksumMismatch(ProtocolError):
    pass


def _payload_vec(x, name, n) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (n,):
        raise ProtocolError(f"{name} must have length {n}")
    return a


@dataclass(frozen=True, eq=False)
class Frame:
    kind: int
    seq: int
    t_us: int
    q: np.ndarray = field(default_factory=lambda: np.zeros(0))
    qd: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tau_ext: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ProtocolError(f"unknown frame kind {self.kind}")
        if not (0 <= self.seq < 2**32):
            raise ProtocolError("seq out of u32 range")
        if not (0 <= self.t_us < 2**64):
            raise ProtocolError("t_us out of u64 range")
        q = np.asarray(self.q, dtype=np.float64)
        n = q.size
        if self.kind == KIND_HEARTBEAT:
            if n != 0:
                raise ProtocolError("heartbeat frames carry no joints")
        elif n == 0:
            raise ProtocolError("state frames need at least one joint")
        if n > 255:
            raise ProtocolError("joint count exceeds one byte")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qd", _payload_vec(self.qd, "qd", n))
        object.__setattr__(self, "tau_ext", _payload_vec(self.tau_ext, "tau_ext", n))

    @property
    def n(self) -> int:
        return self.q.size

    @staticmethod
    def heartbeat(seq: int, t_us: int) -> "Frame":
        return Frame(KIND_HEARTBEAT, seq, t_us)

    def same_payload(self, other: "Frame") -> bool:
        return (self.kind == other.kind and self.seq == other.seq
                and self.t_us == other.t_us and self.n == other.n
                and np.array_equal(self.q, other.q)
                and np.array_equal(self.qd, other.qd)
                and np.array_equal(self.tau_ext, other.tau_ext))


def encode(frame: Frame) -> bytes:
    """Serialize; length is 19 + 24 n + 4 bytes."""
    head = _HEADER.pack(MAGIC, VERSION, frame.kind, frame.seq, frame.t_us, frame.n)
    if frame.n:
        triples = np.column_stack((frame.q, frame.qd, frame.tau_ext)).ravel()
        body = struct.pack(f"<{3 * frame.n}d", *triples)
    else:
        body = b""
    blob = head + body
    return blob + _CRC.pack(zlib.crc32(blob))


def decode(data: bytes) -> Frame:
    """Parse with strict validation: magic, version, length, checksum."""
    if len(data) < 4:
        raise Truncated(f"{len(data)} bytes, need at least 4 for the magic")
    if data[:4] != MAGIC:
        raise BadMagic(f"magic {data[:4]!r}")
    if len(data) < 5:
        raise Truncated("missing version byte")
    if data[4] != VERSION:
        raise BadVersion(f"version {data[4]}, expected {VERSION}")
    if len(data) < HEADER_LEN:
        raise Truncated(f"{len(data)} bytes, header needs {HEADER_LEN}")
    _, _, kind, seq, t_us, n = _HEADER.unpack_from(data)
    expected = OVERHEAD + 24 * n
    if len(data) != expected:
        raise Truncated(f"{len(data)} bytes, frame with n={n} needs {expected}")
    (crc_stored,) = _CRC.unpack_from(data, expected - 4)
    crc_actual = zlib.crc32(data[:expected - 4])
    if crc_stored != crc_actual:
        raise ChecksumMismatch(f"crc {crc_stored:#010x} != {crc_actual:#010x}")
    if kind not in _KINDS:
        raise ProtocolError(f"unknown frame kind {kind}")
    if n:
        triples = np.frombuffer(data, dtype="<f8", count=3 * n, offset=HEADER_LEN)
        triples = triples.reshape(n, 3)
        return Frame(kind, seq, t_us, triples[:, 0].copy(), triples[:, 1].copy(),
                     triples[:, 2].copy())
    return Frame(kind, seq, t_us)
