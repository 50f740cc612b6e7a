"""Classical-channel byte formats.

Three layers live here:

  * TimingPacket: one epoch of detection events, delta-encoded with a Rice
    code plus one basis flag per event (the outcome bit never leaves the
    detector side).
  * Message framing: [u8 tag][u32 length LE][payload] over any reliable
    ordered byte stream.
  * Payload codecs for the small control messages (coincidence replies,
    reconciliation parities, seeds, digests).

All multi-byte header fields are little-endian. Bit packing is MSB-first
(numpy packbits convention) throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from math import log2

import numpy as np

from .core import EPOCH_TICKS, ContractViolation, EventStream

RICE_K_MAX = 40
WIRE_VERSION = 1


class DecodeError(ValueError):
    """Malformed bytes on the wire; offset points at the failing byte."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ProtocolError(ValueError):
    """Violation of the message-level protocol (bad tag, oversize, bad state)."""


class MsgType(IntEnum):
    HELLO = 1
    TIMING = 2
    COINC_REPLY = 3
    EC_PARITY = 4
    EC_PERMUTE_SEED = 5
    PA_SEED = 6
    KEY_HASH = 7
    METRICS = 8
    BYE = 9


@dataclass(frozen=True)
class Message:
    type: MsgType
    payload: bytes = b""


_FRAME = struct.Struct("<BI")


def frame(m: Message) -> bytes:
    if len(m.payload) >= 1 << 32:
        raise ProtocolError("payload too large for a u32 length prefix")
    return _FRAME.pack(int(m.type), len(m.payload)) + m.payload


def unframe(buf, offset: int = 0) -> tuple[Message, int]:
    """Parse one frame at offset; returns (message, offset just past it)."""
    if len(buf) - offset < _FRAME.size:
        raise DecodeError("truncated frame header", offset)
    tag, length = _FRAME.unpack_from(buf, offset)
    try:
        mtype = MsgType(tag)
    except ValueError:
        raise ProtocolError(f"unknown message tag 0x{tag:02x}") from None
    start = offset + _FRAME.size
    if len(buf) - start < length:
        raise DecodeError("truncated frame payload", start)
    return Message(mtype, bytes(buf[start : start + length])), start + length


def unframe_all(buf) -> list[Message]:
    out, pos = [], 0
    while pos < len(buf):
        m, pos = unframe(buf, pos)
        out.append(m)
    return out


# ---------------------------------------------------------------------------
# timing packets

@dataclass
class TimingPacket:
    """Events of one epoch: absolute first time, positive deltas, basis flags."""

    epoch: int
    first_time: int
    deltas: np.ndarray      # int64, length count-1, all > 0
    basis_flags: np.ndarray  # uint8 0/1, length count, 1 = DA basis

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.int64)
        self.basis_flags = np.asarray(self.basis_flags, dtype=np.uint8)

    @property
    def count(self) -> int:
        return int(self.basis_flags.size)

    def times(self) -> np.ndarray:
        t = np.empty(self.count, dtype=np.int64)
        t[0] = self.first_time
        if self.count > 1:
            np.cumsum(self.deltas, out=t[1:])
            t[1:] += self.first_time
        return t

    def validate(self) -> None:
        if self.count < 1:
            raise ContractViolation("timing packet must hold at least one event")
        if self.deltas.size != self.count - 1:
            raise ContractViolation("delta count must be event count - 1")
        if self.deltas.size and int(self.deltas.min()) <= 0:
            raise ContractViolation("timing deltas must be positive")
        if self.basis_flags.size and int(self.basis_flags.max()) > 1:
            raise ContractViolation("basis flags must be 0/1")
        lo = self.epoch * EPOCH_TICKS
        last = self.first_time + (int(self.deltas.sum()) if self.deltas.size else 0)
        if not (lo <= self.first_time and last < lo + EPOCH_TICKS):
            raise ContractViolation("packet events leave their epoch")


def dedupe_ticks(stream: EventStream) -> EventStream:
    """Drop events sharing a tick with a predecessor (a tagger emits one
    timestamp per tick); keeps the first event of each tick."""
    stream.assert_sorted()
    if len(stream) == 0:
        return stream
    keep = np.empty(len(stream), dtype=bool)
    keep[0] = True
    np.greater(np.diff(stream.times), 0, out=keep[1:])
    return EventStream(stream.times[keep], stream.detectors[keep])


def packetize(stream: EventStream) -> list[TimingPacket]:
    """Split a sorted stream into one packet per non-empty epoch.

    Same-tick duplicates are dropped first so every delta is positive.
    Only the basis (detector >> 1) is carried; outcome bits stay local.
    """
    clean = dedupe_ticks(stream)
    if len(clean) == 0:
        return []
    times = clean.times
    flags = (clean.detectors >> 1).astype(np.uint8)
    epochs = times >> 32
    cuts = np.flatnonzero(np.diff(epochs)) + 1
    packets = []
    for seg_t, seg_f in zip(np.split(times, cuts), np.split(flags, cuts)):
        packets.append(
            TimingPacket(
                epoch=int(seg_t[0] >> 32),
                first_time=int(seg_t[0]),
                deltas=np.diff(seg_t),
                basis_flags=seg_f,
            )
        )
    return packets


_TIMING_HDR = struct.Struct("<IIQB")


def choose_rice_k(deltas: np.ndarray) -> int:
    if deltas.size == 0:
        return 0
    mean = float(np.mean(deltas))
    k = int(round(log2(mean))) - 1 if mean >= 1.0 else 0
    return max(0, min(RICE_K_MAX, k))


def _rice_encode_small(values, k: int) -> str:
    parts = []
    for v in values:
        q, r = divmod(int(v), 1 << k)
        parts.append("1" * q)
        parts.append("0")
        if k:
            parts.append(format(r, "0{}b".format(k)))
    return "".join(parts)


def _rice_encode_big(values: np.ndarray, k: int) -> np.ndarray:
    """Bit array (uint8 0/1) of the Rice codewords for large packets."""
    q = (values >> k).astype(np.int64)
    lens = q + 1 + k
    offsets = np.concatenate([[0], np.cumsum(lens)[:-1]])
    bits = np.zeros(int(lens.sum()), dtype=np.uint8)
    total_ones = int(q.sum())
    if total_ones:
        starts = np.repeat(offsets, q)
        ramp = np.arange(total_ones) - np.repeat(np.cumsum(q) - q, q)
        bits[starts + ramp] = 1
    # terminator zeros are already zero; fill remainder bits MSB-first
    base = offsets + q + 1
    for j in range(k):
        bits[base + j] = (values >> (k - 1 - j)) & 1
    return bits


def _bitstring_to_bytes(s: str) -> bytes:
    if not s:
        return b""
    pad = (-len(s)) % 8
    s = s + "0" * pad
    n = len(s) // 8
    return int("1" + s, 2).to_bytes(n + 1, "big")[1:]


def encode_timing(p: TimingPacket) -> bytes:
    p.validate()
    k = choose_rice_k(p.deltas)
    values = p.deltas - 1
    if p.deltas.size == 0:
        rice = b""
    elif p.deltas.size < 256:
        rice = _bitstring_to_bytes(_rice_encode_small(values, k))
    else:
        rice = np.packbits(_rice_encode_big(values, k)).tobytes()
    flags = np.packbits(p.basis_flags).tobytes() if p.count else b""
    return _TIMING_HDR.pack(p.epoch, p.count, p.first_time, k) + rice + flags


def decode_timing(b: bytes) -> TimingPacket:
    if len(b) < _TIMING_HDR.size:
        raise DecodeError("truncated timing header", len(b))
    epoch, count, first_time, k = _TIMING_HDR.unpack_from(b, 0)
    if count == 0:
        raise DecodeError("timing packet with zero events", 4)
    if k > RICE_K_MAX:
        raise DecodeError(f"rice parameter {k} out of range", 16)
    body = b[_TIMING_HDR.size :]
    n_deltas = count - 1
    # every delta costs at least 1+k bits and every event one flag bit, so an
    # implausible count is rejected before any allocation sized from it
    min_bytes = (n_deltas * (1 + k) + 7) // 8 + (count + 7) // 8
    if len(body) < min_bytes:
        raise DecodeError("payload too short for declared event count", 4)
    deltas = np.empty(n_deltas, dtype=np.int64)
    if n_deltas:
        s = bin(int.from_bytes(b"\xff" + body, "big"))[10:]
        pos = 0
        for i in range(n_deltas):
            z = s.find("0", pos)
            if z < 0:
                raise DecodeError("unary run exceeds buffer", _TIMING_HDR.size + pos // 8)
            q = z - pos
            if q > EPOCH_TICKS:
                raise DecodeError("implausible unary run", _TIMING_HDR.size + pos // 8)
            pos = z + 1
            if k:
                if pos + k > len(s):
                    raise DecodeError("truncated rice remainder", _TIMING_HDR.size + pos // 8)
                r = int(s[pos : pos + k], 2)
                pos += k
            else:
                r = 0
            d = (q << k) + r + 1
            if d > EPOCH_TICKS:
                raise DecodeError("delta larger than an epoch", _TIMING_HDR.size + pos // 8)
            deltas[i] = d
        rice_bytes = (pos + 7) // 8
        if "1" in s[pos : rice_bytes * 8]:
            raise DecodeError("nonzero padding after rice data", _TIMING_HDR.size + pos // 8)
    else:
        rice_bytes = 0
    flag_bytes = (count + 7) // 8
    flag_off = _TIMING_HDR.size + rice_bytes
    if len(b) != flag_off + flag_bytes:
        raise DecodeError("payload length disagrees with event count", flag_off)
    flag_arr = np.frombuffer(b, dtype=np.uint8, offset=flag_off)
    unpacked = np.unpackbits(flag_arr)
    if unpacked[count:].any():
        raise DecodeError("nonzero padding after basis flags", len(b) - 1)
    pkt = TimingPacket(epoch, first_time, deltas, unpacked[:count])
    try:
        pkt.validate()
    except ContractViolation as exc:
        raise DecodeError(str(exc), _TIMING_HDR.size) from None
    return pkt


# ---------------------------------------------------------------------------
# control payloads

_HELLO = struct.Struct("<HBI")
_U32 = struct.Struct("<I")
_EC_HDR = struct.Struct("<IHBI")
_SEED = struct.Struct("<IQ")
_PA = struct.Struct("<IIQ")


def encode_hello(role: int, start_epoch: int, version: int = WIRE_VERSION) -> bytes:
    return _HELLO.pack(version, role, start_epoch)


def decode_hello(b: bytes) -> tuple[int, int, int]:
    if len(b) != _HELLO.size:
        raise DecodeError("bad hello size", 0)
    version, role, start_epoch = _HELLO.unpack(b)
    return version, role, start_epoch


def encode_coinc_reply(epoch: int, kept_remote_indices: np.ndarray) -> bytes:
    idx = np.asarray(kept_remote_indices, dtype=np.int64)
    if idx.size and (np.diff(idx) <= 0).any():
        raise ContractViolation("kept indices must be strictly ascending")
    head = _U32.pack(epoch) + _U32.pack(idx.size)
    if idx.size == 0:
        return head
    gaps = np.empty(idx.size, dtype=np.uint32)
    gaps[0] = idx[0]
    gaps[1:] = np.diff(idx)
    return head + gaps.astype("<u4").tobytes()


def decode_coinc_reply(b: bytes) -> tuple[int, np.ndarray]:
    if len(b) < 8:
        raise DecodeError("truncated coincidence reply", len(b))
    epoch = _U32.unpack_from(b, 0)[0]
    n = _U32.unpack_from(b, 4)[0]
    if len(b) != 8 + 4 * n:
        raise DecodeError("coincidence reply length mismatch", 8)
    gaps = np.frombuffer(b, dtype="<u4", offset=8).astype(np.int64)
    if n and (gaps[1:] == 0).any():
        raise DecodeError("zero gap in kept indices", 8)
    return epoch, np.cumsum(gaps)


def encode_ec_parity(cluster: int, round_id: int, counted: bool, bits: np.ndarray) -> bytes:
    arr = np.asarray(bits, dtype=np.uint8)
    head = _EC_HDR.pack(cluster, round_id, 1 if counted else 0, arr.size)
    return head + (np.packbits(arr).tobytes() if arr.size else b"")


def decode_ec_parity(b: bytes) -> tuple[int, int, bool, np.ndarray]:
    if len(b) < _EC_HDR.size:
        raise DecodeError("truncated parity message", len(b))
    cluster, round_id, counted, n = _EC_HDR.unpack_from(b, 0)
    if len(b) != _EC_HDR.size + (n + 7) // 8:
        raise DecodeError("parity payload length mismatch", _EC_HDR.size)
    if n:
        bits = np.unpackbits(np.frombuffer(b, dtype=np.uint8, offset=_EC_HDR.size))[:n]
    else:
        bits = np.empty(0, dtype=np.uint8)
    return cluster, round_id, bool(counted), bits


def encode_seed_msg(cluster: int, seed: int) -> bytes:
    return _SEED.pack(cluster, seed)


def decode_seed_msg(b: bytes) -> tuple[int, int]:
    if len(b) != _SEED.size:
        raise DecodeError("bad seed message size", 0)
    return _SEED.unpack(b)


def encode_pa_seed(cluster: int, m: int, seed: int) -> bytes:
    return _PA.pack(cluster, m, seed)


def decode_pa_seed(b: bytes) -> tuple[int, int, int]:
    if len(b) != _PA.size:
        raise DecodeError("bad pa seed size", 0)
    return _PA.unpack(b)


def encode_key_hash(cluster: int, digest: int) -> bytes:
    return _SEED.pack(cluster, digest)


def decode_key_hash(b: bytes) -> tuple[int, int]:
    if len(b) != _SEED.size:
        raise DecodeError("bad key hash size", 0)
    return _SEED.unpack(b)
