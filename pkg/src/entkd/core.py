"""Shared vocabulary for the timestamp pipeline.

Everything downstream runs on an integer tick of 125 ps. That unit makes the
three quantities the processing cares about exact powers of two:

    1 ns        =  8 ticks
    2.048 us    =  2**14 ticks   (coarse correlation bin)
    2 ns        =  2**4  ticks   (fine correlation bin)
    2**29 ns    =  2**32 ticks   (one epoch / timing packet)

No floating-point time is used anywhere in the pipeline; timestamps are
integers end to end and are carried as u64 on the wire.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable

import numpy as np

TICKS_PER_NS = 8
TICKS_PER_SECOND = 8_000_000_000
COARSE_BIN_TICKS = 1 << 14
FINE_BIN_TICKS = 1 << 4
EPOCH_TICKS = 1 << 32
EPOCH_SECONDS = EPOCH_TICKS / TICKS_PER_SECOND
COARSE_BINS_PER_EPOCH = EPOCH_TICKS // COARSE_BIN_TICKS

# unit identities the formats rely on
assert TICKS_PER_NS * 1_000_000_000 == TICKS_PER_SECOND
assert 2048 * TICKS_PER_NS == COARSE_BIN_TICKS
assert 2 * TICKS_PER_NS == FINE_BIN_TICKS
assert (1 << 29) * TICKS_PER_NS == EPOCH_TICKS
assert COARSE_BINS_PER_EPOCH == 1 << 18


class ContractViolation(ValueError):
    """An operation was handed input that breaks its stated precondition."""


class InvalidDetectorError(ValueError):
    """Detector index outside 0..3."""


class Basis(IntEnum):
    HV = 0
    DA = 1


# detector -> (basis, bit); detectors 0,1 are the HV pair, 2,3 the DA pair
_DETECTOR_TABLE = (
    (Basis.HV, 0),
    (Basis.HV, 1),
    (Basis.DA, 0),
    (Basis.DA, 1),
)


def detector_to_basis_bit(detector: int) -> tuple[Basis, int]:
    """Map a detector index to its (measurement basis, outcome bit)."""
    if not 0 <= detector <= 3:
        raise InvalidDetectorError(f"detector index {detector} not in 0..3")
    return _DETECTOR_TABLE[detector]


def detector_basis(detectors: np.ndarray) -> np.ndarray:
    """Vector form: basis code (0=HV, 1=DA) per detector index."""
    return np.asarray(detectors) >> 1


def detector_bit(detectors: np.ndarray) -> np.ndarray:
    """Vector form: outcome bit per detector index."""
    return np.asarray(detectors) & 1


def epoch_of(ticks):
    """Epoch index of a timestamp (scalar or array): ticks >> 32."""
    if isinstance(ticks, np.ndarray):
        return ticks >> 32
    return int(ticks) >> 32


def ticks_from_seconds(seconds: float) -> int:
    return int(round(seconds * TICKS_PER_SECOND))


@dataclass(frozen=True)
class DetectionEvent:
    """One timestamped click: (time in ticks, detector 0..3)."""

    time: int
    detector: int

    def __post_init__(self):
        if self.time < 0:
            raise ContractViolation("negative timestamp")
        if not 0 <= self.detector <= 3:
            raise InvalidDetectorError(f"detector index {self.detector} not in 0..3")

    @property
    def basis_bit(self) -> tuple[Basis, int]:
        return detector_to_basis_bit(self.detector)


@dataclass
class EventStream:
    """A time-ordered detection record: parallel arrays of ticks and detectors.

    Sorted by (time, detector); ties on the same tick are allowed in memory
    (the wire packetizer is what cannot represent them).
    """

    times: np.ndarray
    detectors: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.detectors = np.asarray(self.detectors, dtype=np.uint8)
        if self.times.shape != self.detectors.shape:
            raise ContractViolation("times and detectors length mismatch")

    def __len__(self) -> int:
        return int(self.times.size)

    def __getitem__(self, i: int) -> DetectionEvent:
        return DetectionEvent(int(self.times[i]), int(self.detectors[i]))

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.times) >= 0))

    def assert_sorted(self) -> None:
        if not self.is_sorted():
            raise ContractViolation("event stream not time-ordered")

    def slice_ticks(self, lo: int, hi: int) -> "EventStream":
        """Events with lo <= t < hi (stream must be sorted)."""
        a = int(np.searchsorted(self.times, lo, side="left"))
        b = int(np.searchsorted(self.times, hi, side="left"))
        return EventStream(self.times[a:b], self.detectors[a:b])

    @classmethod
    def from_events(cls, events: Iterable[tuple[int, int]]) -> "EventStream":
        ev = list(events)
        if not ev:
            return cls(np.empty(0, np.int64), np.empty(0, np.uint8))
        t = np.array([e[0] for e in ev], dtype=np.int64)
        d = np.array([e[1] for e in ev], dtype=np.uint8)
        order = np.lexsort((d, t))
        return cls(t[order], d[order])

    @classmethod
    def merge(cls, *streams: "EventStream") -> "EventStream":
        t = np.concatenate([s.times for s in streams]) if streams else np.empty(0, np.int64)
        d = np.concatenate([s.detectors for s in streams]) if streams else np.empty(0, np.uint8)
        order = np.lexsort((d, t))
        return cls(t[order], d[order])


KEY_STAGES = ("sifted", "corrected", "final")


@dataclass
class KeyBuffer:
    """Key material moving through the stack, with its disclosure bookkeeping.

    bits:  0/1 array
    stage: "sifted" -> "corrected" -> "final"
    c:     parity bits disclosed so far during reconciliation
    eta:   measured error fraction (once known)
    """

    bits: np.ndarray
    stage: str = "sifted"
    c: int = 0
    eta: float | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.stage not in KEY_STAGES:
            raise ContractViolation(f"unknown key stage {self.stage!r}")
        if self.bits.size and (self.bits.max() > 1):
            raise ContractViolation("key bits must be 0/1")
        if self.c < 0:
            raise ContractViolation("negative disclosure count")
        if self.eta is not None and not 0.0 <= self.eta <= 1.0:
            raise ContractViolation("eta outside [0, 1]")

    @property
    def r(self) -> int:
        return int(self.bits.size)
