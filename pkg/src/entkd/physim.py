"""Correlated photodetection stream generator.

Produces the two raw timestamp streams a pair source plus two measurement
stations would deliver: Poisson pair emissions, anti-correlated polarization
outcomes with per-basis visibility, beam-splitter basis choice, detection
efficiency, timing jitter, per-detector delay, dark counts, dead time, and a
per-side clock transform (offset + linear drift). Everything is a pure
function of (config, seed), so runs are reproducible bit for bit.

Per-pair ground truth is kept alongside the streams so tests can check the
pipeline against what actually happened.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import (
    TICKS_PER_SECOND,
    Basis,
    ContractViolation,
    EventStream,
    ticks_from_seconds,
)

# child-stream salts under the master seed
_SALT_PAIRS = 1
_SALT_OUTCOMES = 2
_SALT_SIDE_A = 3
_SALT_SIDE_B = 4


@dataclass
class SourceConfig:
    """Pair source: emission intensity and polarization correlation quality."""

    pair_rate: float
    visibility_hv: float = 0.98
    visibility_da: float = 0.92
    duration: float = 1.0
    rng_seed: int = 0
    # linear visibility droop across the session (total drop, both bases); 0 = off
    visibility_ramp: float = 0.0

    def __post_init__(self):
        if self.pair_rate < 0:
            raise ContractViolation("pair_rate must be >= 0")
        for v in (self.visibility_hv, self.visibility_da):
            if not 0.0 <= v <= 1.0:
                raise ContractViolation("visibility must lie in [0, 1]")


@dataclass
class SideConfig:
    """One measurement station: optics, detectors, and its local clock."""

    efficiency: float = 1.0
    jitter_sigma: float = 0.0          # ticks, Gaussian, per side
    detector_delays: tuple = (2, 2, 2, 2)  # ticks, per detector
    dark_rate: float = 0.0             # counts/s per detector
    dead_time: int = 0                 # ticks, same-detector holdoff
    clock_offset: int = 0              # ticks
    clock_drift: float = 0.0           # ticks per tick

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ContractViolation("efficiency must lie in [0, 1]")
        if self.dark_rate < 0:
            raise ContractViolation("dark_rate must be >= 0")
        if len(self.detector_delays) != 4:
            raise ContractViolation("need one delay per detector")


@dataclass
class TruthRecords:
    """Per emitted pair: emission time, both outcomes, and what survived.

    event_index_* point into the corresponding output stream (-1 = lost).
    """

    emission_times: np.ndarray
    basis_a: np.ndarray
    bit_a: np.ndarray
    basis_b: np.ndarray
    bit_b: np.ndarray
    survived_a: np.ndarray
    survived_b: np.ndarray
    event_index_a: np.ndarray
    event_index_b: np.ndarray

    def __len__(self) -> int:
        return int(self.emission_times.size)


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, salt))))


def simulate_pairs(cfg: SourceConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Homogeneous Poisson pair emission times in ticks, sorted."""
    if cfg.duration <= 0:
        raise ContractViolation("duration must be > 0")
    if rng is None:
        rng = _rng(cfg.rng_seed, _SALT_PAIRS)
    span = ticks_from_seconds(cfg.duration)
    n = rng.poisson(cfg.pair_rate * cfg.duration)
    times = rng.integers(0, span, size=n, dtype=np.int64)
    times.sort()
    return times


def _anti_prob(cfg: SourceConfig, basis: int, when_frac) -> np.ndarray | float:
    v = cfg.visibility_hv if basis == Basis.HV else cfg.visibility_da
    v_eff = v - cfg.visibility_ramp * when_frac
    return (1.0 + np.clip(v_eff, 0.0, 1.0)) / 2.0


def sample_joint_outcome(basis_a: Basis, basis_b: Basis, cfg: SourceConfig,
                         rng: np.random.Generator, when_frac: float = 0.0):
    """Outcome bits for one pair measured in the given bases.

    Same basis: first bit uniform, second anti-correlated with probability
    (1+V)/2 for that basis. Different bases: independent uniform bits.
    """
    bit_a = int(rng.integers(0, 2))
    if basis_a == basis_b:
        p = _anti_prob(cfg, basis_a, when_frac)
        bit_b = bit_a ^ int(rng.random() < p)
    else:
        bit_b = int(rng.integers(0, 2))
    return bit_a, bit_b


def _outcome_tables(cfg: SourceConfig, times: np.ndarray, rng: np.random.Generator):
    """Per-pair outcome bit each side would see in each basis.

    bits_b[x] = bits_a[x] xor Bernoulli((1+V_x)/2), independently per basis,
    which reproduces the pairwise statistics of sample_joint_outcome for
    every basis combination (anti-correlated same-basis, uniform otherwise).
    """
    n = times.size
    frac = times / max(1, ticks_from_seconds(cfg.duration)) if cfg.visibility_ramp else 0.0
    a_hv = rng.integers(0, 2, n, dtype=np.uint8)
    a_da = rng.integers(0, 2, n, dtype=np.uint8)
    b_hv = a_hv ^ (rng.random(n) < _anti_prob(cfg, Basis.HV, frac)).astype(np.uint8)
    b_da = a_da ^ (rng.random(n) < _anti_prob(cfg, Basis.DA, frac)).astype(np.uint8)
    return (a_hv, a_da), (b_hv, b_da)


def detect_side(pair_times: np.ndarray, outcome_bits, side: SideConfig,
                rng: np.random.Generator, duration: float):
    """One station's detection record for the emitted pairs.

    outcome_bits = (bits_if_hv, bits_if_da) per pair. The station flips its
    own basis coin per photon (beam splitter), thins by efficiency, applies
    jitter + per-detector delay, adds dark counts, applies the local clock
    transform, then merges, sorts, and applies same-detector dead time.

    Returns (EventStream, survived mask over pairs, event index per pair).
    """
    n = pair_times.size
    bits_hv, bits_da = outcome_bits
    basis = rng.integers(0, 2, n, dtype=np.uint8)
    bit = np.where(basis == 0, bits_hv, bits_da).astype(np.uint8)
    det = (basis * 2 + bit).astype(np.uint8)
    kept = rng.random(n) < side.efficiency

    jitter = rng.normal(0.0, side.jitter_sigma, n) if side.jitter_sigma else np.zeros(n)
    delays = np.asarray(side.detector_delays, dtype=np.int64)
    photon_t = pair_times + np.rint(jitter).astype(np.int64) + delays[det]

    span = ticks_from_seconds(duration)
    dark_t = []
    dark_d = []
    for d in range(4):
        nd = rng.poisson(side.dark_rate * duration)
        dark_t.append(rng.integers(0, span, size=nd, dtype=np.int64))
        dark_d.append(np.full(nd, d, dtype=np.uint8))

    all_t = np.concatenate([photon_t[kept]] + dark_t)
    all_d = np.concatenate([det[kept]] + dark_d)
    pair_ids = np.concatenate(
        [np.flatnonzero(kept)] + [np.full(a.size, -1, dtype=np.int64) for a in dark_t]
    )

    # local clock: t' = round((1+drift) t) + offset, events before t'=0 are lost
    skewed = np.rint((1.0 + side.clock_drift) * all_t).astype(np.int64) + side.clock_offset
    valid = skewed >= 0
    skewed, all_d, pair_ids = skewed[valid], all_d[valid], pair_ids[valid]

    order = np.lexsort((all_d, skewed))
    skewed, all_d, pair_ids = skewed[order], all_d[order], pair_ids[order]

    if side.dead_time > 0 and skewed.size:
        alive = np.ones(skewed.size, dtype=bool)
        last = [-1 << 62] * 4
        for i in range(skewed.size):
            d = all_d[i]
            if skewed[i] - last[d] < side.dead_time:
                alive[i] = False
            else:
                last[d] = skewed[i]
        skewed, all_d, pair_ids = skewed[alive], all_d[alive], pair_ids[alive]

    stream = EventStream(skewed, all_d)
    survived = np.zeros(n, dtype=bool)
    event_index = np.full(n, -1, dtype=np.int64)
    src = np.flatnonzero(pair_ids >= 0)
    survived[pair_ids[src]] = True
    event_index[pair_ids[src]] = src
    return stream, basis, bit, survived, event_index


def simulate_link(source: SourceConfig, alice: SideConfig, bob: SideConfig):
    """Full link: (alice stream, bob stream, TruthRecords)."""
    pair_times = simulate_pairs(source)
    tables_a, tables_b = _outcome_tables(source, pair_times, _rng(source.rng_seed, _SALT_OUTCOMES))
    stream_a, basis_a, bit_a, surv_a, idx_a = detect_side(
        pair_times, tables_a, alice, _rng(source.rng_seed, _SALT_SIDE_A), source.duration)
    stream_b, basis_b, bit_b, surv_b, idx_b = detect_side(
        pair_times, tables_b, bob, _rng(source.rng_seed, _SALT_SIDE_B), source.duration)
    truth = TruthRecords(
        emission_times=pair_times,
        basis_a=basis_a, bit_a=bit_a,
        basis_b=basis_b, bit_b=bit_b,
        survived_a=surv_a, survived_b=surv_b,
        event_index_a=idx_a, event_index_b=idx_b,
    )
    return stream_a, stream_b, truth


# ---------------------------------------------------------------------------
# stream dump files: header {magic "ETKD", version u16, side u8},
# then records of [u64 ticks LE][u8 detector]

DUMP_MAGIC = b"ETKD"
DUMP_VERSION = 1
_DUMP_HDR = struct.Struct("<4sHB")
_RECORD = np.dtype([("t", "<u8"), ("d", "u1")])


def write_stream_dump(path, side_id: int, stream: EventStream) -> None:
    rec = np.empty(len(stream), dtype=_RECORD)
    rec["t"] = stream.times.astype(np.uint64)
    rec["d"] = stream.detectors
    with open(path, "wb") as f:
        f.write(_DUMP_HDR.pack(DUMP_MAGIC, DUMP_VERSION, side_id))
        f.write(rec.tobytes())


def read_stream_dump(path) -> tuple[int, EventStream]:
    with open(path, "rb") as f:
        head = f.read(_DUMP_HDR.size)
        if len(head) != _DUMP_HDR.size:
            raise ContractViolation("stream dump too short")
        magic, version, side = _DUMP_HDR.unpack(head)
        if magic != DUMP_MAGIC or version != DUMP_VERSION:
            raise ContractViolation("not a stream dump file")
        body = f.read()
    if len(body) % _RECORD.itemsize:
        raise ContractViolation("stream dump truncated mid-record")
    rec = np.frombuffer(body, dtype=_RECORD)
    return side, EventStream(rec["t"].astype(np.int64), rec["d"].copy())
