"""Interactive parity-exchange error correction on clustered key bits.

Two engines run in lockstep over a message channel. The reference side
discloses parities of its bits; the correcting side compares them against
its own, locates differing positions by batched binary bisection, and
flips them. Four partition passes with doubling block sizes and shared
seeded permutations are followed by random-subset confirmation rounds
until twelve consecutive rounds agree.

Disclosed-parity accounting: every bisection step leaks exactly one bit
about the shared string (one side's half-block parity plus the other
side's compare outcome), so only reference-side parity payloads carry
the counted flag. Both engines accumulate the same count c, and the
message envelope makes the accounting auditable from a raw transcript.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, PCG64, SeedSequence

from .channel import PairChannel
from .wire import Message, MsgType, ProtocolError, decode_ec_parity, encode_ec_parity

N_PASSES = 4
BICONF_TARGET = 12
DEFAULT_ETA = 0.05
MIN_BLOCK = 8
CLUSTER_THRESHOLD = 5000

# round identifiers inside EC_PARITY messages
R_PASS_BASE = 0        # + pass index: reference block parities
R_BITMAP_BASE = 100    # + pass index: correcting-side mismatch bitmap
R_BISECT_PARITY = 110  # reference left-half parities for one bisection level
R_BISECT_BRANCH = 111  # correcting-side branch choices for the same level
R_BICONF_PARITY = 120  # reference subset parity
R_BICONF_RESULT = 121  # correcting-side subset compare outcome
R_DONE = 130           # correcting side reports its total flip count

_BICONF_SALT = 1000    # keeps subset seeds clear of pass-permutation seeds

ROLE_REFERENCE = "reference"
ROLE_CORRECTING = "correcting"


class ReconcileAborted(RuntimeError):
    """Reconciliation could not complete; the cluster yields no key."""


def initial_block_size(eta_est: float, r: int) -> int:
    """First-pass block size from the running error-rate estimate."""
    if r <= 0:
        raise ValueError("cluster length must be positive")
    if not (0.0 < eta_est <= 0.5):
        raise ValueError(f"eta estimate {eta_est} outside (0, 0.5]")
    k = int(round(0.73 / eta_est))
    upper = max(1, r // 2)
    return max(min(k, upper), min(MIN_BLOCK, upper))


class EtaEstimator:
    """Exponentially weighted error-rate tracker across clusters.

    Returns the default until the first observation, which seeds the
    average outright; later observations blend in with weight alpha.
    """

    def __init__(self, alpha: float = 0.5, initial: float = DEFAULT_ETA):
        if not (0.0 < alpha <= 1.0):
            raise ValueError("alpha must be in (0, 1]")
        self._alpha = alpha
        self._value = initial
        self._seeded = False

    @property
    def value(self) -> float:
        return self._value

    def update(self, eta: float) -> float:
        if not (0.0 <= eta <= 1.0):
            raise ValueError(f"eta {eta} outside [0, 1]")
        # block sizing needs an estimate strictly inside (0, 0.5]
        eta = min(max(eta, 1e-4), 0.5)
        if self._seeded:
            self._value = self._alpha * eta + (1.0 - self._alpha) * self._value
        else:
            self._value = eta
            self._seeded = True
        return self._value


@dataclass(frozen=True)
class Cluster:
    """A contiguous run of sifted bits queued for reconciliation."""

    cluster_id: int
    bits: np.ndarray
    first_epoch: int
    last_epoch: int

    @property
    def r(self) -> int:
        return len(self.bits)


class ClusterBuilder:
    """Collates sifted bits into clusters of at least a threshold size.

    The whole buffer is emitted the moment it crosses the threshold, so
    bits beyond the boundary stay in the cluster that crossed it. The
    trailing partial buffer at session end never becomes a cluster.
    """

    def __init__(self, threshold: int = CLUSTER_THRESHOLD, first_id: int = 0):
        if threshold <= 0:
            raise ValueError("threshold must be positive")
        self.threshold = threshold
        self._next_id = first_id
        self._chunks: list[np.ndarray] = []
        self._count = 0
        self._first_epoch = -1
        self._last_epoch = -1

    @property
    def pending(self) -> int:
        return self._count

    def push(self, bits: np.ndarray, epoch: int = 0) -> list[Cluster]:
        bits = np.ascontiguousarray(bits, dtype=np.uint8)
        if bits.size:
            if self._count == 0:
                self._first_epoch = epoch
            self._last_epoch = epoch
            self._chunks.append(bits)
            self._count += bits.size
        out = []
        if self._count >= self.threshold:
            merged = np.concatenate(self._chunks)
            out.append(Cluster(self._next_id, merged,
                               self._first_epoch, self._last_epoch))
            self._next_id += 1
            self._chunks = []
            self._count = 0
        return out

    def discard_tail(self) -> int:
        """Drop the sub-threshold remainder; returns how many bits died."""
        n = self._count
        self._chunks = []
        self._count = 0
        return n


@dataclass(frozen=True)
class ReconciliationReport:
    cluster_id: int
    r: int
    errors_found: int
    c: int
    eta: float
    passes: tuple[dict, ...]


class _Engine:
    """One side of the reconciliation dialogue.

    Both sides mirror every piece of shared state (disclosed reference
    parities, per-block mismatch flags, flip history), so all control
    decisions are reproduced identically without extra coordination
    traffic beyond the parity and branch messages themselves.
    """

    def __init__(self, role, bits, cluster_id, shared_seed, eta_est, send, recv):
        self.role = role
        self.bits = np.array(bits, dtype=np.uint8).copy()
        if self.bits.ndim != 1 or self.bits.size == 0:
            raise ValueError("bits must be a nonempty 1-d array")
        if self.bits.max(initial=0) > 1:
            raise ValueError("bits must be 0/1")
        self.r = self.bits.size
        self.cluster_id = cluster_id
        self.shared_seed = shared_seed
        self._send = send
        self._recv = recv

        k1 = initial_block_size(eta_est, self.r)
        self.block_size = [min(k1 << p, self.r) for p in range(N_PASSES)]
        self.perm: list[np.ndarray | None] = [None] * N_PASSES
        self.inv: list[np.ndarray | None] = [None] * N_PASSES
        self.pbits: list[np.ndarray | None] = [None] * N_PASSES
        self.block_state: list[np.ndarray | None] = [None] * N_PASSES

        self.ref_parity: dict = {}
        self.c = 0
        self.errors_found = 0
        self.pass_summaries: list[dict] = []
        self.biconf_rounds = 0
        self.biconf_hits = 0

    # -- message plumbing ---------------------------------------------

    def _send_bits(self, round_id: int, bits, counted: bool) -> None:
        arr = np.asarray(bits, dtype=np.uint8)
        payload = encode_ec_parity(self.cluster_id, round_id, counted, arr)
        self._send(Message(MsgType.EC_PARITY, payload))
        if counted:
            self.c += arr.size

    def _recv_bits(self, round_id: int, expect: int) -> np.ndarray:
        msg = self._recv()
        if msg.type != MsgType.EC_PARITY:
            raise ProtocolError(f"expected EC_PARITY, got {msg.type!r}")
        cid, rid, counted, bits = decode_ec_parity(msg.payload)
        if cid != self.cluster_id:
            raise ProtocolError(f"cluster id {cid} != {self.cluster_id}")
        if rid != round_id:
            raise ProtocolError(f"round {rid}, expected {round_id}")
        if bits.size != expect:
            raise ProtocolError(f"{bits.size} parity bits, expected {expect}")
        if counted:
            self.c += bits.size
        return bits

    # -- parity bookkeeping -------------------------------------------

    def _build_pass(self, p: int) -> None:
        if p == 0:
            perm = np.arange(self.r, dtype=np.int64)
        else:
            gen = Generator(PCG64(SeedSequence((self.shared_seed, p))))
            perm = gen.permutation(self.r).astype(np.int64)
        inv = np.empty(self.r, dtype=np.int64)
        inv[perm] = np.arange(self.r, dtype=np.int64)
        self.perm[p] = perm
        self.inv[p] = inv
        self.pbits[p] = self.bits[perm]

    def _subset_positions(self, rnd: int) -> np.ndarray:
        gen = Generator(PCG64(SeedSequence((self.shared_seed, _BICONF_SALT + rnd))))
        mask = gen.integers(0, 2, size=self.r, dtype=np.uint8)
        return np.flatnonzero(mask)

    @staticmethod
    def _prefix(arr: np.ndarray) -> np.ndarray:
        cs = np.empty(arr.size + 1, dtype=np.int64)
        cs[0] = 0
        np.cumsum(arr, dtype=np.int64, out=cs[1:])
        return cs

    def _apply_flips(self, positions: list[int]) -> None:
        """Record located error positions; the correcting side also flips."""
        for q in positions:
            if self.role == ROLE_CORRECTING:
                self.bits[q] ^= 1
                for p in range(N_PASSES):
                    if self.pbits[p] is not None:
                        self.pbits[p][self.inv[p][q]] ^= 1
            for p in range(N_PASSES):
                state = self.block_state[p]
                if state is not None:
                    state[self.inv[p][q] // self.block_size[p]] ^= 1
            self.errors_found += 1

    # -- bisection ------------------------------------------------------

    def _bisect(self, key, intervals, lookup) -> int:
        """Locate one differing position inside each interval and fix it.

        key identifies the coordinate system for the parity cache;
        intervals are disjoint ascending (lo, hi) spans with odd
        difference parity; lookup maps a span coordinate back to the
        original bit index. Runs level-synchronously: one message pair
        covers every still-active interval.
        """
        if key in range(N_PASSES):
            own = self.pbits[key]
        else:
            rnd = key[1]
            own = self.bits[self._subset_positions(rnd)]
        cs = self._prefix(own)

        active = list(intervals)
        found: list[int] = []
        guard = 0
        while True:
            nxt = []
            for lo, hi in active:
                if hi - lo == 1:
                    found.append(lo)
                else:
                    nxt.append((lo, hi))
            active = nxt
            if not active:
                break
            guard += 1
            if guard > 64 + self.r.bit_length() * 4:
                raise ProtocolError("bisection did not converge")

            mids = [lo + (hi - lo) // 2 for lo, hi in active]
            missing = [i for i, (lo, hi) in enumerate(active)
                       if (key, lo, mids[i]) not in self.ref_parity]
            if self.role == ROLE_REFERENCE:
                if missing:
                    vals = [(cs[mids[i]] - cs[active[i][0]]) & 1 for i in missing]
                    self._send_bits(R_BISECT_PARITY, vals, counted=True)
                else:
                    self._send_bits(R_BISECT_PARITY, [], counted=True)
                for i, v in zip(missing, vals if missing else []):
                    self.ref_parity[(key, active[i][0], mids[i])] = int(v)
                branches = self._recv_bits(R_BISECT_BRANCH, len(active))
            else:
                vals = self._recv_bits(R_BISECT_PARITY, len(missing))
                for i, v in zip(missing, vals):
                    self.ref_parity[(key, active[i][0], mids[i])] = int(v)
                branches = np.empty(len(active), dtype=np.uint8)
                for i, (lo, hi) in enumerate(active):
                    mine = (cs[mids[i]] - cs[lo]) & 1
                    branches[i] = self.ref_parity[(key, lo, mids[i])] ^ mine
                self._send_bits(R_BISECT_BRANCH, branches, counted=False)

            stepped = []
            for i, (lo, hi) in enumerate(active):
                mid = mids[i]
                full = self.ref_parity[(key, lo, hi)]
                left = self.ref_parity[(key, lo, mid)]
                self.ref_parity[(key, mid, hi)] = full ^ left
                stepped.append((lo, mid) if branches[i] else (mid, hi))
            active = stepped

        found.sort()
        self._apply_flips([int(lookup(coord)) for coord in found])
        return len(found)

    def _wave(self) -> None:
        """Re-check every scanned pass until no block parity mismatches."""
        guard = 0
        while True:
            target = -1
            for p in range(N_PASSES):
                state = self.block_state[p]
                if state is not None and state.any():
                    target = p
                    break
            if target < 0:
                return
            k = self.block_size[target]
            blocks = np.flatnonzero(self.block_state[target])
            intervals = [(int(b) * k, min((int(b) + 1) * k, self.r))
                         for b in blocks]
            perm = self.perm[target]
            self._bisect(target, intervals, lambda i, _p=perm: _p[i])
            guard += 1
            if guard > 4 * self.r:
                raise ProtocolError("correction wave did not converge")

    # -- protocol phases ------------------------------------------------

    def _run_pass(self, p: int) -> None:
        self._build_pass(p)
        k = self.block_size[p]
        starts = np.arange(0, self.r, k, dtype=np.int64)
        ends = np.minimum(starts + k, self.r)
        ranges = [(int(lo), int(hi)) for lo, hi in zip(starts, ends)]
        n_blocks = len(ranges)
        cs = self._prefix(self.pbits[p])
        mine = ((cs[ends] - cs[starts]) & 1).astype(np.uint8)
        if self.role == ROLE_REFERENCE:
            self._send_bits(R_PASS_BASE + p, mine, counted=True)
            for (lo, hi), v in zip(ranges, mine):
                self.ref_parity[(p, lo, hi)] = int(v)
            bitmap = self._recv_bits(R_BITMAP_BASE + p, n_blocks)
        else:
            theirs = self._recv_bits(R_PASS_BASE + p, n_blocks)
            for (lo, hi), v in zip(ranges, theirs):
                self.ref_parity[(p, lo, hi)] = int(v)
            bitmap = theirs ^ mine
            self._send_bits(R_BITMAP_BASE + p, bitmap, counted=False)
        self.block_state[p] = bitmap.astype(np.uint8).copy()
        self.pass_summaries.append({
            "pass": p,
            "block_size": k,
            "blocks": n_blocks,
            "mismatched": int(bitmap.sum()),
        })
        self._wave()

    def _run_biconf(self) -> None:
        clean = 0
        rnd = 0
        while clean < BICONF_TARGET:
            positions = self._subset_positions(rnd)
            key = ("biconf", rnd)
            n = positions.size
            if self.role == ROLE_REFERENCE:
                par = int(self.bits[positions].sum() & 1)
                self._send_bits(R_BICONF_PARITY, [par], counted=True)
                self.ref_parity[(key, 0, n)] = par
                res = int(self._recv_bits(R_BICONF_RESULT, 1)[0])
            else:
                par = int(self._recv_bits(R_BICONF_PARITY, 1)[0])
                self.ref_parity[(key, 0, n)] = par
                mine = int(self.bits[positions].sum() & 1)
                res = par ^ mine
                self._send_bits(R_BICONF_RESULT, [res], counted=False)
            self.biconf_rounds += 1
            if res:
                self.biconf_hits += 1
                self._bisect(key, [(0, n)],
                             lambda i, _s=positions: _s[i])
                self._wave()
                clean = 0
            else:
                clean += 1
            rnd += 1
            if rnd > 64 * BICONF_TARGET + 4 * self.r:
                raise ProtocolError("confirmation phase did not terminate")

    def _finish(self) -> None:
        if self.role == ROLE_CORRECTING:
            word = np.array([self.errors_found], dtype=">u4")
            self._send_bits(R_DONE, np.unpackbits(word.view(np.uint8)),
                            counted=False)
        else:
            bits = self._recv_bits(R_DONE, 32)
            claimed = int.from_bytes(np.packbits(bits).tobytes(), "big")
            if claimed != self.errors_found:
                raise ProtocolError(
                    f"peer corrected {claimed} errors, local tally "
                    f"{self.errors_found}")

    def run(self) -> ReconciliationReport:
        for p in range(N_PASSES):
            self._run_pass(p)
        self._run_biconf()
        self._finish()
        summaries = tuple(self.pass_summaries + [{
            "pass": "biconf",
            "rounds": self.biconf_rounds,
            "hits": self.biconf_hits,
        }])
        return ReconciliationReport(
            cluster_id=self.cluster_id,
            r=self.r,
            errors_found=self.errors_found,
            c=self.c,
            eta=self.errors_found / self.r,
            passes=summaries,
        )


def reconcile_reference(bits, cluster_id, shared_seed, eta_est,
                        send, recv) -> ReconciliationReport:
    """Run the parity-source side; its bits are never modified."""
    eng = _Engine(ROLE_REFERENCE, bits, cluster_id, shared_seed, eta_est,
                  send, recv)
    return eng.run()


def reconcile_correcting(bits, cluster_id, shared_seed, eta_est,
                         send, recv) -> tuple[np.ndarray, ReconciliationReport]:
    """Run the correcting side; returns the flipped bit array."""
    eng = _Engine(ROLE_CORRECTING, bits, cluster_id, shared_seed, eta_est,
                  send, recv)
    report = eng.run()
    return eng.bits, report


def reconcile_pair(bits_ref, bits_cor, cluster_id=0, shared_seed=1,
                   eta_est=DEFAULT_ETA, transcript=None):
    """Reconcile two in-memory bit arrays over an in-process channel.

    Returns (corrected bits, reference report, correcting report).
    Mostly a test harness; the node wires the same engine functions to
    a socket instead.
    """
    chan = PairChannel(transcript)
    box: dict = {}

    def _ref():
        try:
            box["report"] = reconcile_reference(
                bits_ref, cluster_id, shared_seed, eta_est,
                chan.a.send, chan.a.recv)
        except BaseException as exc:
            box["error"] = exc

    worker = threading.Thread(target=_ref, daemon=True)
    worker.start()
    try:
        corrected, rep_cor = reconcile_correcting(
            bits_cor, cluster_id, shared_seed, eta_est,
            chan.b.send, chan.b.recv)
    finally:
        worker.join(timeout=120.0)
    if "error" in box:
        raise ReconcileAborted("reference engine failed") from box["error"]
    if worker.is_alive():
        raise ReconcileAborted("reference engine did not finish")
    return corrected, box["report"], rep_cor
