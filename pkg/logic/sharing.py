"""
Additive secret sharing over Z_2^64 with cost accounting.

A secret vector is split into per-party uint64 vectors that sum to it mod
2^64. Local linear operations are free; every opening, reshare or modeled
comparison is charged to a ``CostMeter`` in bytes per (sender, receiver)
pair and in protocol rounds.

Two interchangeable backends execute the per-party work:

- ``SimulationBackend``: every party's step runs inline, openings are plain
  ring sums (CrypTen simulation-mode analog).
- ``MultiPartyBackend``: one single-thread worker per party; openings travel
  over a ``queue.Queue`` channel to the receiver.

Share randomness always comes from the generator passed by the caller, so
both backends produce bit-identical shares and revealed values.
"""
import logging
import queue
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import reduce
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from logic.errors import (
    DealerExhaustedError,
    InvalidatedShareError,
    LengthMismatchError,
    OwnershipError,
    UnknownPartySetError,
)
from logic.ring_fixed import DEFAULT_FRAC_BITS, FixedScalar, FixedVec, encode

logger = logging.getLogger(__name__)

SHARE_BYTES = 8
SEMI_HONEST = "semi-honest"
TRUSTED = "trusted"

_U64_MAX = np.iinfo(np.uint64).max


def random_ring(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, _U64_MAX, size=shape, dtype=np.uint64, endpoint=True)


def ring_sum(vectors: Sequence[np.ndarray]) -> np.ndarray:
    return reduce(np.add, vectors)


def split_secret(secret: np.ndarray, parties: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Uniform additive shares: parties-1 random masks, the last one closes the sum."""
    secret = np.asarray(secret, dtype=np.uint64)
    if parties == 1:
        return [secret.copy()]
    masks = [random_ring(rng, secret.shape) for _ in range(parties - 1)]
    return masks + [secret - ring_sum(masks)]


def _shift_share(share: np.ndarray, frac_bits: int) -> np.ndarray:
    return (share.view(np.int64) >> np.int64(frac_bits)).view(np.uint64)


# ============================================================================
# CLASES DE DATOS
# ============================================================================

@dataclass(frozen=True)
class PartySet:
    """A committee of compute parties (``G``, ``E1``..) or a single trusted server."""
    id: str
    size: int = 2
    corruption_model: str = SEMI_HONEST

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"party set {self.id}: size must be >= 1")
        if self.size == 1 and self.corruption_model != TRUSTED:
            raise ValueError(f"party set {self.id}: an MPC committee needs at least 2 compute parties")

    @property
    def members(self) -> List[str]:
        if self.size == 1:
            return [self.id]
        return [f"{self.id}.{k}" for k in range(self.size)]

    @property
    def is_committee(self) -> bool:
        return self.size > 1


@dataclass(eq=False)
class ShareSet:
    owner: str
    shares: List[np.ndarray]
    frac_bits: int = DEFAULT_FRAC_BITS
    valid: bool = True

    def __post_init__(self):
        shapes = {s.shape for s in self.shares}
        if len(shapes) != 1:
            raise LengthMismatchError(f"party shares of {self.owner} differ in shape: {sorted(shapes)}")

    def __len__(self) -> int:
        return int(self.shares[0].shape[-1]) if self.shares[0].ndim else 1

    @property
    def shape(self) -> tuple:
        return self.shares[0].shape

    @property
    def size(self) -> int:
        return int(self.shares[0].size)


@dataclass(frozen=True)
class CostSnapshot:
    bytes: int = 0
    rounds: int = 0
    comparisons: int = 0
    beaver_triples: int = 0

    def __sub__(self, other: "CostSnapshot") -> "CostSnapshot":
        return CostSnapshot(self.bytes - other.bytes, self.rounds - other.rounds,
                            self.comparisons - other.comparisons,
                            self.beaver_triples - other.beaver_triples)

    def as_dict(self) -> Dict[str, int]:
        return {"bytes": self.bytes, "rounds": self.rounds,
                "comparisons": self.comparisons, "beaver_triples": self.beaver_triples}


@dataclass(frozen=True)
class RevealRecord:
    owner: str
    recipient: str
    length: int


class CostMeter:
    """Monotone counters; safe to update from concurrent cluster tasks."""

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes_sent: Dict[Tuple[str, str], int] = defaultdict(int)
        self.rounds = 0
        self.comparisons = 0
        self.beaver_triples = 0

    def charge_bytes(self, sender: str, receiver: str, nbytes: int) -> None:
        if nbytes <= 0 or sender == receiver:
            return
        with self._lock:
            self.bytes_sent[(sender, receiver)] += int(nbytes)
        logger.debug("charge %d bytes %s -> %s", nbytes, sender, receiver)

    def add_rounds(self, n: int = 1) -> None:
        with self._lock:
            self.rounds += int(n)

    def add_comparisons(self, n: int) -> None:
        with self._lock:
            self.comparisons += int(n)

    def add_triples(self, n: int) -> None:
        with self._lock:
            self.beaver_triples += int(n)

    @property
    def total_bytes(self) -> int:
        with self._lock:
            return sum(self.bytes_sent.values())

    def bytes_between(self, sender_prefix: str = "", receiver_prefix: str = "") -> int:
        """Bytes on all pairs whose sender and receiver names start with the given prefixes."""
        with self._lock:
            return sum(v for (s, r), v in self.bytes_sent.items()
                       if s.startswith(sender_prefix) and r.startswith(receiver_prefix))

    def snapshot(self) -> CostSnapshot:
        with self._lock:
            return CostSnapshot(sum(self.bytes_sent.values()), self.rounds,
                                self.comparisons, self.beaver_triples)


class TripleDealer:
    """Trusted helper that hands out Beaver triples (a, b, ab) from its own stream."""

    def __init__(self, seed: int = 0, budget: int = 0):
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()
        self.budget = int(budget)
        self.issued = 0

    def draw(self, shape, parties: int) -> Tuple[List[np.ndarray], List[np.ndarray], List[np.ndarray]]:
        count = int(np.prod(shape))
        with self._lock:
            if self.budget and self.issued + count > self.budget:
                raise DealerExhaustedError(
                    f"triple budget {self.budget} exhausted ({self.issued} issued, {count} requested)")
            self.issued += count
            a = random_ring(self._rng, shape)
            b = random_ring(self._rng, shape)
            return (split_secret(a, parties, self._rng),
                    split_secret(b, parties, self._rng),
                    split_secret(a * b, parties, self._rng))


# ============================================================================
# BACKENDS
# ============================================================================

class SimulationBackend:
    name = "fixed_sim"

    def local(self, members: Sequence[str], fn, *per_party) -> List[np.ndarray]:
        return [fn(*args) for args in zip(*per_party)]

    def open(self, members: Sequence[str], shares: Sequence[np.ndarray]) -> np.ndarray:
        return ring_sum(shares)

    def close(self) -> None:
        pass


class MultiPartyBackend:
    """Each party is a single-thread worker; openings are messages on a channel."""
    name = "multi_party"

    def __init__(self):
        self._workers: Dict[str, ThreadPoolExecutor] = {}
        self._lock = threading.Lock()

    def _worker(self, member: str) -> ThreadPoolExecutor:
        with self._lock:
            worker = self._workers.get(member)
            if worker is None:
                worker = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"party-{member}")
                self._workers[member] = worker
            return worker

    def local(self, members: Sequence[str], fn, *per_party) -> List[np.ndarray]:
        futures = [self._worker(m).submit(fn, *args) for m, args in zip(members, zip(*per_party))]
        return [f.result() for f in futures]

    def open(self, members: Sequence[str], shares: Sequence[np.ndarray]) -> np.ndarray:
        channel: "queue.Queue[Tuple[int, np.ndarray]]" = queue.Queue()
        for k, (m, share) in enumerate(zip(members, shares)):
            self._worker(m).submit(channel.put, (k, share))
        received = dict(channel.get() for _ in shares)
        return ring_sum([received[k] for k in range(len(shares))])

    def close(self) -> None:
        with self._lock:
            workers, self._workers = list(self._workers.values()), {}
        for worker in workers:
            worker.shutdown(wait=True)


BACKENDS = {"fixed_sim": SimulationBackend, "float": SimulationBackend, "multi_party": MultiPartyBackend}


# ============================================================================
# MOTOR DE COMPARTICION
# ============================================================================

class SharingEngine:
    """Share/Reshare/Reveal plus local linear ops, Beaver products and modeled comparisons."""

    def __init__(self, backend: str = "fixed_sim", frac_bits: int = DEFAULT_FRAC_BITS,
                 compare_bytes: int = 64, compare_rounds: int = 7,
                 dealer: Optional[TripleDealer] = None, meter: Optional[CostMeter] = None):
        if backend not in BACKENDS:
            raise ValueError(f"unknown sharing backend '{backend}'")
        self.backend = BACKENDS[backend]()
        self.frac_bits = frac_bits
        self.compare_bytes = compare_bytes
        self.compare_rounds = compare_rounds
        self.dealer = dealer or TripleDealer()
        self.meter = meter or CostMeter()
        self.reveal_log: List[RevealRecord] = []
        self._party_sets: Dict[str, PartySet] = {}
        self._log_lock = threading.Lock()

    def close(self) -> None:
        self.backend.close()

    # ------------------------------------------------------------------ parties

    def register(self, party_set: PartySet) -> PartySet:
        known = self._party_sets.get(party_set.id)
        if known is not None and known != party_set:
            raise ValueError(f"party set id '{party_set.id}' already registered with another shape")
        self._party_sets[party_set.id] = party_set
        return party_set

    def party_set(self, ref: Union[str, PartySet]) -> PartySet:
        key = ref.id if isinstance(ref, PartySet) else ref
        try:
            return self._party_sets[key]
        except KeyError:
            raise UnknownPartySetError(f"party set '{key}' is not registered") from None

    def _members(self, s: ShareSet) -> List[str]:
        return self.party_set(s.owner).members

    def _check(self, *sets: ShareSet) -> None:
        for s in sets:
            if not s.valid:
                raise InvalidatedShareError(f"shares owned by {s.owner} were consumed by a reshare")

    def _same(self, a: ShareSet, b: ShareSet) -> None:
        self._check(a, b)
        if a.owner != b.owner:
            raise OwnershipError(f"operands owned by {a.owner} and {b.owner}")
        if a.shape != b.shape:
            raise LengthMismatchError(f"operand shapes {a.shape} and {b.shape}")
        if a.frac_bits != b.frac_bits:
            raise ValueError(f"operand fracBits {a.frac_bits} and {b.frac_bits}")

    def _log_reveal(self, owner: str, recipient: str, length: int) -> None:
        with self._log_lock:
            self.reveal_log.append(RevealRecord(owner, recipient, length))

    def reveal_sinks(self) -> set:
        with self._log_lock:
            return {r.recipient for r in self.reveal_log}

    # ------------------------------------------------------------------ share / reshare / reveal

    def share(self, secret: FixedVec, target: Union[str, PartySet], rng: np.random.Generator,
              sender: str = "dealer") -> ShareSet:
        ps = self.party_set(target)
        shares = split_secret(secret.raw, ps.size, rng)
        self.charge_input_sharing(sender, ps, secret.raw.size)
        return ShareSet(ps.id, shares, secret.frac_bits)

    def charge_input_sharing(self, sender: str, target: Union[str, PartySet], length: int) -> None:
        """Cost of a sender secret-sharing ``length`` elements to a committee."""
        ps = self.party_set(target)
        for member in ps.members:
            self.meter.charge_bytes(sender, member, length * SHARE_BYTES)
        self.meter.add_rounds(1)

    def local_result(self, value: FixedVec, owner: Union[str, PartySet], rng: np.random.Generator) -> ShareSet:
        """Fresh shares of a value produced inside the owner's own protocol (no charge)."""
        ps = self.party_set(owner)
        return ShareSet(ps.id, split_secret(value.raw, ps.size, rng), value.frac_bits)

    def public_constant(self, values: np.ndarray, owner: Union[str, PartySet], frac_bits: int = 0) -> ShareSet:
        ps = self.party_set(owner)
        values = np.asarray(values).astype(np.int64).view(np.uint64)
        shares = [values.copy()] + [np.zeros_like(values) for _ in range(ps.size - 1)]
        return ShareSet(ps.id, shares, frac_bits)

    def reshare(self, s: ShareSet, from_: Union[str, PartySet], to: Union[str, PartySet],
                rng: np.random.Generator) -> ShareSet:
        src, dst = self.party_set(from_), self.party_set(to)
        if s.owner != src.id:
            raise OwnershipError(f"shares owned by {s.owner}, not by {src.id}")
        self._check(s)
        seeds = rng.integers(0, 2 ** 63, size=src.size)
        subshares = self.backend.local(
            src.members,
            lambda share, seed: split_secret(share, dst.size, np.random.default_rng(int(seed))),
            s.shares, list(seeds))
        fresh = [ring_sum([subshares[i][j] for i in range(src.size)]) for j in range(dst.size)]
        nbytes = s.size * SHARE_BYTES
        for sender in src.members:
            for receiver in dst.members:
                self.meter.charge_bytes(sender, receiver, nbytes)
        self.meter.add_rounds(1)
        s.valid = False
        if not dst.is_committee:
            self._log_reveal(src.id, dst.id, len(s))
        return ShareSet(dst.id, fresh, s.frac_bits)

    def reveal(self, s: ShareSet, to: Union[str, PartySet]) -> FixedVec:
        """Open ``s`` to a party or party set.

        Each recipient receives the shares it does not hold: (size-1) x length x 8
        bytes for a member of the owning committee, size x length x 8 for an
        outside party.
        """
        self._check(s)
        members = self._members(s)
        if isinstance(to, PartySet) or to in self._party_sets:
            target = self.party_set(to)
            label, recipients = target.id, target.members
        else:
            label, recipients = str(to), [str(to)]
        value = self.backend.open(members, s.shares)
        for recipient in recipients:
            for member in members:
                self.meter.charge_bytes(member, recipient, s.size * SHARE_BYTES)
        self.meter.add_rounds(1)
        self._log_reveal(s.owner, label, len(s))
        return FixedVec(value, s.frac_bits)

    def simulated_plaintext(self, s: ShareSet) -> np.ndarray:
        """Signed raw values the owner's simulated protocol operates on.

        Not a reveal: nothing is charged or logged and the result never
        leaves the owning committee's computation.
        """
        self._check(s)
        return self.backend.open(self._members(s), s.shares).view(np.int64)

    # ------------------------------------------------------------------ local linear ops

    def add_shares(self, a: ShareSet, b: ShareSet) -> ShareSet:
        self._same(a, b)
        return ShareSet(a.owner, self.backend.local(self._members(a), np.add, a.shares, b.shares), a.frac_bits)

    def sub_shares(self, a: ShareSet, b: ShareSet) -> ShareSet:
        self._same(a, b)
        return ShareSet(a.owner, self.backend.local(self._members(a), np.subtract, a.shares, b.shares), a.frac_bits)

    def copy(self, s: ShareSet) -> ShareSet:
        self._check(s)
        return ShareSet(s.owner, [x.copy() for x in s.shares], s.frac_bits)

    def select(self, s: ShareSet, indices) -> ShareSet:
        self._check(s)
        idx = np.asarray(indices, dtype=np.int64)
        return ShareSet(s.owner, [x[..., idx] for x in s.shares], s.frac_bits)

    def reduce_sum(self, s: ShareSet, axis: int = -1) -> ShareSet:
        self._check(s)
        summed = self.backend.local(self._members(s), lambda x: np.atleast_1d(x.sum(axis=axis, dtype=np.uint64)),
                                    s.shares)
        return ShareSet(s.owner, summed, s.frac_bits)

    def scalar_mul(self, c: Union[FixedScalar, float], a: ShareSet) -> ShareSet:
        self._check(a)
        if not isinstance(c, FixedScalar):
            c = encode(float(c), a.frac_bits)
        factor = np.uint64(c.raw)
        products = self.backend.local(self._members(a), lambda x: x * factor, a.shares)
        return ShareSet(a.owner, self._truncate(a.owner, products, a.frac_bits), a.frac_bits)

    def _truncate(self, owner: str, products: List[np.ndarray], frac_bits: int) -> List[np.ndarray]:
        """Shift each share by f bits; the helper fixes the carry on party 0.

        The correction is dealer-side correlated randomness, so it is not
        charged. The result equals the arithmetic shift of the shared product.
        """
        members = self.party_set(owner).members
        shifted = self.backend.local(members, lambda p: _shift_share(p, frac_bits), products)
        if len(products) == 1:
            return shifted
        exact = _shift_share(self.backend.open(members, products), frac_bits)
        shifted[0] = shifted[0] + (exact - ring_sum(shifted))
        return shifted

    # ------------------------------------------------------------------ multiplication

    def _beaver_products(self, a: ShareSet, b: ShareSet) -> List[np.ndarray]:
        """Untruncated shares of the elementwise ring product a * b."""
        members = self._members(a)
        if len(members) == 1:
            return [a.shares[0] * b.shares[0]]
        shape = a.shape
        ta, tb, tc = self.dealer.draw(shape, len(members))
        d = self.backend.open(members, self.backend.local(members, np.subtract, a.shares, ta))
        e = self.backend.open(members, self.backend.local(members, np.subtract, b.shares, tb))
        nbytes = 2 * a.size * SHARE_BYTES
        for sender in members:
            for receiver in members:
                self.meter.charge_bytes(sender, receiver, nbytes)
        self.meter.add_rounds(1)
        self.meter.add_triples(a.size)
        z = self.backend.local(members, lambda c_k, b_k, a_k: c_k + d * b_k + e * a_k, tc, tb, ta)
        z[0] = z[0] + d * e
        return z

    def _broadcast(self, a: ShareSet, b: ShareSet) -> Tuple[ShareSet, ShareSet]:
        if a.shape != b.shape and a.size == 1:
            a = ShareSet(a.owner, [np.broadcast_to(x.reshape(-1)[:1], b.shape).copy() for x in a.shares], a.frac_bits)
        elif a.shape != b.shape and b.size == 1:
            b = ShareSet(b.owner, [np.broadcast_to(x.reshape(-1)[:1], a.shape).copy() for x in b.shares], b.frac_bits)
        return a, b

    def beaver_mul(self, a: ShareSet, b: ShareSet) -> ShareSet:
        """Elementwise product with one Beaver triple per element; a length-1 operand broadcasts."""
        self._check(a, b)
        a, b = self._broadcast(a, b)
        self._same(a, b)
        products = self._beaver_products(a, b)
        return ShareSet(a.owner, self._truncate(a.owner, products, a.frac_bits), a.frac_bits)

    def inner_product(self, a: ShareSet, b: ShareSet) -> ShareSet:
        """Dot product, truncated once after the local sum (length-1 result)."""
        self._same(a, b)
        members = self._members(a)
        products = self._beaver_products(a, b)
        summed = self.backend.local(members, lambda z: np.atleast_1d(z.sum(dtype=np.uint64)), products)
        return ShareSet(a.owner, self._truncate(a.owner, summed, a.frac_bits), a.frac_bits)

    # ------------------------------------------------------------------ comparisons

    def charge_modeled(self, owner: Union[str, PartySet], elements: int, rounds: int) -> None:
        """Modeled cost of a non-linear step (comparison-priced per element)."""
        members = self.party_set(owner).members
        if len(members) > 1:
            for k, sender in enumerate(members):
                self.meter.charge_bytes(sender, members[(k + 1) % len(members)], elements * self.compare_bytes)
        self.meter.add_rounds(rounds)

    def _fresh(self, owner: str, values: np.ndarray, frac_bits: int, rng: np.random.Generator) -> ShareSet:
        ps = self.party_set(owner)
        return ShareSet(owner, split_secret(values.view(np.uint64), ps.size, rng), frac_bits)

    def _compare_exchange(self, slots: List[ShareSet], i: int, j: int, rng: np.random.Generator,
                          payloads: Optional[List[ShareSet]]) -> None:
        lo, hi = slots[i], slots[j]
        self._same(lo, hi)
        lo_v, hi_v = self.simulated_plaintext(lo), self.simulated_plaintext(hi)
        swap = lo_v > hi_v
        slots[i] = self._fresh(lo.owner, np.where(swap, hi_v, lo_v), lo.frac_bits, rng)
        slots[j] = self._fresh(lo.owner, np.where(swap, lo_v, hi_v), lo.frac_bits, rng)
        self.meter.add_comparisons(lo.size)
        members = self._members(lo)
        if len(members) > 1:
            for k, sender in enumerate(members):
                self.meter.charge_bytes(sender, members[(k + 1) % len(members)], lo.size * self.compare_bytes)
        if payloads is not None:
            pa, pb = payloads[i], payloads[j]
            self._same(pa, pb)
            pa_v, pb_v = self.simulated_plaintext(pa), self.simulated_plaintext(pb)
            payloads[i] = self._fresh(pa.owner, np.where(swap, pb_v, pa_v), pa.frac_bits, rng)
            payloads[j] = self._fresh(pa.owner, np.where(swap, pa_v, pb_v), pa.frac_bits, rng)
            # multiplexer on the payload: one masked opening each way
            if len(members) > 1:
                for sender in members:
                    for receiver in members:
                        self.meter.charge_bytes(sender, receiver, 2 * pa.size * SHARE_BYTES)

    def secure_compare_swap(self, lo: ShareSet, hi: ShareSet, rng: np.random.Generator,
                            payload: Optional[Tuple[ShareSet, ShareSet]] = None):
        """Returns (min, max) as fresh shares, plus the payload pair swapped alongside.

        Simulation semantics: the outcome is computed on the plaintext view
        while the full oblivious cost is charged.
        """
        slots = [lo, hi]
        payloads = list(payload) if payload is not None else None
        self.compare_swap_layer(slots, [(0, 1)], rng, payloads)
        if payloads is None:
            return slots[0], slots[1]
        return slots[0], slots[1], (payloads[0], payloads[1])

    def compare_swap_layer(self, slots: List[ShareSet], layer: Sequence[Tuple[int, int]],
                           rng: np.random.Generator, payloads: Optional[List[ShareSet]] = None) -> None:
        """One parallel layer of compare-exchanges, applied in place; rounds charged once."""
        if not layer:
            return
        for i, j in layer:
            self._compare_exchange(slots, i, j, rng, payloads)
        self.meter.add_rounds(self.compare_rounds)
