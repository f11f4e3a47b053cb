"""
Aggregation of secret-shared models at the global committee.

- ``fed_avg``: weighted mean with local linear operations only (zero bytes).
- ``trimmed_mean``: per-coordinate oblivious sort, drop alpha from each end.
- ``tm_variant``: sort only beta sampled coordinates, tally which sources
  land in the trimmed tails, exclude the 2*alpha most frequent sources and
  average the rest.
- ``fl_trust``: clipped cosine trust scores against the server's root update.

Inputs are canonicalized by source id first, so every aggregator is
invariant to the order in which cluster results arrive.
"""
import logging
from dataclasses import dataclass, field
from functools import reduce
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from logic.errors import AggregationError, LengthMismatchError
from logic.ring_fixed import FixedVec, encode_vec
from logic.sharing import CostSnapshot, ShareSet, SharingEngine
from logic.sorting_network import build_bitonic_network

logger = logging.getLogger(__name__)

FEDAVG, TRIMMED_MEAN, TM_VARIANT, FLTRUST = "fedavg", "trimmed_mean", "tm_variant", "fltrust"
AGGREGATORS = (FEDAVG, TRIMMED_MEAN, TM_VARIANT, FLTRUST)


@dataclass
class AggInput:
    models: List[ShareSet]
    source_ids: List[int]
    weights: Optional[List[float]] = None
    reference: Optional[ShareSet] = None  # previous global model, shared at the same committee

    def __post_init__(self):
        if not self.models:
            raise AggregationError("no models to aggregate")
        if len(self.source_ids) != len(self.models):
            raise AggregationError(f"{len(self.models)} models but {len(self.source_ids)} source ids")
        if self.weights is not None and len(self.weights) != len(self.models):
            raise AggregationError(f"{len(self.models)} models but {len(self.weights)} weights")
        shapes = {m.shape for m in self.models}
        if len(shapes) != 1:
            raise LengthMismatchError(f"models differ in length: {sorted(shapes)}")

    @property
    def m(self) -> int:
        return len(self.models)

    @property
    def gamma(self) -> int:
        return len(self.models[0])

    def canonical(self) -> "AggInput":
        order = sorted(range(self.m), key=lambda k: self.source_ids[k])
        return AggInput([self.models[k] for k in order], [self.source_ids[k] for k in order],
                        None if self.weights is None else [self.weights[k] for k in order],
                        self.reference)

    def without(self, positions: Sequence[int]) -> "AggInput":
        drop = set(positions)
        keep = [k for k in range(self.m) if k not in drop]
        return AggInput([self.models[k] for k in keep], [self.source_ids[k] for k in keep],
                        None if self.weights is None else [self.weights[k] for k in keep],
                        self.reference)


@dataclass(frozen=True)
class TrimSpec:
    alpha: int
    beta: int = 100
    rng_seed: int = 0


@dataclass
class AggReport:
    name: str
    excluded_ids: List[int] = field(default_factory=list)
    trust_scores: Dict[int, float] = field(default_factory=dict)
    tally: Dict[int, int] = field(default_factory=dict)
    cost: CostSnapshot = field(default_factory=CostSnapshot)


def _sum(engine: SharingEngine, sets: Sequence[ShareSet]) -> ShareSet:
    return reduce(engine.add_shares, sets)


def _check_alpha(alpha: int, m: int) -> None:
    if alpha < 0 or 2 * alpha >= m:
        raise AggregationError(f"trim.alpha: 2α < m violated (alpha={alpha}, m={m})")


def _deltas(engine: SharingEngine, inputs: AggInput) -> List[ShareSet]:
    if inputs.reference is None:
        raise AggregationError("delta mode needs the previous global model as reference")
    return [engine.sub_shares(w, inputs.reference) for w in inputs.models]


# ============================================================================
# FEDAVG
# ============================================================================

def fed_avg(engine: SharingEngine, inputs: AggInput, report: Optional[AggReport] = None) -> ShareSet:
    """Sum_i (|D_i| / |D|) * w_i, local operations only."""
    inputs = inputs.canonical()
    if inputs.m == 1:
        return engine.copy(inputs.models[0])
    weights = inputs.weights
    if weights is None or len(set(weights)) == 1:
        return engine.scalar_mul(1.0 / inputs.m, _sum(engine, inputs.models))
    total = float(sum(weights))
    if total <= 0:
        raise AggregationError("fedavg weights must sum to a positive value")
    return _sum(engine, [engine.scalar_mul(w / total, model) for w, model in zip(weights, inputs.models)])


# ============================================================================
# TRIMMED MEAN
# ============================================================================

def oblivious_sort(engine: SharingEngine, slots: List[ShareSet], rng: np.random.Generator,
                   payloads: Optional[List[ShareSet]] = None) -> None:
    """Sort shared slots in place, coordinate-wise, with the merge-exchange schedule."""
    schedule = build_bitonic_network(len(slots))
    for layer in schedule.layers:
        engine.compare_swap_layer(slots, layer, rng, payloads)


def trimmed_mean(engine: SharingEngine, inputs: AggInput, alpha: int, rng: np.random.Generator,
                 use_deltas: bool = True, report: Optional[AggReport] = None) -> ShareSet:
    inputs = inputs.canonical()
    _check_alpha(alpha, inputs.m)
    if alpha == 0:
        return fed_avg(engine, AggInput(inputs.models, inputs.source_ids))
    slots = _deltas(engine, inputs) if use_deltas else [engine.copy(w) for w in inputs.models]
    oblivious_sort(engine, slots, rng)
    kept = slots[alpha:inputs.m - alpha]
    mean = engine.scalar_mul(1.0 / len(kept), _sum(engine, kept))
    return engine.add_shares(inputs.reference, mean) if use_deltas else mean


# ============================================================================
# VARIANTE TM (TM-List + TopK-Hitter)
# ============================================================================

def topk_hitters(counts: Sequence[int], source_ids: Sequence[int], k: int) -> List[int]:
    """Positions of the k most frequent sources; ties go to the lower source id."""
    order = sorted(range(len(counts)), key=lambda p: (-int(counts[p]), source_ids[p]))
    return order[:k]


def tm_variant(engine: SharingEngine, inputs: AggInput, trim: TrimSpec, use_deltas: bool = True,
               report: Optional[AggReport] = None) -> ShareSet:
    inputs = inputs.canonical()
    m, gamma, alpha = inputs.m, inputs.gamma, trim.alpha
    _check_alpha(alpha, m)
    if not 1 <= trim.beta <= gamma:
        raise AggregationError(f"trim.beta: need 1 <= beta <= {gamma}, got {trim.beta}")
    if alpha == 0:
        return fed_avg(engine, inputs)
    rng = np.random.default_rng(trim.rng_seed)
    indices = np.sort(rng.choice(gamma, size=trim.beta, replace=False))
    base = _deltas(engine, inputs) if use_deltas else inputs.models
    slots = [engine.select(x, indices) for x in base]
    owner = slots[0].owner
    payloads = []
    for k in range(m):
        onehot = np.zeros((m, trim.beta), dtype=np.int64)
        onehot[k, :] = 1
        payloads.append(engine.public_constant(onehot, owner))
    oblivious_sort(engine, slots, rng, payloads)

    tails = payloads[:alpha] + payloads[m - alpha:]
    tally = engine.reduce_sum(_sum(engine, tails), axis=-1)
    counts = engine.reveal(tally, owner).signed
    excluded = topk_hitters(counts, inputs.source_ids, 2 * alpha)
    excluded_ids = sorted(inputs.source_ids[p] for p in excluded)
    logger.info("tm_variant beta=%d: excluded sources %s (tally %s)", trim.beta, excluded_ids, counts.tolist())
    if report is not None:
        report.excluded_ids = excluded_ids
        report.tally = {inputs.source_ids[p]: int(counts[p]) for p in range(m)}
    return fed_avg(engine, inputs.without(excluded))


# ============================================================================
# FLTRUST
# ============================================================================

def fltrust_combine(root_update: np.ndarray, updates: Sequence[np.ndarray]) -> Tuple[np.ndarray, List[float]]:
    """Plaintext FLTrust: returns (combined update, trust scores)."""
    g0 = np.asarray(root_update, dtype=np.float64)
    n0 = float(np.linalg.norm(g0))
    if n0 == 0.0:
        raise AggregationError("fltrust root update is zero")
    scores, scaled = [], []
    for g in updates:
        g = np.asarray(g, dtype=np.float64)
        ni = float(np.linalg.norm(g))
        score = 0.0 if ni == 0.0 else min(1.0, max(0.0, float(g0 @ g) / (n0 * ni)))
        scores.append(score)
        scaled.append(g * (n0 / ni) if ni else np.zeros_like(g0))
    total = sum(scores)
    if total == 0.0:
        return np.zeros_like(g0), scores
    return sum(s * g for s, g in zip(scores, scaled)) / total, scores


def fl_trust(engine: SharingEngine, inputs: AggInput, root_update: ShareSet, rng: np.random.Generator,
             report: Optional[AggReport] = None) -> ShareSet:
    """Secure FLTrust over shared updates w_i - M_{t-1}.

    Dot products and norms use Beaver multiplication; the square roots,
    division and clipping run on the committee's simulated values and are
    charged at the modeled comparison price.
    """
    inputs = inputs.canonical()
    if inputs.reference is None:
        raise AggregationError("fltrust needs the previous global model as reference")
    owner = root_update.owner
    scale = float(1 << root_update.frac_bits)
    updates = _deltas(engine, inputs)

    def scalar(s: ShareSet) -> float:
        return float(engine.simulated_plaintext(s)[0]) / scale

    n0 = scalar(engine.inner_product(root_update, root_update))
    if n0 <= 0.0:
        raise AggregationError("fltrust root update is zero")
    dots = [scalar(engine.inner_product(root_update, g)) for g in updates]
    norms = [scalar(engine.inner_product(g, g)) for g in updates]
    engine.charge_modeled(owner, 2 * inputs.m + 1, engine.compare_rounds)
    engine.meter.add_comparisons(inputs.m)

    scores = []
    for d, ni in zip(dots, norms):
        scores.append(0.0 if ni <= 0.0 else min(1.0, max(0.0, d / np.sqrt(n0 * ni))))
    if report is not None:
        report.trust_scores = {sid: s for sid, s in zip(inputs.source_ids, scores)}
    total = sum(scores)
    if total == 0.0:
        logger.warning("fltrust: every trust score is 0, keeping the previous global model")
        return engine.copy(inputs.reference)

    terms = []
    for s, ni, g in zip(scores, norms, updates):
        if s == 0.0:
            continue
        coeff = engine.local_result(encode_vec([s * np.sqrt(n0 / ni) / total], g.frac_bits), owner, rng)
        terms.append(engine.beaver_mul(coeff, g))
    return engine.add_shares(inputs.reference, _sum(engine, terms))


def run_aggregator(engine: SharingEngine, name: str, inputs: AggInput, rng: np.random.Generator,
                   trim: Optional[TrimSpec] = None, use_deltas: bool = True,
                   root_update: Optional[ShareSet] = None) -> Tuple[ShareSet, AggReport]:
    """Dispatch by name and record the cost delta of the aggregation step."""
    report = AggReport(name)
    before = engine.meter.snapshot()
    if name == FEDAVG:
        out = fed_avg(engine, inputs, report)
    elif name == TRIMMED_MEAN:
        out = trimmed_mean(engine, inputs, trim.alpha, rng, use_deltas, report)
    elif name == TM_VARIANT:
        out = tm_variant(engine, inputs, trim, use_deltas, report)
    elif name == FLTRUST:
        if root_update is None:
            raise AggregationError("fltrust needs a root update")
        out = fl_trust(engine, inputs, root_update, rng, report)
    else:
        raise AggregationError(f"unknown aggregator '{name}'")
    report.cost = engine.meter.snapshot() - before
    return out, report
