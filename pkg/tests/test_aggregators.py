import sys
import os

# Add the project root to sys.path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from logic.aggregators import (
    AGGREGATORS,
    FEDAVG,
    TM_VARIANT,
    TRIMMED_MEAN,
    AggInput,
    TrimSpec,
    fed_avg,
    fl_trust,
    fltrust_combine,
    run_aggregator,
    tm_variant,
    topk_hitters,
    trimmed_mean,
)
from logic.errors import AggregationError
from logic.nn import lenet
from logic.ring_fixed import FixedVec, decode_vec, encode, encode_vec
from logic.sharing import PartySet, SharingEngine

F = 22
MASK = (1 << 64) - 1


def make_engine():
    engine = SharingEngine()
    engine.register(PartySet("G", 2))
    return engine


def share_all(engine, rows, seed=0):
    rng = np.random.default_rng(seed)
    return [engine.local_result(encode_vec(r), "G", rng) for r in rows]


def reveal(engine, s):
    return decode_vec(engine.reveal(s, "test"))


# --- FedAvg ---

def test_fedavg_of_lenet_sized_models_costs_zero_bytes():
    gamma = lenet().param_count
    rng = np.random.default_rng(0)
    rows = rng.normal(0, 0.1, size=(10, gamma))
    engine = make_engine()
    out = fed_avg(engine, AggInput(share_all(engine, rows), list(range(10))))
    assert engine.meter.snapshot().bytes == 0
    assert np.max(np.abs(reveal(engine, out) - rows.mean(axis=0))) < 1e-5


def test_fedavg_weights_and_single_model():
    engine = make_engine()
    a, b = share_all(engine, [[1.0, 2.0], [5.0, -2.0]])
    out = fed_avg(engine, AggInput([a, b], [0, 1], weights=[1.0, 3.0]))
    assert np.allclose(reveal(engine, out), [4.0, -1.0], atol=1e-5)
    single = fed_avg(engine, AggInput([a], [0]))
    assert np.array_equal(reveal(engine, single), [1.0, 2.0])


def test_inputs_must_agree():
    engine = make_engine()
    a, b = share_all(engine, [[1.0, 2.0], [1.0, 2.0]])
    c = share_all(engine, [[1.0, 2.0, 3.0]])[0]
    with pytest.raises(ValueError):
        AggInput([a, c], [0, 1])
    with pytest.raises(AggregationError):
        AggInput([a, b], [0])
    with pytest.raises(AggregationError):
        AggInput([], [])


# --- Trimmed mean ---

def test_trimmed_mean_matches_plaintext_oracle():
    """Oblivious sort-and-trim equals the plaintext oracle bit for bit."""
    m, gamma, alpha = 10, 50, 2
    c = encode(1.0 / (m - 2 * alpha)).raw
    rng = np.random.default_rng(1)
    for instance in range(100):
        raw = np.stack([rng.choice(1 << 26, size=m, replace=False) - (1 << 25) for _ in range(gamma)], axis=1)
        engine = make_engine()
        models = [engine.local_result(FixedVec(r.astype(np.int64).view(np.uint64)), "G", rng) for r in raw]
        out = engine.reveal(trimmed_mean(engine, AggInput(models, list(range(m))), alpha, rng, use_deltas=False), "t")
        kept = np.sort(raw, axis=0)[alpha:m - alpha]
        expected = [((int(s) * c) >> F) & MASK for s in kept.sum(axis=0)]
        assert [int(v) for v in out.raw] == expected, f"instance {instance}"


def test_trimmed_mean_drops_extremes_in_delta_mode():
    engine = make_engine()
    rows = [[0.0, 1.0], [1.0, 1.0], [2.0, 1.0], [3.0, 1.0], [100.0, -50.0]]
    models = share_all(engine, rows)
    reference = share_all(engine, [[1.0, 1.0]], seed=1)[0]
    out = trimmed_mean(engine, AggInput(models, list(range(5)), reference=reference), 1,
                       np.random.default_rng(0))
    assert np.allclose(reveal(engine, out), [2.0, 1.0], atol=1e-5)


def test_trimmed_mean_counts_comparisons():
    engine = make_engine()
    models = share_all(engine, np.random.default_rng(2).normal(size=(10, 40)))
    trimmed_mean(engine, AggInput(models, list(range(10))), 2, np.random.default_rng(0), use_deltas=False)
    assert engine.meter.comparisons == 40 * 31


def test_alpha_must_leave_a_majority():
    engine = make_engine()
    models = share_all(engine, np.zeros((4, 3)))
    with pytest.raises(AggregationError, match="2α < m"):
        trimmed_mean(engine, AggInput(models, list(range(4))), 2, np.random.default_rng(0), use_deltas=False)


# --- TM variant ---

def test_tm_variant_excludes_exactly_2alpha_including_the_outlier():
    rng = np.random.default_rng(3)
    for trial in range(5):
        rows = rng.normal(0, 0.1, size=(10, 300))
        outlier = int(rng.integers(0, 10))
        rows[outlier] += 5.0
        engine = make_engine()
        ids = [10 + k for k in range(10)]
        inputs = AggInput(share_all(engine, rows, seed=trial), ids, reference=share_all(engine, [np.zeros(300)])[0])
        _, report = run_aggregator(engine, TM_VARIANT, inputs, rng, trim=TrimSpec(2, 100, rng_seed=trial))
        assert len(report.excluded_ids) == 4
        assert 10 + outlier in report.excluded_ids
        assert report.cost.comparisons == 100 * 31
        # only the tally (length m) is opened, and only to G
        assert [(r.recipient, r.length) for r in engine.reveal_log] == [("G", 10)]


def test_tm_variant_averages_the_survivors():
    engine = make_engine()
    rows = np.array([[1.0] * 5, [1.0] * 5, [1.0] * 5, [9.0] * 5, [-9.0] * 5])
    inputs = AggInput(share_all(engine, rows), list(range(5)), reference=share_all(engine, [np.zeros(5)])[0])
    out = tm_variant(engine, inputs, TrimSpec(1, 5, rng_seed=0))
    assert np.allclose(reveal(engine, out), np.ones(5), atol=1e-5)


def test_tm_variant_beta_range():
    engine = make_engine()
    inputs = AggInput(share_all(engine, np.zeros((5, 4))), list(range(5)),
                      reference=share_all(engine, [np.zeros(4)])[0])
    with pytest.raises(AggregationError):
        tm_variant(engine, inputs, TrimSpec(1, 5))


def test_variant_cost_reduction_on_lenet():
    gamma = lenet().param_count
    rows = np.random.default_rng(4).normal(0, 0.05, size=(10, gamma))
    costs = {}
    for name in (TRIMMED_MEAN, TM_VARIANT):
        engine = make_engine()
        inputs = AggInput(share_all(engine, rows), list(range(10)), reference=share_all(engine, [np.zeros(gamma)])[0])
        _, report = run_aggregator(engine, name, inputs, np.random.default_rng(0), trim=TrimSpec(2, 100))
        costs[name] = report.cost.comparisons
    assert costs[TRIMMED_MEAN] == gamma * 31
    assert costs[TM_VARIANT] * gamma == costs[TRIMMED_MEAN] * 100
    assert costs[TRIMMED_MEAN] / costs[TM_VARIANT] > 400


def test_topk_hitters_breaks_ties_by_lower_id():
    assert topk_hitters([3, 5, 5, 1], [7, 4, 2, 9], 2) == [2, 1]
    assert topk_hitters([1, 1, 1], [3, 1, 2], 1) == [1]


# --- FLTrust ---

def test_fltrust_scores_for_aligned_orthogonal_and_opposite_updates():
    g0 = np.array([1.0, 2.0, -1.0])
    orthogonal = np.array([2.0, -1.0, 0.0])
    _, scores = fltrust_combine(g0, [3 * g0, orthogonal, -g0])
    assert abs(scores[0] - 1.0) < 1e-9
    assert abs(scores[1]) < 1e-9
    assert abs(scores[2]) < 1e-9


def test_fltrust_closed_form_example():
    combined, scores = fltrust_combine(np.array([1.0, 0.0]),
                                       [np.array([2.0, 0.0]), np.array([0.0, 3.0]), np.array([1.0, 1.0])])
    assert np.allclose(scores, [1.0, 0.0, 1 / np.sqrt(2)], atol=1e-9)
    expected = np.array([1.5, 0.5]) / (1 + 1 / np.sqrt(2))
    assert np.max(np.abs(combined - expected)) < 1e-6


def test_secure_fltrust_matches_plaintext():
    rng = np.random.default_rng(5)
    g0 = rng.normal(0, 0.5, size=20)
    updates = [g0 + rng.normal(0, 0.3, size=20), rng.normal(0, 0.5, size=20), -g0]
    base = rng.normal(0, 0.5, size=20)
    engine = make_engine()
    models = share_all(engine, [base + u for u in updates])
    reference = share_all(engine, [base], seed=1)[0]
    root = share_all(engine, [g0], seed=2)[0]
    _, report = run_aggregator(engine, "fltrust", AggInput(models, [0, 1, 2], reference=reference),
                               rng, root_update=root)
    out = fl_trust(engine, AggInput(share_all(engine, [base + u for u in updates], seed=3), [0, 1, 2],
                                    reference=share_all(engine, [base], seed=4)[0]),
                   share_all(engine, [g0], seed=5)[0], rng)
    combined, scores = fltrust_combine(g0, updates)
    assert np.allclose([report.trust_scores[k] for k in range(3)], scores, atol=1e-4)
    assert np.max(np.abs(reveal(engine, out) - (base + combined))) < 1e-3
    assert report.cost.beaver_triples > 0
    assert report.cost.comparisons == 3


def test_fltrust_all_zero_scores_keeps_reference():
    engine = make_engine()
    g0 = np.array([1.0, 1.0])
    models = share_all(engine, [-g0, -2 * g0])
    reference = share_all(engine, [[0.5, 0.5]], seed=1)[0]
    out = fl_trust(engine, AggInput(models, [0, 1], reference=reference), share_all(engine, [g0], seed=2)[0],
                   np.random.default_rng(0))
    assert np.array_equal(reveal(engine, out), [0.5, 0.5])


def test_fltrust_rejects_zero_root_update():
    engine = make_engine()
    models = share_all(engine, [[1.0, 0.0]])
    with pytest.raises(AggregationError):
        fl_trust(engine, AggInput(models, [0], reference=share_all(engine, [[0.0, 0.0]])[0]),
                 share_all(engine, [[0.0, 0.0]])[0], np.random.default_rng(0))


def test_run_aggregator_reports_cost_and_rejects_unknown_names():
    engine = make_engine()
    models = share_all(engine, np.ones((3, 4)))
    _, report = run_aggregator(engine, FEDAVG, AggInput(models, [2, 0, 1]), np.random.default_rng(0))
    assert report.name == FEDAVG and report.excluded_ids == [] and report.cost.bytes == 0
    with pytest.raises(AggregationError):
        run_aggregator(engine, "median", AggInput(models, [0, 1, 2]), np.random.default_rng(0))


# --- properties shared by every aggregator ---

def aggregate_in_order(name, rows, ids, weights, base, g0, order):
    engine = make_engine()
    inputs = AggInput(share_all(engine, [rows[k] for k in order], seed=int(order[0])),
                      [ids[k] for k in order], [weights[k] for k in order],
                      reference=share_all(engine, [base], seed=11)[0])
    out, report = run_aggregator(engine, name, inputs, np.random.default_rng(0), trim=TrimSpec(2, 8, rng_seed=3),
                                 root_update=share_all(engine, [g0], seed=12)[0])
    return engine.reveal(out, "test").raw, report


@pytest.mark.parametrize("name", AGGREGATORS)
def test_aggregators_ignore_input_order(name):
    rng = np.random.default_rng(21)
    base = rng.normal(0, 0.5, size=30)
    g0 = rng.normal(0, 0.2, size=30)
    rows = base + g0 + rng.normal(0, 0.3, size=(7, 30))
    rows[4] -= 3.0
    ids = [31, 2, 17, 8, 40, 5, 23]
    weights = [20.0, 40.0, 20.0, 60.0, 20.0, 40.0, 20.0]
    raw, report = aggregate_in_order(name, rows, ids, weights, base, g0, np.arange(7))
    for seed in range(3):
        order = np.random.default_rng(seed).permutation(7)
        shuffled_raw, shuffled = aggregate_in_order(name, rows, ids, weights, base, g0, order)
        assert np.array_equal(shuffled_raw, raw)
        assert shuffled.excluded_ids == report.excluded_ids
        assert shuffled.trust_scores == report.trust_scores
        assert shuffled.tally == report.tally


def test_tm_variant_full_sample_tally_matches_brute_force():
    """With beta = gamma every coordinate is sorted; count tail hits directly."""
    m, gamma, alpha = 7, 40, 2
    rng = np.random.default_rng(22)
    # distinct values per coordinate so the sorted order is unique
    rows = np.stack([rng.permutation(m) for _ in range(gamma)], axis=1) / 8.0 + rng.integers(-4, 4, size=gamma) / 2.0
    ids = [12, 3, 40, 7, 25, 1, 18]
    engine = make_engine()
    inputs = AggInput(share_all(engine, rows), ids, reference=share_all(engine, [np.zeros(gamma)], seed=1)[0])
    _, report = run_aggregator(engine, TM_VARIANT, inputs, rng, trim=TrimSpec(alpha, gamma, rng_seed=4))

    expected = {sid: 0 for sid in ids}
    for j in range(gamma):
        ranked = np.argsort(rows[:, j])
        for k in list(ranked[:alpha]) + list(ranked[m - alpha:]):
            expected[ids[k]] += 1
    assert report.tally == expected
    hitters = sorted(ids, key=lambda sid: (-expected[sid], sid))[:2 * alpha]
    assert report.excluded_ids == sorted(hitters)
    assert sum(expected.values()) == 2 * alpha * gamma


def test_fltrust_update_norm_is_bounded_by_the_root_update():
    rng = np.random.default_rng(23)
    for trial in range(10):
        g0 = rng.normal(0, 0.3, size=16)
        updates = [g0 * rng.uniform(-1, 3) + rng.normal(0, 0.5, size=16) for _ in range(5)]
        combined, _ = fltrust_combine(g0, updates)
        assert np.linalg.norm(combined) <= np.linalg.norm(g0) * (1 + 1e-9)

        base = rng.normal(0, 0.5, size=16)
        engine = make_engine()
        inputs = AggInput(share_all(engine, [base + u for u in updates], seed=trial),
                          list(range(5)), reference=share_all(engine, [base], seed=100 + trial)[0])
        out = fl_trust(engine, inputs, share_all(engine, [g0], seed=200 + trial)[0], rng)
        step = reveal(engine, out) - decode_vec(encode_vec(base))
        assert np.linalg.norm(step) <= np.linalg.norm(g0) + 1e-3
