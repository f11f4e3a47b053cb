import sys
import os

# Add the project root to sys.path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from db.client import get_mnist_dir
from integrations.mnist_idx import load_mnist
from logic.config import parse_config
from logic.orchestrator import METRICS_SINK, run_training
from logic.scenarios import DESK_SCALE, ScenarioRun, scaled_overrides

MNIST_DIR = get_mnist_dir()

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(not MNIST_DIR, reason="HYFL_MNIST_DIR is not set"),
]


@pytest.fixture(scope="module")
def mnist():
    return load_mnist(MNIST_DIR)


def test_mnist_shapes(mnist):
    train, test = mnist
    assert (len(train), len(test)) == (60000, 10000)
    assert train.images.shape[1:] == (28, 28)


def test_desk_hyfl_learns_mnist(mnist):
    cfg = parse_config(overrides={**DESK_SCALE, "rounds": 5, "seed": 1})
    result = run_training(cfg, *mnist)
    assert result.metrics[-1].accuracy > 0.8
    assert result.engine.reveal_sinks() == {METRICS_SINK}


def test_tm_variant_resists_focused_label_flipping(mnist):
    cfg = parse_config(overrides={**DESK_SCALE, "rounds": 5, "seed": 1, "agg.name": "tm_variant",
                                  "attack.kind": "slf", "attack.rate": 0.2, "attack.placement": "focused"})
    result = run_training(cfg, *mnist)
    assert result.metrics[-1].accuracy > 0.7
    assert all(len(m.excluded_ids) == 4 for m in result.metrics)


# --- long runs (100 rounds each) ---

def desk_config(mode="hyfl", **overrides):
    values = scaled_overrides(ScenarioRun(mode, {"mode": mode}))
    values.update({k.replace("__", "."): v for k, v in overrides.items()})
    return parse_config(overrides=values)


def accuracy_by_round(result):
    return {m.round: m.accuracy for m in result.metrics}


def test_fixed_point_training_tracks_float(mnist):
    train, test = mnist
    subset = train.subset(np.arange(2000))
    curves = {}
    for backend in ("float", "fixed_sim"):
        cfg = desk_config(backend=backend, seed=1, data__shard_size=100)
        curves[backend] = accuracy_by_round(run_training(cfg, subset, test))
    for r in range(10, 101, 10):
        assert abs(curves["float"][r] - curves["fixed_sim"][r]) <= 0.01, f"round {r}"


def test_dlf_hurts_fedavg_and_trimmed_mean_recovers(mnist):
    train, test = mnist
    subset = train.subset(np.arange(10000))
    attack = {"attack__kind": "dlf", "attack__rate": 0.2, "attack__placement": "focused"}
    final = {"clean": [], "fedavg": [], "trimmed_mean": []}
    for seed in range(3):
        runs = {"clean": desk_config("flat-single", seed=seed),
                "fedavg": desk_config("flat-single", seed=seed, **attack),
                "trimmed_mean": desk_config("flat-single", seed=seed, agg__name="trimmed_mean", **attack)}
        for label, cfg in runs.items():
            final[label].append(run_training(cfg, subset, test).metrics[-1].accuracy)
    clean, attacked, defended = (float(np.mean(final[k])) for k in ("clean", "fedavg", "trimmed_mean"))
    gap = clean - attacked
    assert gap >= 0.05, final
    assert defended - attacked >= gap / 2, final


def test_hyfl_converges_at_least_as_well_as_flat_fl(mnist):
    curves = {}
    for mode in ("hyfl", "flat-single"):
        curves[mode] = accuracy_by_round(run_training(desk_config(mode, seed=2), *mnist))
    rounds = range(10, 101)
    ahead = sum(curves["hyfl"][r] >= curves["flat-single"][r] for r in rounds)
    assert ahead >= 0.8 * len(rounds)
