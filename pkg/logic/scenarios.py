"""
Experiment presets and metrics emission.

Presets run at desk scale by default (200 clients, 10 clusters of 20, 20
clients per round, MLP, 100 rounds); ``full_scale=True`` keeps the full
training parameters instead.
"""
import logging
import shutil
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from logic.aggregators import FEDAVG, FLTRUST, TM_VARIANT, TRIMMED_MEAN, AggInput, TrimSpec, run_aggregator
from logic.attacks import CLUSTER_FOCUSED, DLF, EQUALLY, FOCUSED, RLF, SLF, TLF
from logic.config import FLAT_SINGLE, HYFL, parse_config
from logic.data_plane import Dataset
from logic.errors import ScenarioError
from logic.nn import PRESETS
from logic.orchestrator import CSV_COLUMNS, RoundMetrics, build_report, load_datasets, run_training
from logic.ring_fixed import encode_vec
from logic.seeding import derive_rng
from logic.sharing import PartySet, SharingEngine, TripleDealer

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
COST_FILE = "cost.csv"
PLOT_SCRIPT = Path(__file__).resolve().parents[1] / "views" / "plot_metrics.py"

DESK_SCALE = {
    "clients.total": 200, "clients.per_round": 20,
    "clusters.count": 10, "clusters.clients_per_cluster": 20, "clusters.sample_per_round": 2,
    "clusters.pool_cap": 2000, "model.arch": "mlp", "rounds": 100, "data.validation_size": 1000,
}
DESK_FLAT_ALPHA = 4

ATTACK_GRID = {
    "kinds": (RLF, SLF, DLF, TLF),
    "rates": (0.01, 0.1, 0.2),
    "placements": (EQUALLY, FOCUSED, CLUSTER_FOCUSED),
    "aggregators": (FEDAVG, TRIMMED_MEAN, FLTRUST),
}
TM_VARIANT_BETAS = (10, 100, 1000)


@dataclass(frozen=True)
class ScenarioRun:
    label: str
    overrides: Dict[str, object]


# ============================================================================
# PRESETS
# ============================================================================

def _q1_convergence() -> List[ScenarioRun]:
    return [ScenarioRun("hyfl", {"mode": HYFL}), ScenarioRun("flat-single", {"mode": FLAT_SINGLE})]


def _q2_backend() -> List[ScenarioRun]:
    return [ScenarioRun("float", {"mode": HYFL, "backend": "float"}),
            ScenarioRun("fixed", {"mode": HYFL, "backend": "fixed_sim"})]


def _q4_attack_grid() -> List[ScenarioRun]:
    """Every grid cell twice: regular FL and HyFL, over the same attacker placement."""
    runs = []
    for kind, rate, placement, agg in product(*ATTACK_GRID.values()):
        cell = {"attack.kind": kind, "attack.rate": rate, "attack.placement": placement, "agg.name": agg}
        for prefix, mode in (("hyfl", HYFL), ("flat", FLAT_SINGLE)):
            runs.append(ScenarioRun(f"{prefix}-{kind}-{rate}-{placement}-{agg}", {"mode": mode, **cell}))
    return runs


def _q6_tm_variant() -> List[ScenarioRun]:
    attack = {"mode": HYFL, "attack.kind": DLF, "attack.rate": 0.2, "attack.placement": FOCUSED}
    runs = [ScenarioRun("TM", {**attack, "agg.name": TRIMMED_MEAN})]
    for beta in TM_VARIANT_BETAS:
        runs.append(ScenarioRun(f"TM-{beta}", {**attack, "agg.name": TM_VARIANT, "trim.beta": beta}))
    return runs


TRAINING_SCENARIOS = {
    "q1-convergence": _q1_convergence,
    "q2-backend": _q2_backend,
    "q4-attack-grid": _q4_attack_grid,
    "q6-tm-variant": _q6_tm_variant,
}
SCENARIOS = tuple(sorted(list(TRAINING_SCENARIOS) + ["q5-cost"]))


def scenario_runs(name: str) -> List[ScenarioRun]:
    if name not in TRAINING_SCENARIOS:
        raise ScenarioError(f"unknown scenario '{name}' (expected one of {', '.join(SCENARIOS)})")
    return TRAINING_SCENARIOS[name]()


def scaled_overrides(run: ScenarioRun, full_scale: bool = False) -> Dict[str, object]:
    if full_scale:
        return dict(run.overrides)
    values = {**DESK_SCALE, **run.overrides}
    if values.get("mode") != HYFL:
        values["trim.alpha"] = DESK_FLAT_ALPHA
    return values


# ============================================================================
# METRICAS
# ============================================================================

def emit_metrics(series: Iterable[Union[RoundMetrics, dict]], out_dir: Union[str, Path],
                 filename: str = METRICS_FILE) -> Path:
    """Write the metrics CSV and drop the plotting script next to it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [m.csv_row() if isinstance(m, RoundMetrics) else m for m in series]
    frame = pd.DataFrame(rows, columns=CSV_COLUMNS)
    path = out_dir / filename
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    shutil.copyfile(PLOT_SCRIPT, out_dir / PLOT_SCRIPT.name)
    logger.info("wrote %d metric rows to %s", len(frame), path)
    return path


# ============================================================================
# TABLA DE COSTOS
# ============================================================================

def cost_table(arch_name: str = "lenet", m: int = 10, alpha: int = 2, betas: Tuple[int, ...] = TM_VARIANT_BETAS,
               seed: int = 0, compare_bytes: int = 64, compare_rounds: int = 7) -> pd.DataFrame:
    """Counted cost of one aggregation step at G for m models of the architecture's size."""
    gamma = PRESETS[arch_name]().param_count
    rows = []
    cases = [(FEDAVG, FEDAVG, None), (TRIMMED_MEAN, "TM", None)]
    cases += [(TM_VARIANT, f"TM-{b}", b) for b in betas if b <= gamma]
    cases.append((FLTRUST, "FLTrust", None))
    for name, label, beta in cases:
        engine = SharingEngine(compare_bytes=compare_bytes, compare_rounds=compare_rounds,
                               dealer=TripleDealer(seed))
        g = engine.register(PartySet("G", 2))
        rng = derive_rng(seed, "cost-table")
        reference = engine.local_result(encode_vec(rng.normal(0, 0.05, gamma)), g, rng)
        models = [engine.local_result(encode_vec(rng.normal(0, 0.05, gamma)), g, rng) for _ in range(m)]
        root = engine.local_result(encode_vec(rng.normal(0, 0.01, gamma)), g, rng) if name == FLTRUST else None
        inputs = AggInput(models, list(range(m)), reference=reference)
        _, report = run_aggregator(engine, name, inputs, rng, trim=TrimSpec(alpha, beta or 100, seed),
                                   root_update=root)
        rows.append({"aggregator": label, "gamma": gamma, "m": m, **report.cost.as_dict()})
        logger.info("cost %s: %s", label, report.cost.as_dict())
    return pd.DataFrame(rows, columns=["aggregator", "gamma", "m", "bytes", "rounds", "comparisons",
                                       "beaver_triples"])


# ============================================================================
# FUNCIONES DE INTERFAZ
# ============================================================================

def run_scenario(name: str, out_dir: Union[str, Path, None] = None, full_scale: bool = False,
                 datasets: Optional[Tuple[Dataset, Dataset]] = None, seed: int = 0,
                 overrides: Optional[Dict[str, object]] = None, store=None) -> Dict[str, Path]:
    """Run every configuration of a preset; returns label -> artifact path."""
    from db.queries import ArtifactStore

    if name not in SCENARIOS:
        raise ScenarioError(f"unknown scenario '{name}' (expected one of {', '.join(SCENARIOS)})")
    store = store or ArtifactStore(out_dir)
    if name == "q5-cost":
        arch = "lenet" if full_scale else DESK_SCALE["model.arch"]
        table = cost_table(arch, seed=seed)
        path = store.run_dir(name, create=True) / COST_FILE
        table.to_csv(path, index=False, lineterminator="\n")
        logger.info("scenario %s: cost table for %s written to %s", name, arch, path)
        return {"cost": path}

    runs = scenario_runs(name)
    outputs: Dict[str, Path] = {}
    for k, run in enumerate(runs, start=1):
        values = {**scaled_overrides(run, full_scale), **(overrides or {}), "seed": seed}
        cfg = parse_config(overrides=values)
        if datasets is None:
            datasets = load_datasets(cfg)
        logger.info("scenario %s: run %d/%d (%s)", name, k, len(runs), run.label)
        try:
            result = run_training(cfg, *datasets)
        except Exception:
            logger.error("scenario %s: run %s failed", name, run.label, exc_info=True)
            raise
        outputs[run.label] = store.save_run(f"{name}/{run.label}", result, build_report(result))
    return outputs
