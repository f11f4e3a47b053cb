"""
Run configuration: flat ``key = value`` files with dotted keys.

Files are read with python-dotenv (no interpolation). Defaults follow the
reference training and robust-aggregation parameters; a few depend on the
mode (flat FL versus HyFL).
"""
import io
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Union

from dotenv import dotenv_values

from logic.aggregators import AGGREGATORS, TrimSpec
from logic.attacks import ATTACK_KINDS, FOCUSED, PLACEMENTS, AttackSpec, focused_capacity, malicious_count
from logic.errors import ConfigError
from logic.nn import PRESETS, TrainSpec

logger = logging.getLogger(__name__)

HYFL, FLAT_SINGLE, FLAT_MULTI, HIERARCHICAL = "hyfl", "flat-single", "flat-multi", "hierarchical"
MODES = (HYFL, FLAT_SINGLE, FLAT_MULTI, HIERARCHICAL)
BACKENDS = ("float", "fixed_sim", "multi_party")


@dataclass(frozen=True)
class RunConfig:
    mode: str = HYFL
    rounds: int = 100
    seed: int = 0
    backend: str = "fixed_sim"
    output_dir: str = "artifacts/run"
    clients_total: int = 1000
    clients_per_round: int = 100
    clusters_count: int = 10
    clusters_clients_per_cluster: int = 100
    clusters_sample_per_round: int = 10
    clusters_pool_cap: int = 0
    clusters_parallel: bool = False
    committee_global_size: int = 2
    committee_cluster_size: int = 2
    model_arch: str = "lenet"
    data_dir: str = ""
    data_shard_size: int = 200
    data_validation_size: int = 0
    train_epochs: int = 5
    train_batch: int = 80
    train_lr: float = 0.05
    train_momentum: float = 0.0
    train_weight_decay: float = 0.0
    agg_name: str = "fedavg"
    agg_input: str = "delta"
    trim_alpha: int = 2
    trim_beta: int = 100
    fltrust_root_size: int = 200
    attack_kind: str = "none"
    attack_rate: float = 0.0
    attack_placement: str = "equally"
    attack_tlf_source: int = 0
    attack_tlf_target: int = 1
    attack_dlf_epochs: int = 50
    attack_dlf_batch: int = 128
    attack_dlf_lr: float = 0.05
    attack_dlf_momentum: float = 0.9
    attack_dlf_weight_decay: float = 0.0005
    ring_frac_bits: int = 22
    ring_check_overflow: bool = False
    cost_compare_bytes: int = 64
    cost_compare_rounds: int = 7
    cost_triple_budget: int = 0
    eval_fixed_check_every: int = 10

    @property
    def is_flat(self) -> bool:
        return self.mode in (FLAT_SINGLE, FLAT_MULTI)

    @property
    def aggregated_inputs(self) -> int:
        """Number of models entering aggregation each round (m)."""
        return self.clients_per_round if self.is_flat else self.clusters_count

    def train_spec(self, rng_seed: int = 0) -> TrainSpec:
        return TrainSpec(self.train_epochs, self.train_batch, self.train_lr,
                         self.train_momentum, self.train_weight_decay, rng_seed)

    def trim_spec(self, round_: int = 0) -> TrimSpec:
        return TrimSpec(self.trim_alpha, self.trim_beta, rng_seed=self.seed * 1_000_003 + round_)

    def attack_spec(self) -> AttackSpec:
        surrogate = TrainSpec(self.attack_dlf_epochs, self.attack_dlf_batch, self.attack_dlf_lr,
                              self.attack_dlf_momentum, self.attack_dlf_weight_decay, self.seed)
        return AttackSpec(self.attack_kind, self.attack_rate, self.attack_placement,
                          self.attack_tlf_source, self.attack_tlf_target, surrogate)


# config key -> RunConfig field
KEYS: Dict[str, str] = {
    "mode": "mode", "rounds": "rounds", "seed": "seed", "backend": "backend", "output_dir": "output_dir",
    "clients.total": "clients_total", "clients.per_round": "clients_per_round",
    "clusters.count": "clusters_count", "clusters.clients_per_cluster": "clusters_clients_per_cluster",
    "clusters.sample_per_round": "clusters_sample_per_round", "clusters.pool_cap": "clusters_pool_cap",
    "clusters.parallel": "clusters_parallel",
    "committee.global_size": "committee_global_size", "committee.cluster_size": "committee_cluster_size",
    "model.arch": "model_arch",
    "data.dir": "data_dir", "data.shard_size": "data_shard_size", "data.validation_size": "data_validation_size",
    "train.epochs": "train_epochs", "train.batch": "train_batch", "train.lr": "train_lr",
    "train.momentum": "train_momentum", "train.weight_decay": "train_weight_decay",
    "agg.name": "agg_name", "agg.input": "agg_input",
    "trim.alpha": "trim_alpha", "trim.beta": "trim_beta",
    "fltrust.root_size": "fltrust_root_size",
    "attack.kind": "attack_kind", "attack.rate": "attack_rate", "attack.placement": "attack_placement",
    "attack.tlf_source": "attack_tlf_source", "attack.tlf_target": "attack_tlf_target",
    "attack.dlf_epochs": "attack_dlf_epochs", "attack.dlf_batch": "attack_dlf_batch",
    "attack.dlf_lr": "attack_dlf_lr", "attack.dlf_momentum": "attack_dlf_momentum",
    "attack.dlf_weight_decay": "attack_dlf_weight_decay",
    "ring.frac_bits": "ring_frac_bits", "ring.check_overflow": "ring_check_overflow",
    "cost.compare_bytes": "cost_compare_bytes", "cost.compare_rounds": "cost_compare_rounds",
    "cost.triple_budget": "cost_triple_budget", "eval.fixed_check_every": "eval_fixed_check_every",
}
_FIELD_KEY = {v: k for k, v in KEYS.items()}
_TYPES = {f.name: f.type for f in fields(RunConfig)}

# Flat FL trains with batch 8 / lr 0.005 on single servers; HyFL scales batch and lr by 10.
MODE_DEFAULTS = {
    "flat": {"train_batch": 8, "train_lr": 0.005, "trim_alpha": 20,
             "committee_global_size": 1, "committee_cluster_size": 1},
    "hyfl": {"train_batch": 80, "train_lr": 0.05, "trim_alpha": 2,
             "committee_global_size": 2, "committee_cluster_size": 2},
}

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _convert(key: str, raw: Optional[str]):
    if raw is None:
        raise ConfigError(key, "missing value")
    name = KEYS[key]
    kind = _TYPES[name]
    text = raw.strip()
    if kind in (bool, "bool"):
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ConfigError(key, f"expected a boolean, got '{raw}'")
    if kind in (int, "int"):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got '{raw}'") from None
    if kind in (float, "float"):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(key, f"expected a number, got '{raw}'") from None
    return text


def _mode_defaults(mode: str) -> dict:
    values = dict(MODE_DEFAULTS["flat" if mode in (FLAT_SINGLE, FLAT_MULTI) else "hyfl"])
    if mode == FLAT_MULTI:
        values["committee_global_size"] = 2
    return values


def parse_config(path: Union[str, Path, None] = None, text: Optional[str] = None,
                 overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    """Parse a config file (or text) plus dotted-key overrides into a validated RunConfig."""
    if path is not None:
        if not Path(path).exists():
            raise ConfigError("config", f"file '{path}' not found")
        raw = dotenv_values(path, interpolate=False)
    else:
        raw = dotenv_values(stream=io.StringIO(text or ""), interpolate=False)
    raw = dict(raw)
    for key, value in (overrides or {}).items():
        raw[key] = value if value is None or isinstance(value, str) else _format(value)
    for key in raw:
        if key not in KEYS:
            raise ConfigError(key, "unknown key")

    mode = _convert("mode", raw["mode"]) if "mode" in raw else HYFL
    if mode not in MODES:
        raise ConfigError("mode", f"expected one of {', '.join(MODES)}, got '{mode}'")
    values = _mode_defaults(mode)
    for key, value in raw.items():
        values[KEYS[key]] = _convert(key, value)
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    def check(ok: bool, key: str, message: str):
        if not ok:
            raise ConfigError(key, message)

    check(cfg.mode in MODES, "mode", f"unknown mode '{cfg.mode}'")
    check(cfg.backend in BACKENDS, "backend", f"expected one of {', '.join(BACKENDS)}")
    check(cfg.rounds >= 0, "rounds", "must be >= 0")
    check(cfg.model_arch in PRESETS, "model.arch", f"expected one of {', '.join(PRESETS)}")
    check(cfg.agg_name in AGGREGATORS, "agg.name", f"expected one of {', '.join(AGGREGATORS)}")
    check(cfg.agg_input in ("delta", "raw"), "agg.input", "expected delta or raw")
    check(cfg.attack_kind in ATTACK_KINDS, "attack.kind", f"expected one of {', '.join(ATTACK_KINDS)}")
    check(cfg.attack_placement in PLACEMENTS, "attack.placement", f"expected one of {', '.join(PLACEMENTS)}")
    check(0.0 <= cfg.attack_rate <= 1.0, "attack.rate", "must lie in [0, 1]")
    check(cfg.attack_tlf_source != cfg.attack_tlf_target, "attack.tlf_target", "must differ from attack.tlf_source")
    check(cfg.clients_total >= 1, "clients.total", "must be >= 1")
    check(cfg.clusters_clients_per_cluster >= 1, "clusters.clients_per_cluster", "must be >= 1")
    check(cfg.data_shard_size >= 1, "data.shard_size", "must be >= 1")
    check(cfg.train_epochs >= 1, "train.epochs", "must be >= 1")
    check(cfg.train_batch >= 1, "train.batch", "must be >= 1")
    check(cfg.attack_dlf_epochs >= 1, "attack.dlf_epochs", "must be >= 1")
    check(cfg.attack_dlf_batch >= 1, "attack.dlf_batch", "must be >= 1")
    check(cfg.trim_beta >= 1, "trim.beta", "must be >= 1")
    check(cfg.fltrust_root_size >= 1, "fltrust.root_size", "must be >= 1")
    check(cfg.clusters_pool_cap >= 0, "clusters.pool_cap", "must be >= 0")
    check(cfg.data_validation_size >= 0, "data.validation_size", "must be >= 0")
    check(1 <= cfg.ring_frac_bits <= 40, "ring.frac_bits", "must lie in [1, 40]")
    check(cfg.eval_fixed_check_every >= 0, "eval.fixed_check_every", "must be >= 0")
    check(cfg.cost_triple_budget >= 0, "cost.triple_budget", "must be >= 0")
    if cfg.is_flat:
        check(1 <= cfg.clients_per_round <= cfg.clients_total, "clients.per_round",
              f"must lie in [1, clients.total={cfg.clients_total}]")
        check(cfg.committee_cluster_size == 1, "committee.cluster_size", "flat FL clients train alone (size 1)")
    elif cfg.mode == HYFL:
        check(cfg.clusters_count >= 1, "clusters.count", "must be >= 1")
        check(cfg.clusters_count * cfg.clusters_clients_per_cluster == cfg.clients_total, "clients.total",
              f"must equal clusters.count * clusters.clients_per_cluster "
              f"({cfg.clusters_count} * {cfg.clusters_clients_per_cluster})")
        check(1 <= cfg.clusters_sample_per_round <= cfg.clusters_clients_per_cluster, "clusters.sample_per_round",
              f"must lie in [1, clusters.clients_per_cluster={cfg.clusters_clients_per_cluster}]")
        check(cfg.committee_global_size >= 2, "committee.global_size", "HyFL needs an MPC committee (>= 2)")
        check(cfg.committee_cluster_size >= 2, "committee.cluster_size", "HyFL needs MPC clusters (>= 2)")
    m = cfg.aggregated_inputs
    if cfg.agg_name in ("trimmed_mean", "tm_variant"):
        check(0 <= cfg.trim_alpha and 2 * cfg.trim_alpha < m, "trim.alpha", f"2α < m violated (α={cfg.trim_alpha}, m={m})")
    # flat modes place attackers over the same cluster layout as HyFL
    if cfg.attack_placement == FOCUSED and cfg.attack_kind != "none":
        capacity = focused_capacity(cfg.clients_total, cfg.clusters_clients_per_cluster)
        check(malicious_count(cfg.clients_total, cfg.attack_rate) <= capacity, "attack.rate",
              f"focused placement cannot keep an honest majority (capacity {capacity} malicious clients)")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: RunConfig) -> str:
    """Config echo; ``parse_config(text=dump_config(cfg)) == cfg``."""
    values = asdict(cfg)
    return "".join(f"{_FIELD_KEY[name]} = {_format(values[name])}\n" for name in values)


def write_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path
