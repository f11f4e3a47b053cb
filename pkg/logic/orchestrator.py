"""
HyFL training loop and its flat-FL degenerate configurations.

Per round, every participating cluster (in parallel or sequentially):
reshare the global model from G to its committee, sample clients, take the
clients' shared data into its pool, train, reshare the result back to G.
G then aggregates. The global model stays secret-shared throughout; the
evaluator receives a revealed copy each round and nobody else does.

Every random choice comes from a substream derived from (master seed,
entity kind, entity id, round), so the parallel and sequential schedules
give bit-identical results.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from db.client import get_mnist_dir
from integrations.mnist_idx import load_mnist
from logic.aggregators import FLTRUST, AggInput, AggReport, run_aggregator
from logic.attacks import TLF, apply_attack
from logic.config import FLAT_MULTI, FLAT_SINGLE, HIERARCHICAL, HYFL, RunConfig, dump_config
from logic.data_plane import ClusterPool, Dataset, pool_round, root_dataset, sample_clients, shard_clients
from logic.errors import ConfigError, ShapeMismatchError, TopologyError
from logic.nn import PRESETS, Architecture, Model, init_model, predict_labels, train
from logic.ring_fixed import FixedVec, decode_vec, encode_vec, overflow_checks, overflow_checks_enabled
from logic.seeding import derive_rng, derive_seed
from logic.sharing import TRUSTED, PartySet, ShareSet, SharingEngine, TripleDealer
from logic.sorting_network import REFERENCE_COUNTS, build_bitonic_network

logger = logging.getLogger(__name__)

METRICS_SINK = "metrics-evaluator"
CSV_COLUMNS = ["round", "accuracy", "aggregator", "attack", "rate", "placement", "bytes", "comparisons",
               "excluded_ids", "seed"]


# ============================================================================
# TOPOLOGIA
# ============================================================================

@dataclass(frozen=True)
class Topology:
    mode: str
    num_clusters: int
    clients_per_cluster: int
    clients_sampled_per_round: int  # per cluster in HyFL, clusters per round in flat FL
    global_committee: PartySet
    cluster_committees: Tuple[PartySet, ...]

    @property
    def is_flat(self) -> bool:
        return self.mode in (FLAT_SINGLE, FLAT_MULTI)

    @property
    def total_clients(self) -> int:
        return self.num_clusters * self.clients_per_cluster

    def cluster_members(self, cluster_id: int) -> List[int]:
        start = cluster_id * self.clients_per_cluster
        return list(range(start, start + self.clients_per_cluster))

    @staticmethod
    def client_name(client_id: int) -> str:
        return f"P{client_id}"


def configure_abstraction(mode: str, num_clusters: int = 10, clients_per_cluster: int = 100,
                          sample_per_round: int = 10, global_size: Optional[int] = None,
                          cluster_size: Optional[int] = None, total_clients: Optional[int] = None,
                          per_round: Optional[int] = None) -> Topology:
    """Topology of one row of the FL abstraction table.

    Flat modes: every client is its own cluster and trains in the clear
    (E_i = P_i, size 1). HyFL: m committees of size > 1 fed by shared data.
    """
    if mode == HIERARCHICAL:
        raise NotImplementedError("hierarchical mode is not implemented")
    if mode in (FLAT_SINGLE, FLAT_MULTI):
        total = total_clients if total_clients is not None else num_clusters * clients_per_cluster
        if cluster_size not in (None, 1):
            raise TopologyError(f"{mode}: clients train alone, cluster size must be 1 (got {cluster_size})")
        if mode == FLAT_SINGLE:
            if global_size not in (None, 1):
                raise TopologyError(f"{mode}: aggregation runs on a single server (got {global_size})")
            g = PartySet("G", 1, TRUSTED)
        else:
            size = 2 if global_size is None else global_size
            if size < 2:
                raise TopologyError(f"{mode}: aggregation needs at least 2 servers (got {size})")
            g = PartySet("G", size)
        chosen = total if per_round is None else per_round
        if not 1 <= chosen <= total:
            raise TopologyError(f"{mode}: {chosen} clients per round out of {total}")
        committees = tuple(PartySet(Topology.client_name(c), 1, TRUSTED) for c in range(total))
        return Topology(mode, total, 1, chosen, g, committees)
    if mode != HYFL:
        raise TopologyError(f"unknown mode '{mode}'")
    g_size = 2 if global_size is None else global_size
    e_size = 2 if cluster_size is None else cluster_size
    if g_size < 2 or e_size < 2:
        raise TopologyError("hyfl: global and cluster committees need at least 2 parties")
    if clients_per_cluster < 2:
        raise TopologyError("hyfl: clusters need more than one client")
    if not 1 <= sample_per_round <= clients_per_cluster:
        raise TopologyError(f"hyfl: cannot sample {sample_per_round} of {clients_per_cluster} clients")
    committees = tuple(PartySet(f"E{i + 1}", e_size) for i in range(num_clusters))
    return Topology(mode, num_clusters, clients_per_cluster, sample_per_round, PartySet("G", g_size), committees)


def topology_from_config(cfg: RunConfig) -> Topology:
    if cfg.is_flat:
        return configure_abstraction(cfg.mode, global_size=cfg.committee_global_size,
                                     cluster_size=cfg.committee_cluster_size, total_clients=cfg.clients_total,
                                     per_round=cfg.clients_per_round)
    return configure_abstraction(cfg.mode, cfg.clusters_count, cfg.clusters_clients_per_cluster,
                                 cfg.clusters_sample_per_round, cfg.committee_global_size,
                                 cfg.committee_cluster_size)


# ============================================================================
# RESULTADOS
# ============================================================================

@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    aggregator: str
    attack: str
    rate: float
    placement: str
    bytes: int
    comparisons: int
    excluded_ids: List[int]
    seed: int
    protocol_rounds: int = 0
    beaver_triples: int = 0
    upload_bytes: int = 0
    model_transfer_bytes: int = 0
    trust_scores: Dict[int, float] = field(default_factory=dict)
    fixed_accuracy: Optional[float] = None
    source_recall: Optional[float] = None

    def csv_row(self) -> dict:
        return {"round": self.round, "accuracy": self.accuracy, "aggregator": self.aggregator,
                "attack": self.attack, "rate": self.rate, "placement": self.placement,
                "bytes": self.bytes, "comparisons": self.comparisons,
                "excluded_ids": ";".join(str(i) for i in sorted(self.excluded_ids)), "seed": self.seed}


@dataclass
class RunResult:
    config: RunConfig
    topology: Topology
    arch: Architecture
    metrics: List[RoundMetrics]
    final_model: ShareSet
    engine: SharingEngine
    malicious: Set[int]
    initial_params: np.ndarray
    clients_seen: Set[int] = field(default_factory=set)


# ============================================================================
# COORDINADOR
# ============================================================================

class TrainingCoordinator:
    """Owns the engine, pools and global shares of one run."""

    def __init__(self, cfg: RunConfig, train_set: Dataset, test_set: Dataset):
        self.cfg = cfg
        self.topology = topology_from_config(cfg)
        self.frac_bits = cfg.ring_frac_bits
        self.engine = SharingEngine(
            backend="multi_party" if cfg.backend == "multi_party" else "fixed_sim",
            frac_bits=cfg.ring_frac_bits, compare_bytes=cfg.cost_compare_bytes,
            compare_rounds=cfg.cost_compare_rounds,
            dealer=TripleDealer(derive_seed(cfg.seed, "dealer"), cfg.cost_triple_budget))
        self.engine.register(self.topology.global_committee)
        for committee in self.topology.cluster_committees:
            self.engine.register(committee)
        self.arch = PRESETS[cfg.model_arch]()
        self.validation = self._validation_set(test_set)

        shards = shard_clients(train_set, self.topology.total_clients, cfg.data_shard_size, cfg.seed,
                               self.topology.clients_per_cluster)
        self.shards, self.malicious = apply_attack(shards, cfg.attack_spec(), self.arch,
                                                   train_set.num_classes, cfg.seed,
                                                   cfg.clusters_clients_per_cluster)
        self.pools = {i: ClusterPool(i, cfg.clusters_pool_cap) for i in range(self.topology.num_clusters)} \
            if not self.topology.is_flat else {}
        self.root = root_dataset(train_set, cfg.fltrust_root_size, derive_rng(cfg.seed, "root")) \
            if cfg.agg_name == FLTRUST else None

        initial = init_model(self.arch, derive_rng(cfg.seed, "init"))
        self.initial_params = initial.params
        self.global_model = self.engine.local_result(encode_vec(initial.params, self.frac_bits),
                                                     self.topology.global_committee,
                                                     derive_rng(cfg.seed, "init-shares"))
        self.metrics: List[RoundMetrics] = []
        self.clients_seen: Set[int] = set()

    def _validation_set(self, test_set: Dataset) -> Dataset:
        n = self.cfg.data_validation_size
        if n and n < len(test_set):
            return test_set.subset(np.sort(derive_rng(self.cfg.seed, "validation").permutation(len(test_set))[:n]))
        return test_set

    def _train_fixed(self) -> bool:
        return not self.topology.is_flat and self.cfg.backend != "float"

    def _model_from_raw(self, raw: np.ndarray) -> Model:
        model = Model(self.arch, FixedVec(raw.view(np.uint64), self.frac_bits))
        return model if self._train_fixed() else model.to_float()

    # ------------------------------------------------------------------ one cluster

    def cluster_round(self, cluster_id: int, t: int, global_copy: ShareSet) -> Tuple[int, ShareSet, int, List[int]]:
        cfg, topo, engine = self.cfg, self.topology, self.engine
        committee = topo.cluster_committees[cluster_id]
        g = topo.global_committee
        local = engine.reshare(global_copy, g, committee, derive_rng(cfg.seed, "reshare-down", cluster_id, t))
        if topo.is_flat:
            shard = self.shards[cluster_id]
            chosen = [cluster_id]
            samples, labels, weight = shard.samples, shard.labels, len(shard)
        else:
            chosen = sample_clients(topo.cluster_members(cluster_id), t, topo.clients_sampled_per_round,
                                    cfg.seed, cluster_id)
            for c in chosen:
                shard = self.shards[c]
                engine.charge_input_sharing(topo.client_name(c), committee, shard.samples.size + len(shard))
            pool = pool_round(self.pools[cluster_id], [self.shards[c] for c in chosen], t)
            samples, labels, weight = pool.samples, pool.labels, pool.size
        model = self._model_from_raw(engine.simulated_plaintext(local))
        trained = train(model, samples, labels, cfg.train_spec(derive_seed(cfg.seed, "train", cluster_id, t)))
        result = engine.local_result(trained.to_fixed(self.frac_bits).params, committee,
                                     derive_rng(cfg.seed, "train-shares", cluster_id, t))
        up = engine.reshare(result, committee, g, derive_rng(cfg.seed, "reshare-up", cluster_id, t))
        return cluster_id, up, weight, chosen

    def _participants(self, t: int) -> List[int]:
        topo = self.topology
        if topo.is_flat:
            return sample_clients(range(topo.num_clusters), t, topo.clients_sampled_per_round, self.cfg.seed, -1)
        return list(range(topo.num_clusters))

    def _run_clusters(self, t: int, clusters: List[int]) -> list:
        copies = {i: self.engine.copy(self.global_model) for i in clusters}
        if self.cfg.clusters_parallel and len(clusters) > 1:
            with ThreadPoolExecutor(max_workers=min(8, len(clusters)), thread_name_prefix="cluster") as pool:
                futures = [pool.submit(self.cluster_round, i, t, copies[i]) for i in clusters]
                results = [f.result() for f in futures]
        else:
            results = [self.cluster_round(i, t, copies[i]) for i in clusters]
        return sorted(results, key=lambda r: r[0])

    # ------------------------------------------------------------------ aggregation

    def _root_update(self, t: int) -> ShareSet:
        g = self.topology.global_committee
        current = self.engine.simulated_plaintext(self.global_model)
        model = self._model_from_raw(current)
        trained = train(model, self.root.images, self.root.labels,
                        self.cfg.train_spec(derive_seed(self.cfg.seed, "root-train", 0, t)))
        with np.errstate(over="ignore"):
            delta = trained.to_fixed(self.frac_bits).params.signed - current
        return self.engine.local_result(FixedVec(delta.view(np.uint64), self.frac_bits), g,
                                        derive_rng(self.cfg.seed, "root-shares", 0, t))

    def aggregate(self, t: int, results: list) -> AggReport:
        cfg = self.cfg
        inputs = AggInput([r[1] for r in results], [r[0] for r in results],
                          [float(r[2]) for r in results], reference=self.engine.copy(self.global_model))
        root = self._root_update(t) if cfg.agg_name == FLTRUST else None
        self.global_model, report = run_aggregator(
            self.engine, cfg.agg_name, inputs, derive_rng(cfg.seed, "aggregate", 0, t),
            trim=cfg.trim_spec(t), use_deltas=cfg.agg_input == "delta", root_update=root)
        return report

    # ------------------------------------------------------------------ evaluation

    def evaluate(self, t: int) -> Tuple[float, Optional[float], Optional[float]]:
        revealed = self.engine.reveal(self.engine.copy(self.global_model), METRICS_SINK)
        val = self.validation
        preds = _batched_labels(Model(self.arch, decode_vec(revealed)), val.images)
        acc = float(np.mean(preds == val.labels)) if len(val) else 0.0
        fixed_acc = None
        every = self.cfg.eval_fixed_check_every
        if every and t % every == 0 and len(val):
            fixed_preds = _batched_labels(Model(self.arch, revealed), val.images)
            fixed_acc = float(np.mean(fixed_preds == val.labels))
            logger.info("round %d fixed-point cross-check: float %.4f fixed %.4f", t, acc, fixed_acc)
        recall = None
        if self.cfg.attack_kind == TLF:
            mask = val.labels == self.cfg.attack_tlf_source
            recall = float(np.mean(preds[mask] == self.cfg.attack_tlf_source)) if mask.any() else 0.0
        return acc, fixed_acc, recall

    # ------------------------------------------------------------------ loop

    def run_round(self, t: int) -> RoundMetrics:
        cfg, meter = self.cfg, self.engine.meter
        before = meter.snapshot()
        upload_before = meter.bytes_between("P", "")
        transfer_before = meter.bytes_between("E", "G") if not self.topology.is_flat else meter.bytes_between("P", "G")
        clusters = self._participants(t)
        results = self._run_clusters(t, clusters)
        chosen = sorted(c for r in results for c in r[3])
        self.clients_seen.update(chosen)
        logger.info("round %d: sampled clients (clear text) %s", t, chosen if len(chosen) <= 40 else f"{len(chosen)} clients")
        report = self.aggregate(t, results)
        acc, fixed_acc, recall = self.evaluate(t)
        delta = meter.snapshot() - before
        transfer_after = meter.bytes_between("E", "G") if not self.topology.is_flat else meter.bytes_between("P", "G")
        record = RoundMetrics(
            round=t, accuracy=acc, aggregator=cfg.agg_name, attack=cfg.attack_kind, rate=cfg.attack_rate,
            placement=cfg.attack_placement, bytes=delta.bytes, comparisons=delta.comparisons,
            excluded_ids=report.excluded_ids, seed=cfg.seed, protocol_rounds=delta.rounds,
            beaver_triples=delta.beaver_triples, upload_bytes=meter.bytes_between("P", "") - upload_before,
            model_transfer_bytes=transfer_after - transfer_before, trust_scores=report.trust_scores,
            fixed_accuracy=fixed_acc, source_recall=recall)
        self.metrics.append(record)
        logger.info("round %d/%d accuracy %.4f bytes %d comparisons %d excluded %s",
                    t, cfg.rounds, acc, delta.bytes, delta.comparisons, report.excluded_ids)
        return record

    def run(self) -> RunResult:
        cfg = self.cfg
        logger.info("run start: mode %s, %d rounds, aggregator %s, backend %s, seed %d",
                    cfg.mode, cfg.rounds, cfg.agg_name, cfg.backend, cfg.seed)
        try:
            with overflow_checks(cfg.ring_check_overflow or overflow_checks_enabled()):
                for t in range(1, cfg.rounds + 1):
                    try:
                        self.run_round(t)
                    except Exception:
                        logger.error("round %d aborted", t, exc_info=True)
                        raise
        finally:
            self.engine.close()
        logger.info("run end: final accuracy %s, total bytes %d",
                    f"{self.metrics[-1].accuracy:.4f}" if self.metrics else "n/a", self.engine.meter.total_bytes)
        return RunResult(cfg, self.topology, self.arch, self.metrics, self.global_model, self.engine,
                         self.malicious, self.initial_params, self.clients_seen)


def _batched_labels(model: Model, images: np.ndarray, batch: int = 1000) -> np.ndarray:
    if len(images) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([predict_labels(model, images[s:s + batch]) for s in range(0, len(images), batch)])


# ============================================================================
# FUNCIONES DE INTERFAZ
# ============================================================================

def load_datasets(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    directory = cfg.data_dir or get_mnist_dir()
    if not directory:
        raise ConfigError("data.dir", "no dataset directory configured (set data.dir or HYFL_MNIST_DIR)")
    return load_mnist(directory)


def run_training(cfg: RunConfig, train_set: Optional[Dataset] = None,
                 test_set: Optional[Dataset] = None) -> RunResult:
    if cfg.mode == HIERARCHICAL:
        raise NotImplementedError("hierarchical mode is not implemented")
    if train_set is None or test_set is None:
        train_set, test_set = load_datasets(cfg)
    return TrainingCoordinator(cfg, train_set, test_set).run()


def run_inference(engine: SharingEngine, model: ShareSet, queries, client: str,
                  rng: np.random.Generator, arch: Architecture) -> np.ndarray:
    """Private prediction: the query is shared to the model's committee, only the labels go back."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim == 0:
        raise ShapeMismatchError("query batch must have a leading batch dimension")
    if queries.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if queries[0].size != int(np.prod(arch.input_shape)):
        raise ShapeMismatchError(f"queries of shape {queries.shape} do not fit input shape {arch.input_shape}")
    frac_bits = model.frac_bits
    shared_query = engine.share(encode_vec(queries.ravel(), frac_bits), model.owner, rng, sender=client)
    params = engine.simulated_plaintext(model)
    x = engine.simulated_plaintext(shared_query).astype(np.float64) / float(1 << frac_bits)
    labels = predict_labels(Model(arch, FixedVec(params.view(np.uint64), frac_bits)), x.reshape(queries.shape))
    result = engine.local_result(FixedVec(labels.astype(np.int64).view(np.uint64), 0), model.owner, rng)
    return engine.reveal(result, client).signed.astype(np.int64)


def build_report(result: RunResult) -> dict:
    """Run report: configuration, cost model, counts, cumulative meter, per-round details."""
    cfg, meter = result.config, result.engine.meter
    clients = max(1, len(result.clients_seen))
    rounds = [
        {"round": m.round, "accuracy": m.accuracy, "bytes": m.bytes, "protocol_rounds": m.protocol_rounds,
         "comparisons": m.comparisons, "beaver_triples": m.beaver_triples, "excluded_ids": m.excluded_ids,
         "trust_scores": {str(k): v for k, v in m.trust_scores.items()},
         "fixed_accuracy": m.fixed_accuracy, "source_recall": m.source_recall,
         "upload_bytes": m.upload_bytes, "model_transfer_bytes": m.model_transfer_bytes}
        for m in result.metrics
    ]
    participants = result.topology.num_clusters if not result.topology.is_flat else cfg.clients_per_round
    return {
        "config": dump_config(cfg).splitlines(),
        "mode": cfg.mode,
        "architecture": result.arch.descriptor(),
        "param_count": result.arch.param_count,
        "cost_model": {"compare_bytes": cfg.cost_compare_bytes, "compare_rounds": cfg.cost_compare_rounds,
                       "share_bytes_per_element": 8,
                       "reveal_bytes_per_recipient": "holders other than the recipient x length x 8"},
        "sorting_network": {str(n): {"implemented": len(build_bitonic_network(n)), "reference": ref}
                            for n, ref in REFERENCE_COUNTS.items()},
        "cost": result.engine.meter.snapshot().as_dict(),
        "mean_upload_bytes_per_client": meter.bytes_between("P", "") / clients,
        "mean_model_transfer_bytes_per_cluster_round":
            sum(m.model_transfer_bytes for m in result.metrics) / max(1, len(result.metrics) * participants),
        "malicious_clients": len(result.malicious),
        "rounds": rounds,
    }
