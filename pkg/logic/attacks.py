"""
Label-flipping data poisoning under a single coordinated attacker.

All malicious clients poison every sample once, before round 1. Identical
samples receive identical poisoned labels across clients: RLF keys its draw
on a content hash, DLF uses one surrogate trained on the pooled malicious
data.
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from logic.data_plane import ClientShard
from logic.errors import AttackSetupError
from logic.nn import Architecture, TrainSpec, init_model, predict, train_with_history
from logic.seeding import derive_rng

logger = logging.getLogger(__name__)

NONE, RLF, SLF, DLF, TLF = "none", "rlf", "slf", "dlf", "tlf"
ATTACK_KINDS = (NONE, RLF, SLF, DLF, TLF)

EQUALLY, FOCUSED, CLUSTER_FOCUSED = "equally", "focused", "cluster_focused"
PLACEMENTS = (EQUALLY, FOCUSED, CLUSTER_FOCUSED)

# Surrogate hyperparameters for the dynamic attack.
DLF_SURROGATE = TrainSpec(epochs=50, batch_size=128, lr=0.05, momentum=0.9, weight_decay=0.0005)


@dataclass(frozen=True)
class AttackSpec:
    kind: str = NONE
    poison_rate: float = 0.0
    placement: str = EQUALLY
    tlf_source: int = 0
    tlf_target: int = 1
    dlf_surrogate: TrainSpec = field(default=DLF_SURROGATE)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind '{self.kind}'")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement '{self.placement}'")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError(f"poison rate {self.poison_rate} outside [0, 1]")
        if self.tlf_source == self.tlf_target:
            raise ValueError("tlf source and target must differ")

    @property
    def active(self) -> bool:
        return self.kind != NONE and self.poison_rate > 0


def malicious_count(total: int, rate: float) -> int:
    return int(round(rate * total))


def honest_majority_cap(cluster_size: int) -> int:
    return math.ceil(cluster_size / 2) - 1


def placement_groups(client_ids: Sequence[int], clients_per_cluster: int) -> Dict[int, List[int]]:
    """Clients grouped by the HyFL cluster layout (client c sits in c // clients_per_cluster)."""
    if clients_per_cluster < 1:
        raise AttackSetupError(f"clients per cluster must be >= 1, got {clients_per_cluster}")
    groups: Dict[int, List[int]] = {}
    for c in sorted(client_ids):
        groups.setdefault(c // clients_per_cluster, []).append(c)
    return groups


def focused_capacity(total: int, clients_per_cluster: int) -> int:
    """Most malicious clients a focused placement can host over ``total`` clients."""
    full, rest = divmod(total, clients_per_cluster)
    return full * honest_majority_cap(clients_per_cluster) + (honest_majority_cap(rest) if rest else 0)


def select_malicious(clusters: Mapping[int, Sequence[int]], spec: AttackSpec,
                     rng: np.random.Generator) -> Set[int]:
    total = sum(len(members) for members in clusters.values())
    remaining = malicious_count(total, spec.poison_rate)
    if remaining == 0:
        return set()
    if spec.placement == EQUALLY:
        everyone = sorted(c for members in clusters.values() for c in members)
        return {everyone[i] for i in rng.choice(len(everyone), size=remaining, replace=False)}

    chosen: Set[int] = set()
    for cluster_id in sorted(clusters):
        members = sorted(clusters[cluster_id])
        cap = honest_majority_cap(len(members)) if spec.placement == FOCUSED else len(members)
        take = min(cap, remaining)
        chosen.update(members[:take])
        remaining -= take
        if remaining == 0:
            break
    if remaining:
        raise AttackSetupError(
            f"focused placement cannot host {malicious_count(total, spec.poison_rate)} malicious clients "
            f"while keeping an honest majority in every cluster")
    return chosen


def _label_hash(sample: np.ndarray, label: int, attack_seed: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(sample).tobytes())
    h.update(int(label).to_bytes(4, "little", signed=True))
    h.update(int(attack_seed).to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest(), "little")


def poison_rlf(shard: ClientShard, num_classes: int, attack_seed: int = 0) -> ClientShard:
    labels = [_label_hash(s, l, attack_seed) % num_classes for s, l in zip(shard.samples, shard.labels)]
    return shard.with_labels(np.asarray(labels, dtype=np.int64))


def poison_slf(shard: ClientShard, num_classes: int) -> ClientShard:
    return shard.with_labels(num_classes - shard.labels - 1)


def poison_tlf(shard: ClientShard, source: int, target: int) -> ClientShard:
    return shard.with_labels(np.where(shard.labels == source, target, shard.labels))


def poison_dlf(shards: Sequence[ClientShard], num_classes: int, surrogate_spec: TrainSpec,
               arch: Architecture, master_seed: int = 0) -> List[ClientShard]:
    """Relabel every sample with the surrogate's least probable class."""
    if not shards:
        raise AttackSetupError("dynamic label flipping needs malicious data")
    if arch.num_classes != num_classes:
        raise AttackSetupError(f"surrogate predicts {arch.num_classes} classes, dataset has {num_classes}")
    samples = np.concatenate([s.samples for s in shards])
    labels = np.concatenate([s.labels for s in shards])
    surrogate = init_model(arch, derive_rng(master_seed, "dlf-surrogate"))
    surrogate, history = train_with_history(surrogate, samples, labels, surrogate_spec)
    if not np.all(np.isfinite(history)) or not np.all(np.isfinite(surrogate.params)):
        raise AttackSetupError(f"surrogate training diverged (loss history ends with {history[-1]})")
    logger.info("DLF surrogate trained on %d samples, final loss %.4f", len(labels), history[-1])
    return [s.with_labels(predict(surrogate, s.samples).argmin(axis=1)) for s in shards]


def apply_attack(shards: Sequence[ClientShard], spec: AttackSpec, arch: Architecture,
                 num_classes: int, master_seed: int,
                 clients_per_cluster: Optional[int] = None) -> Tuple[List[ClientShard], Set[int]]:
    """Pick the malicious clients and poison their shards; returns (shards, malicious ids).

    With ``clients_per_cluster`` the placement groups clients by the HyFL
    cluster layout instead of the shards' own cluster ids, so a flat FL run
    gets the same attacker set as the matching HyFL run.
    """
    shards = list(shards)
    if not spec.active:
        return shards, set()
    clusters: Dict[int, List[int]] = {}
    if clients_per_cluster is not None:
        clusters = placement_groups([s.client_id for s in shards], clients_per_cluster)
    else:
        for shard in shards:
            clusters.setdefault(shard.cluster_id, []).append(shard.client_id)
    malicious = select_malicious(clusters, spec, derive_rng(master_seed, "attack-placement"))
    position = {shard.client_id: k for k, shard in enumerate(shards)}
    targets = sorted(malicious)
    if spec.kind == DLF:
        poisoned = poison_dlf([shards[position[c]] for c in targets], num_classes, spec.dlf_surrogate,
                              arch, master_seed)
        for c, shard in zip(targets, poisoned):
            shards[position[c]] = shard
    else:
        for c in targets:
            shard = shards[position[c]]
            if spec.kind == RLF:
                shards[position[c]] = poison_rlf(shard, num_classes, master_seed)
            elif spec.kind == SLF:
                shards[position[c]] = poison_slf(shard, num_classes)
            else:
                shards[position[c]] = poison_tlf(shard, spec.tlf_source, spec.tlf_target)
    per_cluster = {k: sum(1 for c in v if c in malicious) for k, v in sorted(clusters.items())}
    logger.info("attack %s rate %.2f (%s): %d malicious clients, per cluster %s",
                spec.kind, spec.poison_rate, spec.placement, len(malicious),
                {k: v for k, v in per_cluster.items() if v})
    return shards, malicious
