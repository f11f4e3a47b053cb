"""
Client datasets: sharding, per-round sampling, cluster pools and the root dataset.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from logic.errors import DataPlaneError
from logic.seeding import derive_rng

logger = logging.getLogger(__name__)

NUM_CLASSES = 10


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int = NUM_CLASSES

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    cluster_id: int
    samples: np.ndarray
    labels: np.ndarray
    poisoned: bool = False

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def with_labels(self, labels: np.ndarray) -> "ClientShard":
        return replace(self, labels=np.asarray(labels, dtype=np.int64), poisoned=True)


@dataclass
class ClusterPool:
    """Union of all data shared with one cluster so far, tagged by round."""
    cluster_id: int
    cap: int = 0
    chunks: List[tuple] = field(default_factory=list)  # (round, samples, labels)

    @property
    def size(self) -> int:
        return sum(len(labels) for _, _, labels in self.chunks)

    @property
    def round_added(self) -> List[int]:
        return [r for r, _, labels in self.chunks for _ in range(len(labels))]

    @property
    def samples(self) -> np.ndarray:
        return np.concatenate([s for _, s, _ in self.chunks]) if self.chunks else np.zeros((0,))

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([l for _, _, l in self.chunks]) if self.chunks else np.zeros(0, dtype=np.int64)


def shard_clients(dataset: Dataset, num_clients: int, shard_size: int, master_seed: int,
                  clients_per_cluster: Optional[int] = None) -> List[ClientShard]:
    """Each client draws ``shard_size`` distinct samples; clients may overlap.

    Client c belongs to cluster c // clients_per_cluster (one cluster per
    client when not given).
    """
    if len(dataset) == 0:
        raise DataPlaneError("cannot shard an empty dataset")
    if shard_size < 1 or shard_size > len(dataset):
        raise DataPlaneError(f"shard size {shard_size} not in [1, {len(dataset)}]")
    per_cluster = clients_per_cluster or 1
    shards = []
    for client_id in range(num_clients):
        rng = derive_rng(master_seed, "shard", client_id)
        idx = rng.choice(len(dataset), size=shard_size, replace=False)
        shards.append(ClientShard(client_id, client_id // per_cluster,
                                  dataset.images[idx], dataset.labels[idx].astype(np.int64)))
    logger.info("sharded %d samples into %d clients of %d", len(dataset), num_clients, shard_size)
    return shards


def sample_clients(cluster_clients: Sequence[int], round_: int, sample_size: int, master_seed: int,
                   cluster_id: int = 0) -> List[int]:
    """Uniform sample without replacement, deterministic in (seed, cluster, round)."""
    members = list(cluster_clients)
    if sample_size > len(members):
        raise DataPlaneError(f"cluster {cluster_id} has {len(members)} clients, cannot sample {sample_size}")
    rng = derive_rng(master_seed, "sample", cluster_id, round_)
    chosen = rng.choice(len(members), size=sample_size, replace=False)
    return sorted(members[i] for i in chosen)


def pool_round(pool: ClusterPool, shards: Sequence[ClientShard], round_: int) -> ClusterPool:
    for shard in shards:
        if shard.cluster_id != pool.cluster_id:
            raise DataPlaneError(f"client {shard.client_id} belongs to cluster {shard.cluster_id}, "
                                 f"not {pool.cluster_id}")
    if shards:
        pool.chunks.append((round_,
                            np.concatenate([s.samples for s in shards]),
                            np.concatenate([s.labels for s in shards])))
    if pool.cap:
        evicted = 0
        while pool.size > pool.cap:
            r, samples, labels = pool.chunks[0]
            excess = pool.size - pool.cap
            if excess >= len(labels):
                pool.chunks.pop(0)
                evicted += len(labels)
            else:
                pool.chunks[0] = (r, samples[excess:], labels[excess:])
                evicted += excess
        if evicted:
            logger.warning("cluster %d pool cap %d: evicted %d oldest samples", pool.cluster_id, pool.cap, evicted)
    return pool


def root_dataset(dataset: Dataset, size: int, rng: np.random.Generator) -> Dataset:
    if size < 1 or size > len(dataset):
        raise DataPlaneError(f"root dataset size {size} not in [1, {len(dataset)}]")
    return dataset.subset(rng.permutation(len(dataset))[:size])


def synthetic_dataset(num_samples: int, num_classes: int = NUM_CLASSES, seed: int = 0,
                      image_shape: tuple = (28, 28), noise: float = 0.15) -> Dataset:
    """MNIST-shaped class-conditional blobs: a random prototype per class plus noise."""
    rng = np.random.default_rng(seed)
    prototypes = rng.uniform(0.0, 1.0, size=(num_classes,) + tuple(image_shape))
    labels = rng.integers(0, num_classes, size=num_samples)
    images = prototypes[labels] + rng.normal(0.0, noise, size=(num_samples,) + tuple(image_shape))
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), num_classes)
