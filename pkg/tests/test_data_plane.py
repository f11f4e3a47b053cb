import sys
import os

# Add the project root to sys.path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from integrations.mnist_idx import (
    TEST_FILES,
    TRAIN_FILES,
    load_idx,
    load_mnist,
    read_idx_images,
    read_idx_labels,
    write_idx,
)
from logic.data_plane import (
    ClusterPool,
    Dataset,
    pool_round,
    root_dataset,
    sample_clients,
    shard_clients,
    synthetic_dataset,
)
from logic.errors import DataPlaneError, IdxFormatError


def small_dataset(n=100):
    images = np.arange(n * 4, dtype=np.float64).reshape(n, 2, 2)
    return Dataset(images, np.arange(n) % 10)


# --- IDX ---

def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = np.array([3, 1, 4, 1, 5], dtype=np.uint8)
    write_idx(tmp_path / "img", tmp_path / "lbl", images, labels)
    data = load_idx(tmp_path / "img", tmp_path / "lbl")
    assert data.images.shape == (5, 28, 28)
    assert np.array_equal(data.images, images / 255.0)
    assert data.labels.tolist() == [3, 1, 4, 1, 5]


def test_idx_rejects_bad_magic_and_truncation(tmp_path):
    write_idx(tmp_path / "img", tmp_path / "lbl", np.zeros((2, 3, 3)), np.zeros(2))
    with pytest.raises(IdxFormatError):
        read_idx_images(tmp_path / "lbl")
    with pytest.raises(IdxFormatError):
        read_idx_labels(tmp_path / "img")
    data = (tmp_path / "img").read_bytes()
    (tmp_path / "short").write_bytes(data[:-1])
    with pytest.raises(IdxFormatError):
        read_idx_images(tmp_path / "short")
    (tmp_path / "tiny").write_bytes(data[:6])
    with pytest.raises(IdxFormatError):
        read_idx_images(tmp_path / "tiny")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "img", tmp_path / "lbl", np.zeros((2, 3, 3)), np.zeros(3))
    with pytest.raises(IdxFormatError):
        load_idx(tmp_path / "img", tmp_path / "lbl")


def test_idx_empty_files(tmp_path):
    write_idx(tmp_path / "img", tmp_path / "lbl", np.zeros((0, 28, 28)), np.zeros(0))
    data = load_idx(tmp_path / "img", tmp_path / "lbl")
    assert len(data) == 0 and data.images.shape == (0, 28, 28)


def test_load_mnist_directory(tmp_path):
    for names, n in ((TRAIN_FILES, 6), (TEST_FILES, 2)):
        write_idx(tmp_path / names[0], tmp_path / names[1], np.zeros((n, 28, 28)), np.arange(n) % 10)
    train, test = load_mnist(tmp_path)
    assert (len(train), len(test)) == (6, 2)


# --- sharding and sampling ---

def test_shards_are_deterministic_and_distinct_within_a_client():
    data = small_dataset()
    a = shard_clients(data, 12, 20, master_seed=5, clients_per_cluster=4)
    b = shard_clients(data, 12, 20, master_seed=5, clients_per_cluster=4)
    assert [s.cluster_id for s in a] == [c // 4 for c in range(12)]
    for x, y in zip(a, b):
        assert np.array_equal(x.samples, y.samples)
        firsts = x.samples[:, 0, 0]
        assert len(set(firsts.tolist())) == 20


def test_shard_errors():
    with pytest.raises(DataPlaneError):
        shard_clients(small_dataset(10), 2, 11, master_seed=0)
    with pytest.raises(DataPlaneError):
        shard_clients(Dataset(np.zeros((0, 2, 2)), np.zeros(0, dtype=np.int64)), 2, 1, master_seed=0)


def test_sample_clients():
    members = list(range(20, 40))
    picked = sample_clients(members, round_=3, sample_size=5, master_seed=1, cluster_id=2)
    assert picked == sorted(picked) and len(set(picked)) == 5
    assert set(picked) <= set(members)
    assert picked == sample_clients(members, 3, 5, 1, 2)
    assert sample_clients(members, 20, 20, 1, 2) == members
    with pytest.raises(DataPlaneError):
        sample_clients(members, 3, 21, 1, 2)


def test_pool_grows_and_evicts_oldest_first():
    data = small_dataset()
    shards = shard_clients(data, 4, 10, master_seed=0, clients_per_cluster=4)
    pool = ClusterPool(0)
    pool_round(pool, shards[:2], 1)
    pool_round(pool, shards[2:], 2)
    assert pool.size == 40
    assert pool.round_added == [1] * 20 + [2] * 20
    capped = ClusterPool(0, cap=25)
    pool_round(capped, shards[:2], 1)
    pool_round(capped, shards[2:], 2)
    assert capped.size == 25
    assert capped.round_added == [1] * 5 + [2] * 20
    assert np.array_equal(capped.labels[-20:], np.concatenate([shards[2].labels, shards[3].labels]))


def test_pool_rejects_foreign_clients():
    shards = shard_clients(small_dataset(), 4, 10, master_seed=0, clients_per_cluster=2)
    with pytest.raises(DataPlaneError):
        pool_round(ClusterPool(0), [shards[3]], 1)


def test_root_dataset():
    data = small_dataset()
    root = root_dataset(data, 30, np.random.default_rng(0))
    assert len(root) == 30
    assert len(set(root.images[:, 0, 0].tolist())) == 30
    with pytest.raises(DataPlaneError):
        root_dataset(data, 101, np.random.default_rng(0))
    with pytest.raises(DataPlaneError):
        root_dataset(data, 0, np.random.default_rng(0))


def test_synthetic_dataset_shape():
    data = synthetic_dataset(50, seed=0)
    assert data.images.shape == (50, 28, 28)
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0
    assert set(data.labels.tolist()) <= set(range(10))
