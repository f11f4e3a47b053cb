import sys
import os

# Add the project root to sys.path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from logic.data_plane import synthetic_dataset
from logic.errors import ShapeMismatchError
from logic.nn import (
    Architecture,
    Conv2d,
    Dense,
    Flatten,
    MaxPool,
    Model,
    ReLU,
    TrainSpec,
    accuracy,
    gradient,
    init_model,
    lenet,
    load_checkpoint,
    loss,
    mlp,
    parse_encoding,
    predict,
    save_checkpoint,
    train,
    write_vector_file,
)


def _numeric_gradient(model, x, y, eps=1e-6):
    params = model.params
    grad = np.zeros_like(params)
    for k in range(params.size):
        plus, minus = params.copy(), params.copy()
        plus[k] += eps
        minus[k] -= eps
        grad[k] = (loss(Model(model.arch, plus), x, y) - loss(Model(model.arch, minus), x, y)) / (2 * eps)
    return grad


def _relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def test_preset_parameter_counts():
    assert lenet().param_count == 44426
    assert mlp().param_count == 101770
    assert lenet().num_classes == 10


def test_descriptor_roundtrip():
    arch = lenet()
    again = Architecture.from_descriptor(arch.descriptor())
    assert again.descriptor() == arch.descriptor()
    assert again.param_count == 44426
    with pytest.raises(ValueError):
        Architecture.from_descriptor("in=4;softmax(3)")


def test_inconsistent_architecture():
    with pytest.raises(ShapeMismatchError):
        Architecture((4,), (Dense(5, 3),))


@pytest.mark.parametrize("seed", range(20))
def test_dense_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = init_model(mlp(6, 5, 3), rng)
    x = rng.normal(size=(4, 6))
    y = rng.integers(0, 3, size=4)
    assert _relative_error(gradient(model, x, y), _numeric_gradient(model, x, y)) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_conv_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    arch = Architecture((1, 6, 6), (Conv2d(1, 2, 3), ReLU(), MaxPool(2), Flatten(), Dense(8, 3)))
    model = init_model(arch, rng)
    x = rng.normal(size=(3, 1, 6, 6))
    y = rng.integers(0, 3, size=3)
    assert _relative_error(gradient(model, x, y), _numeric_gradient(model, x, y)) < 1e-3


def test_predict_shapes():
    model = init_model(mlp(), np.random.default_rng(0))
    assert predict(model, np.zeros((0, 28, 28))).shape == (0, 10)
    assert predict(model, np.zeros((3, 28, 28))).shape == (3, 10)
    with pytest.raises(ShapeMismatchError):
        predict(model, np.zeros((2, 27, 27)))


def test_fixed_forward_tracks_float():
    rng = np.random.default_rng(1)
    model = init_model(mlp(784, 32, 10), rng)
    x = rng.uniform(0, 1, size=(16, 784))
    assert np.max(np.abs(predict(model, x) - predict(model.to_fixed(22), x))) < 1e-3


def test_fixed_training_tracks_float_training():
    data = synthetic_dataset(600, seed=3)
    spec = TrainSpec(epochs=3, batch_size=20, lr=0.05)
    model = init_model(mlp(784, 32, 10), np.random.default_rng(0))
    float_model = train(model, data.images, data.labels, spec)
    fixed_model = train(model.to_fixed(22), data.images, data.labels, spec)
    acc_float = accuracy(float_model, data.images, data.labels)
    acc_fixed = accuracy(fixed_model, data.images, data.labels)
    assert acc_float > 0.8
    assert abs(acc_float - acc_fixed) <= 0.05


def test_training_lowers_the_loss():
    data = synthetic_dataset(300, seed=4)
    model = init_model(mlp(784, 16, 10), np.random.default_rng(2))
    before = loss(model, data.images, data.labels)
    after = loss(train(model, data.images, data.labels, TrainSpec(epochs=2, batch_size=10, lr=0.05)),
                 data.images, data.labels)
    assert after < before


def test_training_rejects_bad_labels():
    model = init_model(mlp(4, 3, 2), np.random.default_rng(0))
    with pytest.raises(ShapeMismatchError):
        train(model, np.zeros((2, 4)), np.array([0, 5]), TrainSpec(epochs=1))


def test_checkpoint_roundtrip(tmp_path):
    model = init_model(lenet(), np.random.default_rng(0))
    restored = load_checkpoint(save_checkpoint(model, tmp_path / "float.bin"))
    assert np.array_equal(restored.params, model.params)
    fixed = model.to_fixed(22)
    restored = load_checkpoint(save_checkpoint(fixed, tmp_path / "fixed.bin"))
    assert restored.is_fixed and restored.params == fixed.params


def test_share_files_are_not_plain_checkpoints(tmp_path):
    arch = mlp(4, 3, 2)
    encoding = "ring64-share:f=22:owner=G:party=0:of=2"
    path = write_vector_file(tmp_path / "share-0.bin", arch.descriptor(), encoding,
                             np.zeros(arch.param_count, dtype=np.uint64))
    assert parse_encoding(encoding) == {"kind": "ring64-share", "f": "22", "owner": "G", "party": "0", "of": "2"}
    with pytest.raises(ValueError):
        load_checkpoint(path)
