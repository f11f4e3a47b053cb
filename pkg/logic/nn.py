"""
Small neural networks trained from scratch on a pluggable numeric backend.

``FloatBackend`` computes in float64. ``FixedBackend`` computes on int64
raws of the 64-bit ring with f fractional bits: every product is truncated
the way the secure protocol truncates it, so fixed training reproduces the
numeric effects of training on secret shares. Softmax runs on decoded
values and is re-encoded.

Layers are frozen descriptors; parameters live in one flat vector
(layer order, row-major inside each layer).
"""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from logic.errors import ShapeMismatchError
from logic.ring_fixed import (
    DEFAULT_FRAC_BITS,
    FixedVec,
    decode_vec,
    encode,
    encode_vec,
    matmul_truncate,
    mul_shift,
)

logger = logging.getLogger(__name__)


# ============================================================================
# BACKENDS NUMERICOS
# ============================================================================

class FloatBackend:
    name = "float"
    dtype = np.float64

    def from_float(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    def to_float(self, a: np.ndarray) -> np.ndarray:
        return a

    def matmul(self, a, b):
        return a @ b

    def scale(self, a, c: float):
        return a * c

    def add(self, a, b):
        return a + b

    def sub(self, a, b):
        return a - b

    def zeros(self, shape):
        return np.zeros(shape, dtype=np.float64)


class FixedBackend:
    name = "fixed"
    dtype = np.int64

    def __init__(self, frac_bits: int = DEFAULT_FRAC_BITS):
        self.frac_bits = frac_bits

    def from_float(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return encode_vec(x.ravel(), self.frac_bits).signed.reshape(x.shape)

    def to_float(self, a: np.ndarray) -> np.ndarray:
        return a.astype(np.float64) / float(1 << self.frac_bits)

    def matmul(self, a, b):
        return matmul_truncate(a, b, self.frac_bits)

    def scale(self, a, c: float):
        return mul_shift(a, np.int64(encode(c, self.frac_bits).signed), self.frac_bits)

    def add(self, a, b):
        with np.errstate(over="ignore"):
            return a + b

    def sub(self, a, b):
        with np.errstate(over="ignore"):
            return a - b

    def zeros(self, shape):
        return np.zeros(shape, dtype=np.int64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ============================================================================
# CAPAS
# ============================================================================

@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    def param_shapes(self) -> List[tuple]:
        return [(self.in_features, self.out_features), (self.out_features,)]

    def fan_in(self) -> int:
        return self.in_features

    def output_shape(self, in_shape: tuple) -> tuple:
        if in_shape != (self.in_features,):
            raise ShapeMismatchError(f"dense({self.in_features},{self.out_features}) got input {in_shape}")
        return (self.out_features,)

    def forward(self, be, params, x):
        w, b = params
        return be.add(be.matmul(x, w), b), x

    def backward(self, be, params, cache, g):
        w, _ = params
        x = cache
        return be.matmul(g, w.T), [be.matmul(x.T, g), g.sum(axis=0)]

    def token(self) -> str:
        return f"dense({self.in_features},{self.out_features})"


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    def param_shapes(self) -> List[tuple]:
        return [(self.out_channels, self.in_channels, self.kernel, self.kernel), (self.out_channels,)]

    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def output_shape(self, in_shape: tuple) -> tuple:
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeMismatchError(f"{self.token()} got input {in_shape}")
        _, h, w = in_shape
        if h < self.kernel or w < self.kernel:
            raise ShapeMismatchError(f"{self.token()} kernel larger than input {in_shape}")
        return (self.out_channels, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)

    def forward(self, be, params, x):
        w, b = params
        n = x.shape[0]
        k, s = self.kernel, self.stride
        windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        oh, ow = windows.shape[2], windows.shape[3]
        cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, -1)
        w_mat = w.reshape(self.out_channels, -1)
        out = be.add(be.matmul(cols, np.ascontiguousarray(w_mat.T)), b)
        out = out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (x.shape, cols, oh, ow)

    def backward(self, be, params, cache, g):
        w, _ = params
        x_shape, cols, oh, ow = cache
        n = x_shape[0]
        k, s = self.kernel, self.stride
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, self.out_channels)
        w_mat = w.reshape(self.out_channels, -1)
        dw = be.matmul(np.ascontiguousarray(g2.T), cols).reshape(w.shape)
        db = g2.sum(axis=0)
        dcols = be.matmul(g2, w_mat).reshape(n, oh, ow, self.in_channels, k, k)
        dx = be.zeros(x_shape)
        with np.errstate(over="ignore"):
            for i in range(k):
                for j in range(k):
                    dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, [dw, db]

    def token(self) -> str:
        return f"conv2d({self.in_channels},{self.out_channels},{self.kernel},{self.stride})"


@dataclass(frozen=True)
class MaxPool:
    k: int = 2

    def param_shapes(self) -> List[tuple]:
        return []

    def output_shape(self, in_shape: tuple) -> tuple:
        if len(in_shape) != 3 or in_shape[1] % self.k or in_shape[2] % self.k:
            raise ShapeMismatchError(f"maxpool({self.k}) needs spatial dims divisible by {self.k}, got {in_shape}")
        return (in_shape[0], in_shape[1] // self.k, in_shape[2] // self.k)

    def forward(self, be, params, x):
        n, c, h, w = x.shape
        k = self.k
        blocks = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, be, params, cache, g):
        (n, c, h, w), idx = cache
        k = self.k
        blocks = be.zeros((n, c, h // k, w // k, k * k))
        np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
        dx = blocks.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return dx, []

    def token(self) -> str:
        return f"maxpool({self.k})"


@dataclass(frozen=True)
class ReLU:
    def param_shapes(self) -> List[tuple]:
        return []

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, be, params, x):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype), mask

    def backward(self, be, params, cache, g):
        return np.where(cache, g, 0).astype(g.dtype), []

    def token(self) -> str:
        return "relu"


@dataclass(frozen=True)
class Flatten:
    def param_shapes(self) -> List[tuple]:
        return []

    def output_shape(self, in_shape: tuple) -> tuple:
        return (int(np.prod(in_shape)),)

    def forward(self, be, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, be, params, cache, g):
        return g.reshape(cache), []

    def token(self) -> str:
        return "flatten"


_TOKEN = re.compile(r"^(\w+)(?:\(([\d,]*)\))?$")
_LAYER_TYPES = {"dense": Dense, "conv2d": Conv2d, "maxpool": MaxPool, "relu": ReLU, "flatten": Flatten}


@dataclass(frozen=True)
class Architecture:
    """Layer stack ending in a softmax cross-entropy head."""
    input_shape: Tuple[int, ...]
    layers: Tuple
    shapes: Tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        shapes = [tuple(self.input_shape)]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        if len(shapes[-1]) != 1:
            raise ShapeMismatchError(f"architecture must end in a vector of class scores, got {shapes[-1]}")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for layer in self.layers for s in layer.param_shapes())

    def descriptor(self) -> str:
        dims = "x".join(str(d) for d in self.input_shape)
        return ";".join([f"in={dims}"] + [layer.token() for layer in self.layers])

    @classmethod
    def from_descriptor(cls, text: str) -> "Architecture":
        head, *tokens = text.strip().split(";")
        if not head.startswith("in="):
            raise ValueError(f"architecture descriptor must start with in=..., got '{head}'")
        input_shape = tuple(int(d) for d in head[3:].split("x"))
        layers = []
        for token in tokens:
            match = _TOKEN.match(token)
            if not match or match.group(1) not in _LAYER_TYPES:
                raise ValueError(f"unknown layer token '{token}'")
            args = [int(a) for a in match.group(2).split(",")] if match.group(2) else []
            layers.append(_LAYER_TYPES[match.group(1)](*args))
        return cls(input_shape, tuple(layers))


def lenet() -> Architecture:
    return Architecture((1, 28, 28), (
        Conv2d(1, 6, 5), ReLU(), MaxPool(2),
        Conv2d(6, 16, 5), ReLU(), MaxPool(2),
        Flatten(),
        Dense(256, 120), ReLU(),
        Dense(120, 84), ReLU(),
        Dense(84, 10),
    ))


def mlp(inputs: int = 784, hidden: int = 128, classes: int = 10) -> Architecture:
    return Architecture((inputs,), (Dense(inputs, hidden), ReLU(), Dense(hidden, classes)))


PRESETS = {"lenet": lenet, "mlp": mlp}


# ============================================================================
# MODELO
# ============================================================================

@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 5
    batch_size: int = 80
    lr: float = 0.05
    momentum: float = 0.0
    weight_decay: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("train spec: epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("train spec: batch size must be >= 1")


@dataclass(eq=False)
class Model:
    arch: Architecture
    params: Union[np.ndarray, FixedVec]

    def __post_init__(self):
        if len(self.params) != self.arch.param_count:
            raise ShapeMismatchError(
                f"params length {len(self.params)} != {self.arch.param_count} for {self.arch.descriptor()}")

    @property
    def param_count(self) -> int:
        return self.arch.param_count

    @property
    def is_fixed(self) -> bool:
        return isinstance(self.params, FixedVec)

    def backend(self):
        return FixedBackend(self.params.frac_bits) if self.is_fixed else FloatBackend()

    def raw_params(self) -> np.ndarray:
        """Backend-typed flat parameters (float64, or int64 ring raws)."""
        return self.params.signed if self.is_fixed else self.params

    def to_fixed(self, frac_bits: int = DEFAULT_FRAC_BITS) -> "Model":
        if self.is_fixed:
            return self
        return Model(self.arch, encode_vec(self.params, frac_bits))

    def to_float(self) -> "Model":
        if not self.is_fixed:
            return self
        return Model(self.arch, decode_vec(self.params))

    def with_raw(self, raw: np.ndarray) -> "Model":
        if self.is_fixed:
            return Model(self.arch, FixedVec(raw.astype(np.int64).view(np.uint64), self.params.frac_bits))
        return Model(self.arch, raw)


def unflatten(arch: Architecture, flat: np.ndarray) -> List[List[np.ndarray]]:
    out, offset = [], 0
    for layer in arch.layers:
        tensors = []
        for shape in layer.param_shapes():
            n = int(np.prod(shape))
            tensors.append(flat[offset:offset + n].reshape(shape))
            offset += n
        out.append(tensors)
    return out


def flatten(layer_params: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    parts = [t.ravel() for tensors in layer_params for t in tensors]
    return np.concatenate(parts) if parts else np.zeros(0)


def init_model(arch: Architecture, rng: np.random.Generator) -> Model:
    """He-uniform weights scaled by fan-in, zero biases."""
    layer_params = []
    for layer in arch.layers:
        shapes = layer.param_shapes()
        if not shapes:
            layer_params.append([])
            continue
        limit = np.sqrt(6.0 / layer.fan_in())
        w = rng.uniform(-limit, limit, size=shapes[0])
        layer_params.append([w, np.zeros(shapes[1])])
    return Model(arch, flatten(layer_params).astype(np.float64))


# ============================================================================
# FORWARD / BACKWARD
# ============================================================================

def _prepare_inputs(arch: Architecture, be, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    n = x.shape[0] if x.ndim else 0
    if x.ndim == 0 or x[0].size != int(np.prod(arch.input_shape)):
        raise ShapeMismatchError(f"inputs of shape {x.shape} do not fit input shape {arch.input_shape}")
    return be.from_float(x.reshape((n,) + tuple(arch.input_shape)))


def _forward(model: Model, be, x: np.ndarray):
    params = unflatten(model.arch, model.raw_params())
    caches = []
    for layer, p in zip(model.arch.layers, params):
        x, cache = layer.forward(be, p, x)
        caches.append(cache)
    return x, params, caches


def _loss_and_grad(model: Model, be, x: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    logits, params, caches = _forward(model, be, x)
    n = logits.shape[0]
    probs = softmax(be.to_float(logits))
    picked = probs[np.arange(n), labels]
    with np.errstate(divide="ignore", invalid="ignore"):
        loss = float(-np.mean(np.log(picked)))
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    g = be.scale(be.from_float(probs - onehot), 1.0 / n)
    grads = []
    for layer, p, cache in reversed(list(zip(model.arch.layers, params, caches))):
        g, layer_grads = layer.backward(be, p, cache, g)
        grads.append(layer_grads)
    grads.reverse()
    return loss, flatten(grads).astype(be.dtype) if grads else be.zeros(0)


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeMismatchError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} samples")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeMismatchError(f"labels outside [0, {num_classes})")
    return labels


def gradient(model: Model, inputs, labels) -> Union[np.ndarray, FixedVec]:
    """Backprop gradient of the mean cross-entropy over the batch."""
    be = model.backend()
    x = _prepare_inputs(model.arch, be, inputs)
    y = _check_labels(labels, x.shape[0], model.arch.num_classes)
    _, grad = _loss_and_grad(model, be, x, y)
    return model.with_raw(grad).params


def loss(model: Model, inputs, labels) -> float:
    be = model.backend()
    x = _prepare_inputs(model.arch, be, inputs)
    y = _check_labels(labels, x.shape[0], model.arch.num_classes)
    logits, _, _ = _forward(model, be, x)
    probs = softmax(be.to_float(logits))
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(probs[np.arange(len(y)), y])))


def train_with_history(model: Model, inputs, labels, spec: TrainSpec) -> Tuple[Model, List[float]]:
    """Mini-batch SGD; returns the trained model and the mean loss of each epoch."""
    be = model.backend()
    x = _prepare_inputs(model.arch, be, inputs)
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    y = _check_labels(labels, n, model.arch.num_classes)
    rng = np.random.default_rng(spec.rng_seed)
    w = model.raw_params().copy()
    velocity = be.zeros(w.shape) if spec.momentum else None
    history = []
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, spec.batch_size):
            batch = order[start:start + spec.batch_size]
            step_loss, g = _loss_and_grad(model.with_raw(w), be, x[batch], y[batch])
            losses.append(step_loss)
            if spec.weight_decay:
                g = be.add(g, be.scale(w, spec.weight_decay))
            if velocity is not None:
                velocity = be.add(be.scale(velocity, spec.momentum), g)
                g = velocity
            w = be.sub(w, be.scale(g, spec.lr))
        history.append(float(np.mean(losses)))
    return model.with_raw(w), history


def train(model: Model, inputs, labels, spec: TrainSpec) -> Model:
    return train_with_history(model, inputs, labels, spec)[0]


def predict(model: Model, inputs) -> np.ndarray:
    """Class scores (logits, decoded to float). Empty batch gives shape (0, classes)."""
    be = model.backend()
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[:1] == (0,):
        return np.zeros((0, model.arch.num_classes))
    logits, _, _ = _forward(model, be, _prepare_inputs(model.arch, be, x))
    return be.to_float(logits)


def predict_labels(model: Model, inputs) -> np.ndarray:
    return predict(model, inputs).argmax(axis=1)


def accuracy(model: Model, inputs, labels, batch_size: int = 1000) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    hits = 0
    for start in range(0, len(labels), batch_size):
        hits += int(np.sum(predict_labels(model, inputs[start:start + batch_size]) == labels[start:start + batch_size]))
    return hits / len(labels)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def float_encoding() -> str:
    return "float64"


def ring_encoding(frac_bits: int) -> str:
    return f"ring64:f={frac_bits}"


def write_vector_file(path: Union[str, Path], descriptor: str, encoding: str, values: np.ndarray) -> Path:
    """Header line ``descriptor|encoding`` then little-endian 64-bit values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype = "<f8" if encoding == float_encoding() else "<u8"
    with open(path, "wb") as fh:
        fh.write(f"{descriptor}|{encoding}\n".encode("ascii"))
        fh.write(np.asarray(values).astype(dtype).tobytes())
    return path


def read_vector_file(path: Union[str, Path]) -> Tuple[str, str, np.ndarray]:
    data = Path(path).read_bytes()
    header, sep, body = data.partition(b"\n")
    if not sep or b"|" not in header:
        raise ValueError(f"{path}: missing checkpoint header")
    descriptor, encoding = header.decode("ascii").rsplit("|", 1)
    dtype = "<f8" if encoding == float_encoding() else "<u8"
    if len(body) % 8:
        raise ValueError(f"{path}: truncated checkpoint body")
    values = np.frombuffer(body, dtype=dtype)
    return descriptor, encoding, values.astype(np.float64 if dtype == "<f8" else np.uint64)


def parse_encoding(encoding: str) -> dict:
    """'ring64-share:f=22:owner=G:party=0:of=2' -> {'kind': 'ring64-share', 'f': '22', ...}."""
    kind, *fields = encoding.split(":")
    out = {"kind": kind}
    for item in fields:
        key, _, value = item.partition("=")
        out[key] = value
    return out


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    if model.is_fixed:
        return write_vector_file(path, model.arch.descriptor(), ring_encoding(model.params.frac_bits), model.params.raw)
    return write_vector_file(path, model.arch.descriptor(), float_encoding(), model.params)


def load_checkpoint(path: Union[str, Path]) -> Model:
    descriptor, encoding, values = read_vector_file(path)
    arch = Architecture.from_descriptor(descriptor)
    info = parse_encoding(encoding)
    if info["kind"] == "float64":
        return Model(arch, values)
    if info["kind"] == "ring64":
        return Model(arch, FixedVec(values, int(info["f"])))
    raise ValueError(f"{path}: '{encoding}' is a share file, load it through the artifact store")
