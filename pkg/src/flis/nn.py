"""Dense feed-forward classifier with softmax cross-entropy and plain SGD.

Parameters live in one flat float64 vector so that federated averaging is a
weighted mean of vectors. Everything here is a pure function of its
arguments; ``ModelParams`` and ``LabeledData`` hold read-only arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from flis.errors import EmptyInputError, ShapeError, TrainingDivergenceError

Layer = tuple[int, int]


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ModelParams:
    weights: np.ndarray
    shape: tuple[Layer, ...]
    activation: str = "relu"

    def __post_init__(self):
        shape = tuple((int(i), int(o)) for i, o in self.shape)
        object.__setattr__(self, "shape", shape)
        if not shape:
            raise ShapeError("model needs at least one layer")
        for (_, o), (i, _) in zip(shape, shape[1:]):
            if o != i:
                raise ShapeError(f"layer fan_out {o} does not feed fan_in {i}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        w = _frozen(self.weights, np.float64).ravel()
        if w.size != param_count(shape):
            raise ShapeError(f"expected {param_count(shape)} weights, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise ValueError("model weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def input_dim(self) -> int:
        return self.shape[0][0]

    @property
    def num_classes(self) -> int:
        return self.shape[-1][1]

    @property
    def size(self) -> int:
        return self.weights.size

    def with_weights(self, weights: np.ndarray) -> ModelParams:
        return ModelParams(weights, self.shape, self.activation)

    def unpack(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views of (W, b) per layer, W of shape (fan_in, fan_out)."""
        return _unpack(self.weights, self.shape)


@dataclass(frozen=True, eq=False)
class LabeledData:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    # corpus row ids; used to prove disjointness of splits
    index: np.ndarray | None = field(default=None)

    def __post_init__(self):
        x = _frozen(self.features, np.float64)
        y = _frozen(self.labels, np.int64)
        if x.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if y.shape != (x.shape[0],):
            raise ShapeError("need exactly one label per feature row")
        if x.shape[0] < 1:
            raise EmptyInputError("dataset has no samples")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(x)):
            raise ValueError("feature rows must be finite")
        idx = np.arange(len(y)) if self.index is None else self.index
        idx = _frozen(idx, np.int64)
        if idx.shape != y.shape:
            raise ShapeError("index must match the number of samples")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> LabeledData:
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledData(self.features[rows], self.labels[rows], self.num_classes, self.index[rows])

    def label_set(self) -> frozenset[int]:
        return frozenset(int(c) for c in np.unique(self.labels))


def param_count(shape) -> int:
    return sum(i * o + o for i, o in shape)


def _unpack(flat: np.ndarray, shape) -> list[tuple[np.ndarray, np.ndarray]]:
    out, pos = [], 0
    for i, o in shape:
        w = flat[pos:pos + i * o].reshape(i, o)
        pos += i * o
        b = flat[pos:pos + o]
        pos += o
        out.append((w, b))
    return out


def init_model(input_dim: int, num_classes: int, hidden: tuple[int, ...] = (32,), seed: int = 0) -> ModelParams:
    """Xavier-uniform weights, zero biases."""
    dims = [input_dim, *hidden, num_classes]
    shape = tuple(zip(dims[:-1], dims[1:]))
    rng = np.random.default_rng(seed)
    parts = []
    for i, o in shape:
        limit = math.sqrt(6.0 / (i + o))
        parts.append(rng.uniform(-limit, limit, size=i * o))
        parts.append(np.zeros(o))
    return ModelParams(np.concatenate(parts), shape)


def zero_model(shape) -> ModelParams:
    return ModelParams(np.zeros(param_count(shape)), shape)


def _check_input(model: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected (M, {model.input_dim}) features, got {x.shape}")
    return x


def _logits(layers, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    acts = [x]
    h = x
    for k, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.maximum(z, 0.0) if k < len(layers) - 1 else z
        acts.append(h)
    return h, acts


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(model: ModelParams, features: np.ndarray) -> np.ndarray:
    """Per-row class probabilities."""
    x = _check_input(model, features)
    z, _ = _logits(model.unpack(), x)
    return np.exp(_log_softmax(z))


def loss(model: ModelParams, data: LabeledData) -> float:
    """Mean softmax cross-entropy over ``data``."""
    if len(data) == 0:
        raise EmptyInputError("loss of an empty dataset")
    z, _ = _logits(model.unpack(), _check_input(model, data.features))
    logp = _log_softmax(z)
    return float(-logp[np.arange(len(data)), data.labels].mean())


def loss_and_grad(model: ModelParams, features: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the flat weight vector."""
    x = _check_input(model, features)
    labels = np.asarray(labels, dtype=np.int64)
    m = x.shape[0]
    if m == 0:
        raise EmptyInputError("gradient of an empty batch")
    layers = model.unpack()
    z, acts = _logits(layers, x)
    logp = _log_softmax(z)
    value = float(-logp[np.arange(m), labels].mean())

    delta = np.exp(logp)
    delta[np.arange(m), labels] -= 1.0
    delta /= m
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        h_in = acts[k]
        grads.append((h_in.T @ delta, delta.sum(axis=0)))
        if k > 0:
            delta = (delta @ w.T) * (acts[k] > 0)
    flat = np.concatenate([p.ravel() for gw, gb in reversed(grads) for p in (gw, gb)])
    return value, flat


def accuracy(model: ModelParams, data: LabeledData) -> float:
    probs = forward(model, data.features)
    return float(np.mean(probs.argmax(axis=1) == data.labels))


def client_update(
    model: ModelParams,
    train: LabeledData,
    epochs: int,
    lr: float,
    batch_size: int,
    rng_seed,
) -> ModelParams:
    """Mini-batch SGD for ``epochs`` passes over ``train``.

    Each epoch reshuffles with a generator seeded from ``rng_seed`` (an int
    or a ``numpy.random.SeedSequence``), so the result is reproducible.
    """
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not 1 <= batch_size <= len(train):
        raise ValueError(f"batch_size must be in [1, {len(train)}], got {batch_size}")
    rng = np.random.default_rng(rng_seed)
    w = model.weights.copy()
    m = len(train)
    step = 0
    # overflow is detected explicitly below, so numpy's warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            order = rng.permutation(m)
            for start in range(0, m, batch_size):
                rows = order[start:start + batch_size]
                _, g = loss_and_grad(model.with_weights(w), train.features[rows], train.labels[rows])
                if not np.all(np.isfinite(g)):
                    raise TrainingDivergenceError(step)
                w = w - lr * g
                if not np.all(np.isfinite(w)):
                    raise TrainingDivergenceError(step, f"weights became non-finite at SGD step {step}")
                step += 1
    return model.with_weights(w)


def inference_matrix(model: ModelParams, server_data: LabeledData, mode: str = "soft") -> np.ndarray:
    """Outputs of ``model`` on the server set, soft or one-hot.

    One-hot rows mark the argmax; ties resolve to the lowest class index.
    """
    if len(server_data) == 0:
        raise EmptyInputError("server dataset is empty")
    probs = forward(model, server_data.features)
    if mode == "soft":
        return probs
    if mode == "one-hot":
        out = np.zeros_like(probs)
        out[np.arange(probs.shape[0]), probs.argmax(axis=1)] = 1.0  # argmax returns first max
        return out
    raise ValueError(f"unknown inference mode {mode!r}")
