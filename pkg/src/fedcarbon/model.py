"""Small ReLU MLP classifier with hand-written backprop and Adam.

Parameters live in one flat float64 vector. Layer ``l`` owns a weight
matrix of shape ``(out, in)`` followed by a bias of length ``out``, laid out
consecutively, so ``forward`` computes ``W @ x + b`` per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError


class LabeledArrays(Protocol):
    features: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int


@dataclass
class ModelParams:
    values: np.ndarray
    shapes: list[tuple[int, int]]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.shapes = [(int(o), int(i)) for o, i in self.shapes]
        if self.values.ndim != 1 or self.values.size != self.param_count:
            raise ShapeError(
                f"parameter vector has {self.values.size} entries, layer shapes need {self.param_count}"
            )

    @property
    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    @property
    def input_dim(self) -> int:
        return self.shapes[0][1]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def bias_lengths(self) -> list[int]:
        return [o for o, _ in self.shapes]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into ``values``; writing to them mutates the params."""
        out = []
        offset = 0
        for o, i in self.shapes:
            w = self.values[offset : offset + o * i].reshape(o, i)
            offset += o * i
            b = self.values[offset : offset + o]
            offset += o
            out.append((w, b))
        return out

    def copy(self) -> ModelParams:
        return ModelParams(self.values.copy(), list(self.shapes))


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be > 0")


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, param_count: int, cfg: AdamConfig | None = None) -> AdamState:
        cfg = cfg or AdamConfig()
        return cls(
            first_moment=np.zeros(param_count),
            second_moment=np.zeros(param_count),
            step_count=0,
            lr=cfg.lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            epsilon=cfg.epsilon,
        )


@dataclass
class PerSampleGradStats:
    norms: np.ndarray
    mean_square: float = field(init=False)

    def __post_init__(self) -> None:
        self.norms = np.asarray(self.norms, dtype=np.float64)
        if self.norms.size == 0:
            raise ConfigurationError("gradient statistics need at least one sample")
        if np.any(self.norms < 0) or not np.all(np.isfinite(self.norms)):
            raise NumericError("gradient norms must be finite and non-negative")
        self.mean_square = float(np.mean(self.norms**2))

    @property
    def count(self) -> int:
        return int(self.norms.size)


def init_params(layer_dims: Sequence[int], seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ConfigurationError(f"layer_dims needs >= 2 positive entries, got {list(layer_dims)}")
    rng = np.random.default_rng(seed)
    chunks = []
    shapes = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        chunks.append(np.zeros(fan_out))
        shapes.append((fan_out, fan_in))
    return ModelParams(np.concatenate(chunks), shapes)


def _as_batch(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"expected {params.input_dim} input features, got shape {np.shape(features)}")
    return x


def _forward_cache(params: ModelParams, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    layers = params.layers()
    inputs = []
    pre = []
    a = x
    for idx, (w, b) in enumerate(layers):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        a = np.maximum(z, 0.0) if idx < len(layers) - 1 else z
    return inputs, pre


def forward_batch(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Logits for a ``(n, d)`` feature matrix."""
    _, pre = _forward_cache(params, _as_batch(params, features))
    return pre[-1]


def forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("forward takes a single feature vector; use forward_batch for matrices")
    return forward_batch(params, x)[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ShapeError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)


def loss(logits: np.ndarray, label: int) -> float:
    """Softmax cross-entropy of a single logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.size:
        raise ShapeError(f"label {label} out of range for {z.size} logits")
    return float(-_log_softmax(z)[label])


def batch_losses(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logits = forward_batch(params, features)
    y = _check_labels(labels, params.num_classes)
    return -_log_softmax(logits)[np.arange(y.size), y]


def _backprop(
    params: ModelParams, features: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Per-sample losses, output deltas per layer and layer inputs."""
    x = _as_batch(params, features)
    y = _check_labels(labels, params.num_classes)
    if y.shape != (x.shape[0],):
        raise ShapeError(f"{x.shape[0]} samples but {y.size} labels")
    # non-finite values are reported by the callers with the sample index
    with np.errstate(invalid="ignore", over="ignore"):
        inputs, pre = _forward_cache(params, x)
        logp = _log_softmax(pre[-1])
        rows = np.arange(y.size)
        losses = -logp[rows, y]
        delta = np.exp(logp)
        delta[rows, y] -= 1.0
        layers = params.layers()
        deltas: list[np.ndarray] = [delta] * len(layers)
        for idx in range(len(layers) - 1, 0, -1):
            deltas[idx] = delta
            delta = (delta @ layers[idx][0]) * (pre[idx - 1] > 0)
        deltas[0] = delta
    return losses, deltas, inputs


def _raise_if_nonfinite(losses: np.ndarray, deltas: list[np.ndarray], offset: int = 0) -> None:
    bad = ~np.isfinite(losses)
    for d in deltas:
        bad |= ~np.all(np.isfinite(d), axis=1)
    if bad.any():
        raise NumericError(f"non-finite loss or gradient at sample index {offset + int(np.argmax(bad))}")


def batch_gradient(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and mean parameter gradient over a batch."""
    losses, deltas, inputs = _backprop(params, features, labels)
    _raise_if_nonfinite(losses, deltas)
    n = losses.size
    parts = []
    for d, a in zip(deltas, inputs):
        parts.append((d.T @ a).ravel() / n)
        parts.append(d.sum(axis=0) / n)
    return float(losses.mean()), np.concatenate(parts)


def per_sample_grad(params: ModelParams, sample: Sample, index: int = 0) -> np.ndarray:
    """Gradient of the sample's loss with respect to every model parameter."""
    x = np.asarray(sample.features, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("sample features must be a vector")
    losses, deltas, inputs = _backprop(params, x[None, :], np.array([sample.label]))
    _raise_if_nonfinite(losses, deltas, offset=index)
    parts = []
    for d, a in zip(deltas, inputs):
        parts.append(np.outer(d[0], a[0]).ravel())
        parts.append(d[0])
    return np.concatenate(parts)


def per_sample_grad_norms(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """L2 norm of each sample's parameter gradient, without materialising it.

    A sample's weight gradient for one layer is the outer product of the
    layer delta and the layer input, whose squared Frobenius norm factorises
    as ``|delta|^2 * |input|^2``.
    """
    losses, deltas, inputs = _backprop(params, features, labels)
    _raise_if_nonfinite(losses, deltas)
    sq = np.zeros(losses.size)
    for d, a in zip(deltas, inputs):
        sq += np.sum(d * d, axis=1) * (np.sum(a * a, axis=1) + 1.0)
    return np.sqrt(sq)


def grad_stats(params: ModelParams, data: LabeledArrays) -> PerSampleGradStats:
    return PerSampleGradStats(per_sample_grad_norms(params, data.features, data.labels))


def adam_step(state: AdamState, params: ModelParams, grad: np.ndarray) -> tuple[AdamState, ModelParams]:
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape or state.first_moment.shape != g.shape:
        raise ShapeError(f"gradient length {g.size} does not match {params.param_count} parameters")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = replace(state, first_moment=m, second_moment=v, step_count=t)
    return new_state, ModelParams(values, list(params.shapes))


def local_train(
    params: ModelParams,
    data: LabeledArrays,
    epochs: int,
    batch_size: int,
    opt_cfg: AdamConfig | None = None,
    seed: int = 0,
) -> tuple[ModelParams, float, np.ndarray]:
    """Mini-batch Adam from a fresh optimizer state.

    Returns the trained params, the mean loss over the full local dataset
    after training, and those per-sample losses.
    """
    n = len(data.labels)
    if n == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if epochs < 0 or batch_size < 1:
        raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
    rng = np.random.default_rng(seed)
    state = AdamState.fresh(params.param_count, opt_cfg)
    current = params.copy()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grad = batch_gradient(current, data.features[idx], data.labels[idx])
            state, current = adam_step(state, current, grad)
    losses = batch_losses(current, data.features, data.labels)
    return current, float(losses.mean()), losses


def evaluate(params: ModelParams, test: LabeledArrays) -> tuple[float, float]:
    """Accuracy (argmax, lowest index wins ties) and mean cross-entropy."""
    if len(test.labels) == 0:
        raise ConfigurationError("empty test set")
    logits = forward_batch(params, test.features)
    y = _check_labels(test.labels, params.num_classes)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    mean_loss = float(np.mean(-_log_softmax(logits)[np.arange(y.size), y]))
    return acc, mean_loss
