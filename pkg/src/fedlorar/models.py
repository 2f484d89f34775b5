"""Small differentiable models used as local learners.

Parameter layouts (row-major, concatenated in this order):

* ``linear-regression``:   W (input_dim x 1), b (1)                 -> d = D + 1
* ``logistic-regression``: W (input_dim x K), b (K)                 -> d = D*K + K
* ``mlp-1-hidden``:        W1 (D x H), b1 (H), W2 (H x K), b2 (K)   -> d = D*H + H + H*K + K

Losses are mean-reduced over the batch: squared error for regression and
softmax cross-entropy (natural log) for the classifiers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidSpec, NotClassification
from .tensor import ParamVector, as_vector

KINDS = ("linear-regression", "logistic-regression", "mlp-1-hidden")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int = 1
    hidden_dim: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpec(f"unknown activation {self.activation!r}")
        if self.input_dim < 1:
            raise InvalidSpec("input_dim must be >= 1")
        if self.kind == "linear-regression":
            if self.num_classes != 1:
                raise InvalidSpec("linear-regression has exactly one output")
            if self.hidden_dim != 0:
                raise InvalidSpec("hidden_dim must be 0 for non-mlp kinds")
        elif self.num_classes < 2:
            raise InvalidSpec(f"{self.kind} needs num_classes >= 2")
        if self.kind == "mlp-1-hidden" and self.hidden_dim < 1:
            raise InvalidSpec("mlp-1-hidden requires hidden_dim >= 1")
        if self.kind == "logistic-regression" and self.hidden_dim != 0:
            raise InvalidSpec("hidden_dim must be 0 for non-mlp kinds")

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear-regression"

    @property
    def dim(self) -> int:
        return param_dim(self)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise DimensionMismatch(f"inputs must be (batch_size >= 1, input_dim), got {self.inputs.shape}")
        if self.targets.shape != (self.inputs.shape[0],):
            raise DimensionMismatch("one target per input row is required")

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


def param_dim(spec: ModelSpec) -> int:
    D, K, H = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "mlp-1-hidden":
        return D * H + H + H * K + K
    return D * K + K


def _unpack(spec: ModelSpec, w: np.ndarray):
    if w.shape != (param_dim(spec),):
        raise DimensionMismatch(f"parameter dim {w.shape} does not match spec dim {param_dim(spec)}")
    D, K, H = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "mlp-1-hidden":
        o = 0
        W1 = w[o : o + D * H].reshape(D, H); o += D * H
        b1 = w[o : o + H]; o += H
        W2 = w[o : o + H * K].reshape(H, K); o += H * K
        b2 = w[o : o + K]
        return W1, b1, W2, b2
    W = w[: D * K].reshape(D, K)
    b = w[D * K :]
    return W, b


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """He-scaled Gaussian weights (std = sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed % 2**64)
    D, K, H = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "mlp-1-hidden":
        parts = [
            rng.normal(0.0, np.sqrt(2.0 / D), size=D * H),
            np.zeros(H),
            rng.normal(0.0, np.sqrt(2.0 / H), size=H * K),
            np.zeros(K),
        ]
    else:
        parts = [rng.normal(0.0, np.sqrt(2.0 / D), size=D * K), np.zeros(K)]
    return as_vector(np.concatenate(parts))


def _activate(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def outputs(spec: ModelSpec, w: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Raw model outputs: logits (n x K) or predictions (n x 1) for regression."""
    params = _unpack(spec, np.asarray(w, dtype=np.float64))
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"inputs shape {inputs.shape} does not match input_dim {spec.input_dim}")
    if spec.kind == "mlp-1-hidden":
        W1, b1, W2, b2 = params
        return _activate(spec, inputs @ W1 + b1) @ W2 + b2
    W, b = params
    return inputs @ W + b


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def check_targets(spec: ModelSpec, targets: np.ndarray) -> None:
    if spec.is_classifier:
        t = np.asarray(targets)
        if t.min() < 0 or t.max() >= spec.num_classes:
            raise InvalidSpec(f"class index out of range [0, {spec.num_classes})")


def loss(spec: ModelSpec, w: ParamVector, batch: Batch) -> float:
    """Mean per-example loss of ``w`` on ``batch``."""
    check_targets(spec, batch.targets)
    out = outputs(spec, w, batch.inputs)
    if not spec.is_classifier:
        resid = out[:, 0] - batch.targets
        return float(np.mean(resid * resid))
    logp = _log_softmax(out)
    idx = np.asarray(batch.targets, dtype=np.intp)
    return float(-np.mean(logp[np.arange(batch.batch_size), idx]))


def loss_and_grad(spec: ModelSpec, w: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    """Mean batch loss and its gradient with respect to the flat parameters."""
    check_targets(spec, batch.targets)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (param_dim(spec),):
        raise DimensionMismatch(f"parameter dim {w.shape} does not match spec dim {param_dim(spec)}")
    if batch.inputs.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"inputs shape {batch.inputs.shape} does not match input_dim {spec.input_dim}")
    value, grad = raw_loss_and_grad(spec, w, batch.inputs, batch.targets)
    return value, as_vector(grad)


def raw_loss_and_grad(spec: ModelSpec, w: np.ndarray, X: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Unchecked kernel behind ``loss_and_grad``; callers validate shapes once up front."""
    n = X.shape[0]
    D, K, H = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "mlp-1-hidden":
        W1 = w[: D * H].reshape(D, H)
        b1 = w[D * H : D * H + H]
        o = D * H + H
        W2 = w[o : o + H * K].reshape(H, K)
        b2 = w[o + H * K :]
        z = X @ W1 + b1
        h = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
        out = h @ W2 + b2
    else:
        W = w[: D * K].reshape(D, K)
        out = X @ W + w[D * K :]

    if spec.is_classifier:
        shifted = out - out.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        total = e.sum(axis=1, keepdims=True)
        rows = np.arange(n)
        value = float(np.log(total[:, 0]).sum() - shifted[rows, targets].sum()) / n
        d_out = e / total
        d_out[rows, targets] -= 1.0
        d_out /= n
    else:
        resid = out[:, 0] - targets
        value = float(resid @ resid) / n
        d_out = (2.0 / n) * resid[:, None]

    grad = np.empty_like(w)
    if spec.kind == "mlp-1-hidden":
        o = D * H + H
        grad[o : o + H * K] = (h.T @ d_out).ravel()
        grad[o + H * K :] = d_out.sum(axis=0)
        dh = d_out @ W2.T
        dz = dh * (z > 0.0) if spec.activation == "relu" else dh * (1.0 - h * h)
        grad[: D * H] = (X.T @ dz).ravel()
        grad[D * H : o] = dz.sum(axis=0)
    else:
        grad[: D * K] = (X.T @ d_out).ravel()
        grad[D * K :] = d_out.sum(axis=0)
    return value, grad


def predict(spec: ModelSpec, w: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Argmax class per row; ``np.argmax`` breaks ties toward the lowest index."""
    if not spec.is_classifier:
        raise NotClassification(f"{spec.kind} has no class predictions")
    return np.argmax(outputs(spec, w, inputs), axis=1)


def count_correct(spec: ModelSpec, w: ParamVector, inputs: np.ndarray, targets: Sequence[int]) -> int:
    return int(np.sum(predict(spec, w, inputs) == np.asarray(targets)))


def accuracy(spec: ModelSpec, w: ParamVector, dataset) -> float:
    """Fraction of test examples classified correctly.

    ``dataset`` may be a ``ClientDataset`` (its test split is scored) or a
    ``Split``/``Batch``-like object with ``inputs`` and ``targets``.
    """
    if not spec.is_classifier:
        raise NotClassification(f"accuracy is undefined for {spec.kind}")
    split = getattr(dataset, "test", dataset)
    n = len(split.targets)
    if n == 0:
        return 0.0
    return count_correct(spec, w, split.inputs, split.targets) / n
