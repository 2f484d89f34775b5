"""Client optimizers (CLIENTOPT) and server optimizers on the pseudo-gradient (SERVEROPT).

All three kinds share one state layout. Updates, with ``g`` the gradient (or
the aggregated local change on the server) and ``lr`` the learning rate:

* ``sgd``:          w <- w - lr * g
* ``sgd-momentum``: v <- beta * v + g;  w <- w - lr * v
* ``adam-like``:    m <- b1 m + (1-b1) g;  s <- b2 s + (1-b2) g^2;
                    w <- w - lr * m_hat / (sqrt(s_hat) + eps)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidSpec
from .tensor import ParamVector, as_vector

OPT_KINDS = ("sgd", "sgd-momentum", "adam-like")


@dataclass(frozen=True)
class ClientOptimizerSpec:
    kind: str = "sgd"
    learning_rate: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        _validate(self)


@dataclass(frozen=True)
class ServerOptimizerSpec:
    kind: str = "sgd-momentum"
    learning_rate: float = 1.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        _validate(self)


def _validate(spec) -> None:
    if spec.kind not in OPT_KINDS:
        raise InvalidSpec(f"unknown optimizer kind {spec.kind!r}")
    if not spec.learning_rate > 0:
        raise InvalidSpec("learning_rate must be positive")
    for name in ("momentum", "beta1", "beta2"):
        value = getattr(spec, name)
        if not 0.0 <= value < 1.0:
            raise InvalidSpec(f"{name} must lie in [0, 1), got {value}")
    if not spec.epsilon > 0:
        raise InvalidSpec("epsilon must be positive")


@dataclass(frozen=True)
class OptState:
    """Optimizer memory. ``first``/``second`` stay ``None`` until first use."""

    spec: ClientOptimizerSpec | ServerOptimizerSpec
    step: int = 0
    first: np.ndarray | None = None
    second: np.ndarray | None = None


def init_state(spec: ClientOptimizerSpec | ServerOptimizerSpec) -> OptState:
    return OptState(spec=spec)


def raw_step(spec, state: OptState, w: np.ndarray, g: np.ndarray) -> tuple[OptState, np.ndarray]:
    """Unchecked update; returns a plain array that may be non-finite."""
    lr = spec.learning_rate
    if spec.kind == "sgd":
        return OptState(state.spec, state.step + 1), w - lr * g
    if spec.kind == "sgd-momentum":
        v = g.copy() if state.first is None else spec.momentum * state.first + g
        return OptState(state.spec, state.step + 1, v), w - lr * v

    step = state.step + 1
    m_prev = np.zeros_like(g) if state.first is None else state.first
    s_prev = np.zeros_like(g) if state.second is None else state.second
    m = spec.beta1 * m_prev + (1.0 - spec.beta1) * g
    s = spec.beta2 * s_prev + (1.0 - spec.beta2) * (g * g)
    m_hat = m / (1.0 - spec.beta1**step)
    s_hat = s / (1.0 - spec.beta2**step)
    new_w = w - lr * m_hat / (np.sqrt(s_hat) + spec.epsilon)
    return OptState(spec=state.spec, step=step, first=m, second=s), new_w


def _apply(spec, state: OptState, w: np.ndarray, g: np.ndarray) -> tuple[OptState, ParamVector]:
    if w.shape != g.shape:
        raise DimensionMismatch(f"parameter dim {w.shape} != gradient dim {g.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        new_state, new_w = raw_step(spec, state, w, g)
    return new_state, as_vector(new_w)


def client_step(state: OptState, w: ParamVector, grad: ParamVector) -> tuple[OptState, ParamVector]:
    """One local descent step on the client's (possibly proximal) objective."""
    return _apply(state.spec, state, np.asarray(w), np.asarray(grad))


def server_step(
    state: OptState | None,
    w: ParamVector,
    pseudo_grad: ParamVector,
    spec: ServerOptimizerSpec,
) -> tuple[OptState, ParamVector]:
    """Apply the aggregated local change as a descent direction on the global model.

    ``pseudo_grad`` is the positive aggregate ``sum_i p_i * delta_i``; with the
    ``sgd`` kind this is ``w - lr * pseudo_grad``.
    """
    if state is None:
        state = init_state(spec)
    return _apply(spec, state, np.asarray(w), np.asarray(pseudo_grad))
