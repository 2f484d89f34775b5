import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlorar.datagen import Split
from fedlorar.errors import DimensionMismatch, InvalidSpec, NotClassification
from fedlorar.models import (
    Batch,
    ModelSpec,
    accuracy,
    init_params,
    loss,
    loss_and_grad,
    outputs,
    param_dim,
)
from fedlorar.tensor import as_vector, zeros

from .instances import instances
from .oracles import central_differences, max_relative_error, scalar_softmax_xent


def test_init_is_deterministic():
    spec = ModelSpec("mlp-1-hidden", input_dim=3, num_classes=2, hidden_dim=5)
    a, b = init_params(spec, 7), init_params(spec, 7)
    assert a.tobytes() == b.tobytes()
    assert init_params(spec, 8).tobytes() != a.tobytes()


def test_param_dims():
    assert init_params(ModelSpec("linear-regression", input_dim=3), 0).shape == (4,)
    # 2*4 + 4 + 4*3 + 3
    assert param_dim(ModelSpec("mlp-1-hidden", input_dim=2, hidden_dim=4, num_classes=3)) == 27
    assert param_dim(ModelSpec("logistic-regression", input_dim=5, num_classes=3)) == 18


def test_init_biases_zero_and_weights_he_scaled():
    spec = ModelSpec("mlp-1-hidden", input_dim=50, num_classes=4, hidden_dim=400)
    w = init_params(spec, 1)
    W1 = w[: 50 * 400]
    b1 = w[50 * 400 : 50 * 400 + 400]
    assert np.all(b1 == 0) and np.all(w[-4:] == 0)
    assert abs(W1.std() - math.sqrt(2 / 50)) < 0.01


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(kind="mlp-1-hidden", input_dim=2, num_classes=2, hidden_dim=0),
        dict(kind="linear-regression", input_dim=2, num_classes=3),
        dict(kind="logistic-regression", input_dim=2, num_classes=1),
        dict(kind="cnn", input_dim=2),
        dict(kind="mlp-1-hidden", input_dim=2, num_classes=2, hidden_dim=2, activation="gelu"),
    ],
)
def test_invalid_specs(kwargs):
    with pytest.raises(InvalidSpec):
        ModelSpec(**kwargs)


def test_zero_logistic_loss_is_ln2(rng):
    spec = ModelSpec("logistic-regression", input_dim=3, num_classes=2)
    batch = Batch(rng.normal(size=(5, 3)), rng.integers(0, 2, size=5))
    assert loss(spec, zeros(spec.dim), batch) == pytest.approx(math.log(2), abs=1e-15)


def test_regression_exact_fit_has_zero_loss_and_gradient(rng):
    spec = ModelSpec("linear-regression", input_dim=4)
    batch = Batch(rng.normal(size=(6, 4)), np.zeros(6))
    value, grad = loss_and_grad(spec, zeros(spec.dim), batch)
    assert value == 0.0
    assert np.all(grad == 0.0)


def test_logistic_loss_matches_scalar_oracle():
    spec = ModelSpec("logistic-regression", input_dim=2, num_classes=2)
    w = as_vector([0.1, -0.2, 0.3, 0.05, 0.01, -0.02])
    X = [[1.0, 2.0], [-0.5, 0.5]]
    y = [1, 0]
    expected = scalar_softmax_xent([[0.1, -0.2], [0.3, 0.05]], [0.01, -0.02], X, y)
    assert expected == pytest.approx(0.9412730487723341, abs=1e-15)
    assert loss(spec, w, Batch(np.array(X), np.array(y))) == pytest.approx(expected, rel=1e-14)


def test_loss_and_grad_value_matches_loss():
    for spec, w, batch in instances(30, seed=7):
        value, grad = loss_and_grad(spec, w, batch)
        assert value == pytest.approx(loss(spec, w, batch), rel=1e-12, abs=1e-15)
        assert grad.shape == w.shape


def test_gradient_matches_finite_differences():
    worst = 0.0
    for spec, w, batch in instances(100):
        _, grad = loss_and_grad(spec, w, batch)
        numeric = central_differences(lambda v: loss(spec, v, batch), w, step=1e-5)
        worst = max(worst, max_relative_error(grad, numeric))
    assert worst < 1e-4


def test_constant_shift_does_not_change_gradient(rng):
    spec, w, batch = instances(1, seed=3)[0]
    c = 3.7
    numeric = central_differences(lambda v: loss(spec, v, batch) + c, w)
    _, grad = loss_and_grad(spec, w, batch)
    assert max_relative_error(grad, numeric) < 1e-4


def test_dimension_mismatch(rng):
    spec = ModelSpec("logistic-regression", input_dim=3, num_classes=2)
    batch = Batch(rng.normal(size=(2, 3)), np.array([0, 1]))
    with pytest.raises(DimensionMismatch):
        loss(spec, zeros(spec.dim + 1), batch)
    with pytest.raises(DimensionMismatch):
        loss_and_grad(spec, zeros(spec.dim), Batch(rng.normal(size=(2, 4)), np.array([0, 1])))


def test_batch_validation():
    with pytest.raises(DimensionMismatch):
        Batch(np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(DimensionMismatch):
        Batch(np.zeros((2, 3)), np.zeros(3))


def test_class_index_out_of_range(rng):
    spec = ModelSpec("logistic-regression", input_dim=1, num_classes=2)
    with pytest.raises(InvalidSpec):
        loss(spec, zeros(spec.dim), Batch(np.ones((1, 1)), np.array([2])))


def test_loss_is_permutation_invariant():
    for spec, w, batch in instances(20, seed=11):
        perm = np.random.default_rng(0).permutation(batch.batch_size)
        shuffled = Batch(batch.inputs[perm], batch.targets[perm])
        assert loss(spec, w, shuffled) == pytest.approx(loss(spec, w, batch), rel=1e-12, abs=1e-15)


def test_cross_entropy_finite_for_huge_logits():
    spec = ModelSpec("logistic-regression", input_dim=1, num_classes=2)
    w = as_vector([1e6, -1e6, 0.0, 0.0])
    value = loss(spec, w, Batch(np.array([[5.0], [-5.0]]), np.array([1, 1])))
    assert math.isfinite(value) and value == pytest.approx(0.5 * 1e7, rel=1e-9)


# -- accuracy -------------------------------------------------------------

def test_accuracy_separable_oracle_fit():
    spec = ModelSpec("logistic-regression", input_dim=1, num_classes=2)
    X = np.array([[-3.0], [-1.0], [2.0], [4.0]])
    y = np.array([0, 0, 1, 1])
    w = as_vector([-1.0, 1.0, 0.0, 0.0])  # class-1 logit minus class-0 logit = 2x
    assert accuracy(spec, w, Split(X, y)) == 1.0


def test_zero_model_predicts_class_zero():
    spec = ModelSpec("mlp-1-hidden", input_dim=2, num_classes=2, hidden_dim=3)
    X = np.random.default_rng(0).normal(size=(10, 2))
    y = np.array([0, 1] * 5)
    assert accuracy(spec, zeros(spec.dim), Split(X, y)) == 0.5


def test_accuracy_hand_count():
    spec = ModelSpec("logistic-regression", input_dim=2, num_classes=3)
    # logits = x @ W with W = I-like: class 0 <- x0, class 1 <- x1, class 2 <- 0.5
    w = as_vector([1, 0, 0, 0, 1, 0, 0, 0, 0.5])
    X = np.array([[2.0, 0.0], [0.0, 2.0], [0.1, 0.2], [0.5, 0.5], [1.0, 1.0]])
    y = np.array([0, 1, 2, 2, 1])
    # predictions: 0, 1, 2, 0 (tie among 0.5s -> lowest index), 0 (tie 1,1 -> 0)
    assert accuracy(spec, w, Split(X, y)) == 3 / 5


def test_accuracy_rejects_regression():
    spec = ModelSpec("linear-regression", input_dim=1)
    with pytest.raises(NotClassification):
        accuracy(spec, zeros(spec.dim), Split(np.ones((1, 1)), np.zeros(1)))


@settings(max_examples=50)
@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 10_000))
def test_accuracy_invariant_to_logit_scaling(scale, seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec("logistic-regression", input_dim=3, num_classes=4)
    w = as_vector(rng.normal(size=spec.dim))
    split = Split(rng.normal(size=(25, 3)), rng.integers(0, 4, size=25))
    logits = outputs(spec, w, split.inputs)
    scaled_pred = np.argmax(scale * logits, axis=1)
    assert np.mean(scaled_pred == split.targets) == accuracy(spec, w, split)
    assert accuracy(spec, as_vector(scale * w), split) == accuracy(spec, w, split)
