"""
Tests for the dense classifier.

Tests:
1. He initialization statistics and determinism
2. Forward pass and loss values
3. Analytic gradients against central finite differences
4. Adam against a scalar reference rollout
5. Thresholding, mini-batch training and checkpoint round trip
"""

import math
import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from conftest import blobs
from src.checkpoint import load_checkpoint, save_checkpoint
from src.nn import (
    _forward_cache,
    adam_step,
    backward,
    bce_loss,
    forward,
    init_adam,
    init_model,
    predict,
    train_epochs,
)
from src.structures import AdamState, Architecture, Gradients, ModelParams


def _passthrough(offset: float = 10.0) -> ModelParams:
    """1 -> 1 -> 1 net whose output logit equals the input (for inputs > -offset)."""
    return ModelParams(
        weights=[np.array([[1.0]]), np.array([[1.0]])],
        biases=[np.array([offset]), np.array([-offset])],
    )


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def test_init_deterministic_per_seed(small_arch):
    a = init_model(small_arch, seed=7)
    b = init_model(small_arch, seed=7)
    assert a.equals(b)
    assert not a.equals(init_model(small_arch, seed=8))


def test_init_biases_zero_and_shapes(small_arch):
    params = init_model(small_arch, seed=0)
    assert [w.shape for w in params.weights] == [(4, 6), (6, 3), (3, 1)]
    assert all(np.all(b == 0.0) for b in params.biases)


def test_init_he_stddev():
    params = init_model(Architecture(input_dim=200, hidden_units=(50,)), seed=1)
    assert params.weights[0].size == 10000
    assert abs(params.weights[0].std() - 0.1) < 0.005


def test_init_he_variance_per_layer():
    arch = Architecture(input_dim=100, hidden_units=(80, 40))
    params = init_model(arch, seed=2)
    for w, (fan_in, _) in zip(params.weights[:2], arch.layer_shapes()[:2]):
        assert abs(w.var() / (2.0 / fan_in) - 1.0) < 0.10


def test_architecture_requires_hidden_layers():
    with pytest.raises(ValueError):
        Architecture(input_dim=3, hidden_units=())


# ---------------------------------------------------------------------------
# Forward and loss
# ---------------------------------------------------------------------------


def test_forward_all_zero_params_gives_half(small_arch):
    params = init_model(small_arch, seed=0)
    zeros = ModelParams(
        weights=[np.zeros_like(w) for w in params.weights], biases=[np.zeros_like(b) for b in params.biases]
    )
    probs = forward(zeros, np.random.default_rng(0).normal(size=(5, 4)))
    assert probs.shape == (5,)
    assert np.all(probs == 0.5)


def test_forward_output_bias_ten():
    params = ModelParams(
        weights=[np.eye(2), np.zeros((2, 1))],
        biases=[np.zeros(2), np.array([10.0])],
    )
    assert forward(params, np.array([[0.3, -2.0]]))[0] == pytest.approx(0.9999546, abs=1e-7)


def test_forward_relu_negative_branch():
    params = ModelParams(weights=[np.array([[1.0]]), np.array([[1.0]])], biases=[np.array([-3.0]), np.zeros(1)])
    activations, pre = _forward_cache(params, np.array([[0.0]]))
    assert pre[0][0, 0] == -3.0
    assert activations[1][0, 0] == 0.0
    assert forward(params, np.array([[0.0]]))[0] == 0.5


def test_forward_shape_mismatch(small_arch):
    with pytest.raises(ValueError):
        forward(init_model(small_arch, seed=0), np.zeros((3, 5)))


def test_forward_probabilities_inside_unit_interval(small_arch):
    probs = forward(init_model(small_arch, seed=3), np.random.default_rng(1).normal(size=(50, 4)))
    assert np.all((probs > 0.0) & (probs < 1.0))


def test_forward_saturated_logits_stay_inside_unit_interval():
    params = _passthrough(offset=100.0)
    probs = forward(params, np.array([[40.0], [0.0], [-40.0], [90.0]]))
    assert np.all((probs > 0.0) & (probs < 1.0))
    assert probs[1] == pytest.approx(0.5)
    assert probs[3] == np.nextafter(1.0, 0.0)
    assert predict(params, np.array([[40.0], [-40.0]])).tolist() == [1, 0]


@pytest.mark.parametrize(
    "prob,label,expected",
    [(1.0, 1, 0.0), (0.5, 1, math.log(2.0)), (0.25, 1, math.log(4.0)), (0.25, 0, -math.log(0.75))],
)
def test_bce_values(prob, label, expected):
    assert bce_loss(np.array([prob]), np.array([label])) == pytest.approx(expected, abs=1e-6)


def test_bce_length_mismatch():
    with pytest.raises(ValueError):
        bce_loss(np.array([0.5, 0.5]), np.array([1]))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def _relu_pattern(params: ModelParams, batch: np.ndarray):
    _, pre = _forward_cache(params, batch)
    return [z > 0 for z in pre[:-1]]


def _gradient_errors(params: ModelParams, batch: np.ndarray, labels: np.ndarray, h: float = 1e-5) -> float:
    """Largest entry-wise relative error; entries whose perturbation crosses a ReLU kink are skipped."""
    analytic = backward(params, batch, labels)
    base_pattern = _relu_pattern(params, batch)
    worst = 0.0
    for kind in ("weights", "biases"):
        for layer in range(params.n_layers):
            target = getattr(params, kind)[layer]
            grad = getattr(analytic, kind)[layer]
            for idx in np.ndindex(target.shape):
                original = target[idx]
                target[idx] = original + h
                plus_pattern = _relu_pattern(params, batch)
                loss_plus = bce_loss(forward(params, batch), labels)
                target[idx] = original - h
                minus_pattern = _relu_pattern(params, batch)
                loss_minus = bce_loss(forward(params, batch), labels)
                target[idx] = original
                crosses = any(
                    not (np.array_equal(a, b) and np.array_equal(a, c))
                    for a, b, c in zip(base_pattern, plus_pattern, minus_pattern)
                )
                if crosses:
                    continue
                numeric = (loss_plus - loss_minus) / (2 * h)
                error = abs(grad[idx] - numeric) / max(abs(grad[idx]) + abs(numeric), 1e-5)
                worst = max(worst, error)
    return worst


def test_gradients_match_finite_differences_on_random_nets():
    rng = np.random.default_rng(2024)
    for net in range(20):
        depth = int(rng.integers(1, 4))
        arch = Architecture(
            input_dim=int(rng.integers(1, 9)),
            hidden_units=tuple(int(u) for u in rng.integers(1, 11, size=depth)),
        )
        params = init_model(arch, seed=net)
        for b in params.biases:
            b[:] = rng.normal(0.0, 0.1, size=b.shape)
        batch = rng.normal(size=(8, arch.input_dim))
        labels = rng.integers(0, 2, size=8).astype(np.float64)
        assert _gradient_errors(params, batch, labels) < 1e-4, f"net {net}: {arch}"


def test_gradients_invariant_to_duplicated_rows(small_arch):
    rng = np.random.default_rng(5)
    params = init_model(small_arch, seed=5)
    batch = rng.normal(size=(6, 4))
    labels = rng.integers(0, 2, size=6)
    single = backward(params, batch, labels)
    doubled = backward(params, np.vstack([batch, batch]), np.concatenate([labels, labels]))
    for a, b in zip(single.arrays(), doubled.arrays()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_output_bias_gradient_zero_at_half_with_balanced_labels(small_arch):
    params = init_model(small_arch, seed=1)
    params.weights[-1][:] = 0.0
    batch = np.random.default_rng(0).normal(size=(4, 4))
    grads = backward(params, batch, np.array([0, 1, 0, 1]))
    assert grads.biases[-1][0] == 0.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def _scalar(theta: float, grad: float) -> tuple:
    params = ModelParams(weights=[np.array([[theta]]), np.array([[0.0]])], biases=[np.zeros(1), np.zeros(1)])
    grads = Gradients(weights=[np.array([[grad]]), np.array([[0.0]])], biases=[np.zeros(1), np.zeros(1)])
    return params, grads


def test_adam_first_step_scalar():
    params, grads = _scalar(0.0, 1.0)
    state, updated = adam_step(init_adam(params), params, grads)
    assert state.t == 1
    assert updated.weights[0][0, 0] == pytest.approx(-0.001 / (1.0 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_fixed_point():
    params, grads = _scalar(0.37, 0.0)
    _, updated = adam_step(init_adam(params), params, grads)
    assert updated.equals(params)


def test_adam_rejects_non_finite_gradients():
    params, grads = _scalar(0.0, float("nan"))
    with pytest.raises(ValueError, match="non-finite"):
        adam_step(init_adam(params), params, grads)


def test_adam_rejects_bad_hyperparameters(small_arch):
    with pytest.raises(ValueError):
        init_adam(init_model(small_arch, seed=0), beta1=1.0)


def _scalar_adam_rollout(theta, grads, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta


def test_adam_two_constant_steps_match_scalar_rollout():
    params, grads = _scalar(0.5, 1.0)
    state = init_adam(params)
    for _ in range(2):
        state, params = adam_step(state, params, grads)
    assert abs(params.weights[0][0, 0] - _scalar_adam_rollout(0.5, [1.0, 1.0])) < 1e-12


def test_adam_matches_scalar_rollout_over_100_steps(small_arch):
    rng = np.random.default_rng(11)
    params = init_model(small_arch, seed=11)
    start = params.copy()
    history = []
    state = init_adam(params)
    for _ in range(100):
        grads = Gradients(
            weights=[rng.normal(size=w.shape) for w in params.weights],
            biases=[rng.normal(size=b.shape) for b in params.biases],
        )
        history.append(grads)
        state, params = adam_step(state, params, grads)

    assert isinstance(state, AdamState) and state.t == 100
    assert all(np.all(v >= 0) for v in state.v_weights + state.v_biases)
    for slot, (initial, final) in enumerate(zip(start.arrays(), params.arrays())):
        for idx in np.ndindex(initial.shape):
            expected = _scalar_adam_rollout(float(initial[idx]), [float(g.arrays()[slot][idx]) for g in history])
            assert abs(final[idx] - expected) < 1e-12


# ---------------------------------------------------------------------------
# Prediction and training
# ---------------------------------------------------------------------------


def test_predict_threshold_half():
    params = _passthrough()
    logits = np.array([[math.log(0.4 / 0.6)], [math.log(0.6 / 0.4)]])
    assert predict(params, logits, 0.5).tolist() == [0, 1]


def test_predict_tie_goes_to_anomaly():
    assert predict(_passthrough(), np.array([[0.0]]), 0.5).tolist() == [1]


def test_predict_high_threshold():
    assert predict(_passthrough(), np.array([[math.log(0.6 / 0.4)]]), 0.9).tolist() == [0]


def test_predict_rejects_threshold_outside_unit_interval():
    with pytest.raises(ValueError):
        predict(_passthrough(), np.array([[0.0]]), 1.0)


def test_train_epochs_reduces_loss_on_separable_data():
    features, labels = blobs(200, 2, seed=0, shift=3.0)
    params = init_model(Architecture(input_dim=2, hidden_units=(8,)), seed=0)
    initial = bce_loss(forward(params, features), labels)
    trained, opt, _ = train_epochs(params, (features, labels), epochs=32, batch_size=32, seed=0)
    assert opt.t == 32 * 7
    assert bce_loss(forward(trained, features), labels) < initial


@pytest.mark.parametrize("seed", range(5))
def test_two_hundred_full_batch_steps_reduce_loss(seed):
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(32, 4))
    labels = rng.integers(0, 2, size=32)
    params = init_model(Architecture(input_dim=4, hidden_units=(10, 5)), seed=seed)
    initial = bce_loss(forward(params, features), labels)
    trained, _, _ = train_epochs(params, (features, labels), epochs=200, batch_size=32, seed=seed)
    assert bce_loss(forward(trained, features), labels) < initial


def test_train_epochs_deterministic(small_arch):
    features, labels = blobs(64, 4, seed=1)
    params = init_model(small_arch, seed=1)
    a, _, loss_a = train_epochs(params, (features, labels), epochs=3, batch_size=10, seed=4)
    b, _, loss_b = train_epochs(params, (features, labels), epochs=3, batch_size=10, seed=4)
    assert a.equals(b)
    assert loss_a == loss_b


def test_train_epochs_does_not_modify_input(small_arch):
    features, labels = blobs(20, 4, seed=1)
    params = init_model(small_arch, seed=1)
    snapshot = params.copy()
    train_epochs(params, (features, labels), epochs=1)
    assert params.equals(snapshot)


def test_train_epochs_rejects_zero_epochs_and_empty_data(small_arch):
    params = init_model(small_arch, seed=0)
    with pytest.raises(ValueError):
        train_epochs(params, (np.zeros((4, 4)), np.zeros(4)), epochs=0)
    with pytest.raises(ValueError):
        train_epochs(params, (np.zeros((0, 4)), np.zeros(0)), epochs=1)


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, small_arch):
    params = init_model(small_arch, seed=9)
    path = save_checkpoint(params, tmp_path / "model.npz")
    loaded = load_checkpoint(path)
    assert loaded.equals(params)
    assert loaded.architecture == small_arch


def test_checkpoint_rejects_unknown_version(tmp_path, small_arch):
    params = init_model(small_arch, seed=9)
    path = tmp_path / "model.npz"
    arrays = {"format_version": np.int64(99), "input_dim": np.int64(4), "hidden_units": np.array([6, 3])}
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{layer}"] = w
        arrays[f"b{layer}"] = b
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="format_version"):
        load_checkpoint(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.npz")
