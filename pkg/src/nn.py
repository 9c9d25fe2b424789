"""
Dense feed-forward binary classifier with manual backpropagation.

Hidden layers use ReLU, the single output unit uses a sigmoid, the loss is
mean binary cross-entropy and parameters are updated with Adam. Weights are
He-initialized, biases start at zero. Everything runs in float64.
"""

from typing import Callable, List, Optional, Tuple

import numpy as np
from loguru import logger
from scipy.special import expit

from .structures import AdamState, Architecture, Gradients, ModelParams

# Probability clamp applied inside the loss before taking logs
LOSS_CLAMP = 1e-7
DEFAULT_BATCH_SIZE = 32
DEFAULT_THRESHOLD = 0.5
# Output probabilities stay strictly inside (0, 1) even for saturated logits
PROB_FLOOR = np.nextafter(0.0, 1.0)
PROB_CEIL = np.nextafter(1.0, 0.0)


def init_model(arch: Architecture, seed: int) -> ModelParams:
    """He initialization: W ~ Normal(0, sqrt(2 / fan_in)), b = 0."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in arch.layer_shapes():
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights=weights, biases=biases)


def _check_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"batch shape {batch.shape} does not match model input_dim {params.weights[0].shape[0]}"
        )
    return batch


def _forward_cache(params: ModelParams, batch: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Return (activations, pre-activations); activations[0] is the input."""
    activations = [batch]
    pre_activations = []
    last = params.n_layers - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = activations[-1] @ w + b
        pre_activations.append(z)
        activations.append(np.clip(expit(z), PROB_FLOOR, PROB_CEIL) if layer == last else np.maximum(0.0, z))
    return activations, pre_activations


def forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Per-row probability of class 1 (anomaly)."""
    batch = _check_batch(params, batch)
    activations, _ = _forward_cache(params, batch)
    return activations[-1][:, 0]


def model_fn(params: ModelParams) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap parameters as a batch -> probability callable (the form xai expects)."""
    return lambda batch: forward(params, batch)


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} differ in length")
    p = np.clip(probs, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    return float(np.mean(-(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))))


def backward(params: ModelParams, batch: np.ndarray, labels: np.ndarray) -> Gradients:
    """
    Analytic gradient of the mean BCE loss for every weight and bias.

    The output delta is (p - y) / n; the ReLU derivative at exactly 0 is 0.
    """
    batch = _check_batch(params, batch)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (batch.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch rows {batch.shape[0]}")

    activations, pre_activations = _forward_cache(params, batch)
    n = batch.shape[0]
    delta = (activations[-1] - labels[:, None]) / n

    grad_w: List[np.ndarray] = [np.empty(0)] * params.n_layers
    grad_b: List[np.ndarray] = [np.empty(0)] * params.n_layers
    for layer in range(params.n_layers - 1, -1, -1):
        grad_w[layer] = activations[layer].T @ delta
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer].T) * (pre_activations[layer - 1] > 0.0)
    return Gradients(weights=grad_w, biases=grad_b)


def init_adam(
    params: ModelParams,
    learning_rate: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamState:
    if learning_rate <= 0 or epsilon <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1):
        raise ValueError(
            f"invalid Adam hyperparameters lr={learning_rate}, beta1={beta1}, beta2={beta2}, eps={epsilon}"
        )
    return AdamState(
        m_weights=[np.zeros_like(w) for w in params.weights],
        m_biases=[np.zeros_like(b) for b in params.biases],
        v_weights=[np.zeros_like(w) for w in params.weights],
        v_biases=[np.zeros_like(b) for b in params.biases],
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def _adam_update(
    theta: np.ndarray, m: np.ndarray, v: np.ndarray, g: np.ndarray, state: AdamState, t: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    m_new = state.beta1 * m + (1.0 - state.beta1) * g
    v_new = state.beta2 * v + (1.0 - state.beta2) * (g * g)
    m_hat = m_new / (1.0 - state.beta1**t)
    v_hat = v_new / (1.0 - state.beta2**t)
    theta_new = theta - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return theta_new, m_new, v_new


def adam_step(state: AdamState, params: ModelParams, grads: Gradients) -> Tuple[AdamState, ModelParams]:
    """
    One Adam update; t is incremented before bias correction.

    Raises:
        ValueError: On shape disagreement or non-finite gradient entries
    """
    if len(grads.weights) != params.n_layers or any(
        g.shape != p.shape for g, p in zip(grads.arrays(), params.arrays())
    ):
        raise ValueError("gradient shapes do not match model parameters")
    if not all(np.all(np.isfinite(g)) for g in grads.arrays()):
        raise ValueError("non-finite gradient entries; training diverged")

    t = state.t + 1
    new_w, new_b = [], []
    m_w, m_b, v_w, v_b = [], [], [], []
    for layer in range(params.n_layers):
        w, mw, vw = _adam_update(
            params.weights[layer], state.m_weights[layer], state.v_weights[layer], grads.weights[layer], state, t
        )
        b, mb, vb = _adam_update(
            params.biases[layer], state.m_biases[layer], state.v_biases[layer], grads.biases[layer], state, t
        )
        new_w.append(w)
        new_b.append(b)
        m_w.append(mw)
        m_b.append(mb)
        v_w.append(vw)
        v_b.append(vb)

    new_state = AdamState(
        m_weights=m_w,
        m_biases=m_b,
        v_weights=v_w,
        v_biases=v_b,
        t=t,
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
    )
    return new_state, ModelParams(weights=new_w, biases=new_b)


def predict(params: ModelParams, batch: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Label 1 iff probability >= threshold (ties go to the anomaly class)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (forward(params, batch) >= threshold).astype(np.int64)


def run_epoch(
    params: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    batch_size: int,
    opt: AdamState,
    rng: np.random.Generator,
) -> Tuple[ModelParams, AdamState, float]:
    """One shuffled pass of mini-batch Adam; returns the sample-weighted mean batch loss."""
    n = features.shape[0]
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x, y = features[idx], labels[idx]
        total += bce_loss(forward(params, x), y) * idx.size
        grads = backward(params, x, y)
        opt, params = adam_step(opt, params, grads)
    return params, opt, total / n


def train_epochs(
    params: ModelParams,
    data: Tuple[np.ndarray, np.ndarray],
    epochs: int,
    batch_size: int = DEFAULT_BATCH_SIZE,
    opt: Optional[AdamState] = None,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[ModelParams, AdamState, float]:
    """
    Train for `epochs` passes over seeded-shuffled mini-batches.

    Args:
        params: Starting parameters (not modified)
        data: (features, labels)
        epochs: Number of passes, >= 1
        batch_size: Mini-batch size
        opt: Adam state carried across batches and epochs (fresh if None)
        seed: Shuffle seed, ignored when `rng` is given
        rng: Generator to continue an existing shuffle stream

    Returns:
        (trained params, Adam state, mean loss of the final epoch)

    Raises:
        ValueError: If epochs < 1, batch_size < 1 or the data is empty
    """
    features, labels = data
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if features.shape[0] == 0:
        raise ValueError("cannot train on empty data")
    if labels.shape != (features.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {features.shape[0]} rows")

    rng = rng if rng is not None else np.random.default_rng(seed)
    opt = opt if opt is not None else init_adam(params)
    params = params.copy()
    loss = float("nan")
    for epoch in range(epochs):
        params, opt, loss = run_epoch(params, features, labels, batch_size, opt, rng)
        logger.debug(f"epoch {epoch + 1}/{epochs}: loss={loss:.6f}")
    return params, opt, loss
