"""
Shapley-value explanations of the trained global model.

The value of a coalition S is the mean model output over a background set
when the features in S are taken from the explained instance and the others
from each background row (interventional expectation). Two estimators share
that definition:
- shap_exact enumerates all 2^d coalitions (d <= 15); it is the oracle
- shap_sampled averages marginal contributions over random feature orders
  and then restores efficiency by redistributing the residual

Explanations target the pre-threshold probability output.
"""

from concurrent.futures import ThreadPoolExecutor
from math import factorial
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from .structures import ShapMatrix, ShapVector

ModelFn = Callable[[np.ndarray], np.ndarray]

EXACT_MAX_FEATURES = 15
# Rows evaluated per model call when enumerating coalitions
_MAX_BATCH_ROWS = 200_000


def _as_inputs(instance: np.ndarray, background: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    instance = np.asarray(instance, dtype=np.float64).ravel()
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 2 or background.shape[0] == 0:
        raise ValueError(f"background must be a non-empty (k x d) matrix, got shape {background.shape}")
    if background.shape[1] != instance.shape[0]:
        raise ValueError(
            f"background width {background.shape[1]} does not match instance width {instance.shape[0]}"
        )
    return instance, background


def _model_output(model: ModelFn, instance: np.ndarray) -> float:
    return float(np.asarray(model(instance[None, :]), dtype=np.float64).ravel()[0])


def _masked_values(model: ModelFn, instance: np.ndarray, background: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """
    Coalition values for a block of boolean masks (n_masks x d).

    Every mask is expanded against the full background and evaluated in
    batches of at most _MAX_BATCH_ROWS rows.
    """
    k = background.shape[0]
    per_call = max(1, _MAX_BATCH_ROWS // k)
    values = np.empty(masks.shape[0])
    for start in range(0, masks.shape[0], per_call):
        block = masks[start : start + per_call]
        rows = np.where(block[:, None, :], instance[None, None, :], background[None, :, :])
        out = np.asarray(model(rows.reshape(-1, instance.shape[0])), dtype=np.float64).ravel()
        values[start : start + block.shape[0]] = out.reshape(block.shape[0], k).mean(axis=1)
    return values


def coalition_value(model: ModelFn, instance: np.ndarray, background: np.ndarray, subset: Iterable[int]) -> float:
    """
    v(S): mean model output with features in S fixed to the instance.

    v(empty) is the base value; v(all features) is the model output on the
    instance itself.

    Raises:
        ValueError: If a feature index lies outside 0..d-1 or shapes disagree
    """
    instance, background = _as_inputs(instance, background)
    d = instance.shape[0]
    members = sorted(set(int(i) for i in subset))
    if members and (members[0] < 0 or members[-1] >= d):
        raise ValueError(f"coalition {members} has indices outside 0..{d - 1}")
    if len(members) == d:
        return _model_output(model, instance)
    mask = np.zeros((1, d), dtype=bool)
    mask[0, members] = True
    return float(_masked_values(model, instance, background, mask)[0])


def _shapley_weights(d: int) -> np.ndarray:
    """w[s] = s! (d - s - 1)! / d! for coalition size s = 0 .. d-1."""
    total = factorial(d)
    return np.array([factorial(s) * factorial(d - s - 1) / total for s in range(d)])


def shap_exact(model: ModelFn, instance: np.ndarray, background: np.ndarray, instance_id: int = 0) -> ShapVector:
    """
    Exact Shapley values by enumerating every coalition.

    Args:
        model: Batch -> probability callable
        instance: Explained row (d,)
        background: Reference rows (k x d)
        instance_id: Identifier carried into the result

    Returns:
        ShapVector whose base + sum(phi) equals the model output to rounding

    Raises:
        ValueError: If d exceeds 15 features
    """
    instance, background = _as_inputs(instance, background)
    d = instance.shape[0]
    if d > EXACT_MAX_FEATURES:
        raise ValueError(
            f"exact Shapley enumeration needs 2^{d} coalitions; use sampled mode for d > {EXACT_MAX_FEATURES}"
        )

    codes = np.arange(1 << d, dtype=np.int64)
    bits = ((codes[:, None] >> np.arange(d)) & 1).astype(bool)
    values = _masked_values(model, instance, background, bits)
    output = _model_output(model, instance)

    sizes = bits.sum(axis=1)
    weights = _shapley_weights(d)
    phi = np.empty(d)
    for i in range(d):
        without = codes[~bits[:, i]]
        with_i = without | (1 << i)
        phi[i] = float(np.sum(weights[sizes[without]] * (values[with_i] - values[without])))

    return ShapVector(instance_id=instance_id, phi=phi, base_value=float(values[0]), model_output=output)


def _redistribute(phi: np.ndarray, residual: float) -> np.ndarray:
    """Spread the efficiency residual proportionally to |phi| (equally if all zero)."""
    magnitude = np.abs(phi)
    total = magnitude.sum()
    if total > 0:
        return phi + residual * magnitude / total
    return phi + residual / phi.shape[0]


def shap_sampled(
    model: ModelFn,
    instance: np.ndarray,
    background: np.ndarray,
    n_permutations: int,
    seed: int | Sequence[int],
    instance_id: int = 0,
) -> ShapVector:
    """
    Permutation-sampling Shapley estimate.

    Each sampled feature order adds features one at a time and credits each
    with the change in coalition value. The averaged contributions are then
    shifted so that base + sum(phi) equals the model output exactly; the
    result is flagged as adjusted when a shift was applied.

    Raises:
        ValueError: If n_permutations < 1
    """
    if n_permutations < 1:
        raise ValueError(f"n_permutations must be >= 1, got {n_permutations}")
    instance, background = _as_inputs(instance, background)
    d = instance.shape[0]
    rng = np.random.default_rng(seed)

    orders = np.stack([rng.permutation(d) for _ in range(n_permutations)])
    # masks[p, j] holds the coalition after adding the first j+1 features of order p
    ranks = np.empty_like(orders)
    ranks[np.arange(n_permutations)[:, None], orders] = np.arange(d)[None, :]
    masks = ranks[:, None, :] <= np.arange(d)[None, :, None]

    base = float(np.mean(np.asarray(model(background), dtype=np.float64)))
    output = _model_output(model, instance)
    values = _masked_values(model, instance, background, masks.reshape(-1, d)).reshape(n_permutations, d)
    values[:, -1] = output

    previous = np.concatenate([np.full((n_permutations, 1), base), values[:, :-1]], axis=1)
    contributions = values - previous
    phi = np.zeros(d)
    np.add.at(phi, orders.ravel(), contributions.ravel())
    phi /= n_permutations

    residual = output - base - float(phi.sum())
    adjusted = residual != 0.0
    if adjusted:
        phi = _redistribute(phi, residual)
    return ShapVector(instance_id=instance_id, phi=phi, base_value=base, model_output=output, adjusted=adjusted)


def global_importance(shap: ShapMatrix) -> List[Tuple[str, float]]:
    """Features by mean |phi|, descending; ties in alphabetical order."""
    if not shap.vectors:
        raise ValueError("cannot rank features of an empty ShapMatrix")
    means = np.mean(np.abs(shap.phi), axis=0)
    ranked = sorted(zip(shap.feature_names, (float(m) for m in means)), key=lambda item: (-item[1], item[0]))
    return ranked


def _normalize_columns(values: np.ndarray) -> np.ndarray:
    """Per-column min-max scaling to [0, 1]; constant columns become 0.5."""
    low = values.min(axis=0)
    span = values.max(axis=0) - low
    out = np.full(values.shape, 0.5)
    varying = span > 0
    out[:, varying] = (values[:, varying] - low[varying]) / span[varying]
    return out


def beeswarm_export(shap: ShapMatrix) -> pd.DataFrame:
    """
    One row per (instance, feature) for a beeswarm plot.

    Columns: feature, shap_value (signed), normalized_value (color axis in
    [0, 1]), instance_id. Features appear in global_importance order.
    """
    order = [name for name, _ in global_importance(shap)]
    position = {name: j for j, name in enumerate(shap.feature_names)}
    normalized = _normalize_columns(np.asarray(shap.feature_values, dtype=np.float64))
    phi = shap.phi
    ids = [vec.instance_id for vec in shap.vectors]

    records = []
    for name in order:
        j = position[name]
        for row, instance_id in enumerate(ids):
            records.append(
                {
                    "feature": name,
                    "shap_value": float(phi[row, j]),
                    "normalized_value": float(normalized[row, j]),
                    "instance_id": instance_id,
                }
            )
    return pd.DataFrame.from_records(records, columns=["feature", "shap_value", "normalized_value", "instance_id"])


def bar_export(shap: ShapMatrix) -> pd.DataFrame:
    """Columns: feature, mean_abs_shap, rank (1 = most important)."""
    ranked = global_importance(shap)
    return pd.DataFrame(
        {
            "feature": [name for name, _ in ranked],
            "mean_abs_shap": [value for _, value in ranked],
            "rank": list(range(1, len(ranked) + 1)),
        }
    )


def instances_export(shap: ShapMatrix) -> pd.DataFrame:
    """Columns: instance_id, base_value, model_output, shap_sum, adjusted (residual redistributed)."""
    return pd.DataFrame(
        {
            "instance_id": [vec.instance_id for vec in shap.vectors],
            "base_value": [vec.base_value for vec in shap.vectors],
            "model_output": [vec.model_output for vec in shap.vectors],
            "shap_sum": [float(vec.phi.sum()) for vec in shap.vectors],
            "adjusted": [bool(vec.adjusted) for vec in shap.vectors],
        }
    )


def sample_rows(n_rows: int, size: int, seed: int | Sequence[int]) -> np.ndarray:
    """Sorted uniform sample of min(size, n_rows) row indices without replacement."""
    if n_rows < 1:
        raise ValueError("cannot sample from zero rows")
    if size >= n_rows:
        return np.arange(n_rows)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_rows, size=size, replace=False))


def explain_model(
    model: ModelFn,
    instances: np.ndarray,
    background: np.ndarray,
    feature_names: List[str],
    instance_ids: Optional[Sequence[int]] = None,
    exact_max_features: int = 10,
    n_permutations: int = 64,
    seed: int = 0,
    workers: int = 1,
) -> ShapMatrix:
    """
    Explain a set of instances with one estimator chosen by feature count.

    Exact enumeration is used when d <= exact_max_features, permutation
    sampling otherwise (seeded per instance with (seed, instance_id)).
    Instances are independent and may be explained on `workers` threads;
    results keep the input order.

    Args:
        model: Batch -> probability callable (read-only during explanation)
        instances: Rows to explain (n x d)
        background: Reference rows (k x d)
        feature_names: d column names
        instance_ids: Identifiers for the rows (default 0..n-1)
        exact_max_features: Largest d explained exactly (<= 15)
        n_permutations: Orders sampled per instance in sampled mode
        seed: Base seed for sampled mode
        workers: Thread count

    Returns:
        ShapMatrix whose feature_values are the explained rows
    """
    instances = np.asarray(instances, dtype=np.float64)
    if instances.ndim != 2 or instances.shape[0] == 0:
        raise ValueError(f"instances must be a non-empty (n x d) matrix, got shape {instances.shape}")
    d = instances.shape[1]
    if len(feature_names) != d:
        raise ValueError(f"{len(feature_names)} feature names for {d} features")
    ids = list(instance_ids) if instance_ids is not None else list(range(instances.shape[0]))
    if len(ids) != instances.shape[0]:
        raise ValueError(f"{len(ids)} instance ids for {instances.shape[0]} instances")

    exact = d <= min(exact_max_features, EXACT_MAX_FEATURES)
    logger.info(
        f"Explaining {instances.shape[0]} instances x {d} features against {len(background)} background rows "
        f"({'exact' if exact else f'sampled, {n_permutations} permutations'})"
    )

    def _explain(row: int) -> ShapVector:
        if exact:
            return shap_exact(model, instances[row], background, instance_id=ids[row])
        return shap_sampled(
            model, instances[row], background, n_permutations, seed=(seed, ids[row]), instance_id=ids[row]
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        vectors = list(pool.map(_explain, range(instances.shape[0])))

    worst = max(abs(vec.efficiency_gap) for vec in vectors)
    logger.debug(f"Largest efficiency gap across explanations: {worst:.3e}")
    return ShapMatrix(vectors=vectors, feature_names=list(feature_names), feature_values=instances.copy())
