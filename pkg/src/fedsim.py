"""
In-process FedAvg simulation and the centralized baseline.

Each communication round:
1. The server samples max(1, round(M * Fr)) clients without replacement
2. Every selected client trains a copy of the global model for E local epochs
   with a fresh Adam state (only weights travel back to the server)
3. The server averages the returned weights, weighted by sample count, in
   client-id order
4. The new global model is evaluated on the central test split

Randomness is derived from integer seed tuples so a run is a pure function of
(data, architecture, config): (seed, round) drives selection and
(seed, round, client_id) drives a client's mini-batch shuffling.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .config import ConvergenceConfig, FLConfig, selected_count
from .metrics import metrics_bundle
from .nn import bce_loss, forward, init_adam, init_model, run_epoch
from .structures import (
    Architecture,
    ClientPartition,
    ClientUpdate,
    MetricsBundle,
    ModelParams,
    PreparedDataset,
    RoundLog,
    RunReport,
)

ProgressCallback = Callable[[Dict[str, Any]], None]


def select_clients(n_clients: int, fraction_fit: float, seed: int, round_index: int = 0) -> List[int]:
    """Uniform sample of max(1, round(M * Fr)) distinct client ids, sorted."""
    count = selected_count(n_clients, fraction_fit)
    rng = np.random.default_rng([seed, round_index])
    chosen = rng.choice(n_clients, size=count, replace=False)
    return sorted(int(c) for c in chosen)


def client_update(
    global_params: ModelParams,
    partition: ClientPartition,
    local_epochs: int,
    batch_size: int,
    seed: int | Sequence[int],
    learning_rate: float = 0.001,
) -> ClientUpdate:
    """
    Train a copy of the global model on one client's partition.

    The Adam state starts fresh and is discarded afterwards; global_params is
    never modified.

    Raises:
        ValueError: If the partition is empty or local_epochs < 1
    """
    if partition.sample_count == 0:
        raise ValueError(f"client {partition.client_id} has an empty partition")
    if local_epochs < 1:
        raise ValueError(f"local_epochs must be >= 1, got {local_epochs}")

    rng = np.random.default_rng(seed)
    params = global_params.copy()
    opt = init_adam(params, learning_rate=learning_rate)
    loss = float("nan")
    for _ in range(local_epochs):
        params, opt, loss = run_epoch(params, partition.features, partition.labels, batch_size, opt, rng)

    logger.debug(
        f"client {partition.client_id}: {local_epochs} epoch(s) on {partition.sample_count} samples, loss={loss:.6f}"
    )
    return ClientUpdate(
        client_id=partition.client_id,
        updated_params=params,
        sample_count=partition.sample_count,
        final_loss=loss,
    )


def aggregate_fedavg(updates: List[ClientUpdate]) -> ModelParams:
    """
    Sample-count weighted mean of client parameters.

    Computed as w_ref + sum_k (n_k / N) (w_k - w_ref) over updates sorted by
    client id, with w_ref the first of them, then clipped to the per-coordinate
    hull of the inputs. With equal counts this is the plain mean of the weights.

    Raises:
        ValueError: On an empty list, non-positive counts or shape mismatch
    """
    if not updates:
        raise ValueError("aggregate_fedavg needs at least one client update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    reference = ordered[0].updated_params
    for update in ordered[1:]:
        if not update.updated_params.same_shapes(reference):
            raise ValueError(
                f"client {update.client_id} returned parameters shaped differently from client "
                f"{ordered[0].client_id}"
            )
    if any(u.sample_count <= 0 for u in ordered):
        raise ValueError("client sample counts must be positive")

    total = float(sum(u.sample_count for u in ordered))
    coefficients = [u.sample_count / total for u in ordered]

    merged = []
    for position, ref in enumerate(reference.arrays()):
        stacked = np.stack([u.updated_params.arrays()[position] for u in ordered])
        acc = ref.copy()
        for coeff, values in zip(coefficients, stacked):
            acc += coeff * (values - ref)
        merged.append(np.clip(acc, stacked.min(axis=0), stacked.max(axis=0)))

    return ModelParams(weights=merged[0::2], biases=merged[1::2])


def evaluate(params: ModelParams, test: PreparedDataset, threshold: float = 0.5) -> MetricsBundle:
    """Evaluate a model on the central test split."""
    probs = forward(params, test.features)
    return metrics_bundle(probs, test.labels, bce_loss(probs, test.labels), threshold)


class ConvergenceTracker:
    """Decides when a run stops and which round counts as converged."""

    def __init__(self, config: ConvergenceConfig, max_rounds: int):
        self.config = config
        self.max_rounds = max_rounds
        self.best: Optional[float] = None
        self.last_improving = 0
        self.stale = 0
        self.stop_reason = ""
        self.rounds_to_convergence = max_rounds
        self.converged = False

    def _targets_met(self, metrics: MetricsBundle) -> bool:
        targets = self.config.target_metrics
        if not targets:
            return False
        for name, threshold in targets.items():
            value = metrics.value(name)
            if name == "loss" and value > threshold:
                return False
            if name != "loss" and value < threshold:
                return False
        return True

    def update(self, round_index: int, metrics: MetricsBundle) -> bool:
        """Record a round; return True when the run should stop."""
        mode = self.config.mode
        if mode == "fixed":
            if round_index >= self.max_rounds:
                self._finish(round_index, "max_rounds", True)
                return True
            return False

        if self._targets_met(metrics):
            self._finish(round_index, "target", True)
            return True

        if mode == "early_stopping":
            value = metrics.value(self.config.metric)
            if self.best is None:
                improved = True
            elif self.config.metric == "loss":
                improved = value < self.best - self.config.min_delta
            else:
                improved = value > self.best + self.config.min_delta
            if improved:
                self.best = value
                self.last_improving = round_index
                self.stale = 0
            else:
                self.stale += 1
            if self.stale >= self.config.patience:
                self._finish(self.last_improving, "early_stopping", True)
                return True
            if round_index >= self.max_rounds:
                self._finish(self.last_improving, "max_rounds", False)
                return True
            return False

        if round_index >= self.max_rounds:
            self._finish(self.max_rounds, "max_rounds", False)
            return True
        return False

    def _finish(self, rounds: int, reason: str, converged: bool) -> None:
        self.rounds_to_convergence = rounds
        self.stop_reason = reason
        self.converged = converged


def _notify(callback: Optional[ProgressCallback], payload: Dict[str, Any]) -> None:
    if callback is not None:
        callback(payload)


def run_federated(
    partitions: List[ClientPartition],
    test: PreparedDataset,
    arch: Architecture,
    cfg: FLConfig,
    threshold: float = 0.5,
    workers: int = 1,
    callback: Optional[ProgressCallback] = None,
) -> RunReport:
    """
    Run FedAvg until convergence or cfg.max_rounds.

    Client updates within a round may run on `workers` threads; aggregation
    always consumes them in client-id order, so results do not depend on
    scheduling.

    Raises:
        ValueError: If the partitions do not match cfg.n_clients
    """
    if len(partitions) != cfg.n_clients:
        raise ValueError(f"config declares {cfg.n_clients} clients but {len(partitions)} partitions were given")
    by_id = {p.client_id: p for p in partitions}
    if sorted(by_id) != list(range(cfg.n_clients)):
        raise ValueError(f"partition client ids must be 0..{cfg.n_clients - 1}, got {sorted(by_id)}")
    if arch.input_dim != test.n_features:
        raise ValueError(f"architecture input_dim {arch.input_dim} != dataset width {test.n_features}")

    logger.info(
        f"Federated run: M={cfg.n_clients}, Fr={cfg.fraction_fit} ({cfg.clients_per_round} per round), "
        f"E={cfg.local_epochs}, R<={cfg.max_rounds}, batch={cfg.batch_size}, seed={cfg.seed}"
    )
    global_params = init_model(arch, cfg.seed)
    tracker = ConvergenceTracker(cfg.convergence, cfg.max_rounds)
    logs: List[RoundLog] = []

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for round_index in range(1, cfg.max_rounds + 1):
            started = time.perf_counter()
            selected = select_clients(cfg.n_clients, cfg.fraction_fit, cfg.seed, round_index)

            def _train(client_id: int, params: ModelParams = global_params, r: int = round_index) -> ClientUpdate:
                return client_update(
                    params,
                    by_id[client_id],
                    cfg.local_epochs,
                    cfg.batch_size,
                    seed=(cfg.seed, r, client_id),
                    learning_rate=cfg.learning_rate,
                )

            updates = list(pool.map(_train, selected))
            global_params = aggregate_fedavg(updates)
            client_loss = float(
                np.average([u.final_loss for u in updates], weights=[u.sample_count for u in updates])
            )
            metrics = evaluate(global_params, test, threshold)
            elapsed = time.perf_counter() - started

            logs.append(RoundLog(round_index, selected, metrics, elapsed))
            logger.info(
                f"Round {round_index}: clients={selected} acc={metrics.accuracy:.4f} "
                f"f1={metrics.f1:.4f} auc={metrics.auc:.4f} loss={metrics.loss:.4f} client_loss={client_loss:.4f} "
                f"({elapsed:.2f}s)"
            )
            _notify(
                callback,
                {"event": "round", "mode": "federated", "round": round_index, "clients": selected,
                 "client_loss": client_loss, "metrics": metrics.as_dict()},
            )
            if tracker.update(round_index, metrics):
                break

    if not tracker.converged:
        logger.warning(f"Federated run stopped at max_rounds={cfg.max_rounds} without converging")
    return RunReport(
        mode="federated",
        config=cfg.model_dump(mode="json"),
        rounds=logs,
        final_params=global_params,
        rounds_to_convergence=tracker.rounds_to_convergence,
        converged=tracker.converged,
        stop_reason=tracker.stop_reason,
    )


def centralized_seed(seed: int) -> Tuple[int, int, int]:
    """Shuffle stream of the centralized baseline: that of client 0 in round 1."""
    return (seed, 1, 0)


def run_centralized(
    train: PreparedDataset,
    test: PreparedDataset,
    arch: Architecture,
    epochs: int,
    batch_size: int,
    seed: int,
    learning_rate: float = 0.001,
    threshold: float = 0.5,
    convergence: Optional[ConvergenceConfig] = None,
    callback: Optional[ProgressCallback] = None,
) -> RunReport:
    """
    Single training loop over the full training set, evaluated after each epoch.

    Epochs are logged as rounds. The Adam state persists across epochs.

    Raises:
        ValueError: If epochs < 1 or the training set is empty
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if train.n_samples == 0:
        raise ValueError("cannot train on an empty training set")

    convergence = convergence or ConvergenceConfig(mode="fixed")
    logger.info(f"Centralized run: {train.n_samples} samples, epochs<={epochs}, batch={batch_size}, seed={seed}")

    params = init_model(arch, seed)
    opt = init_adam(params, learning_rate=learning_rate)
    rng = np.random.default_rng(centralized_seed(seed))
    tracker = ConvergenceTracker(convergence, epochs)
    logs: List[RoundLog] = []

    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        params, opt, _ = run_epoch(params, train.features, train.labels, batch_size, opt, rng)
        metrics = evaluate(params, test, threshold)
        elapsed = time.perf_counter() - started
        logs.append(RoundLog(epoch, [], metrics, elapsed))
        logger.info(
            f"Epoch {epoch}: acc={metrics.accuracy:.4f} f1={metrics.f1:.4f} "
            f"auc={metrics.auc:.4f} loss={metrics.loss:.4f} ({elapsed:.2f}s)"
        )
        _notify(callback, {"event": "round", "mode": "centralized", "round": epoch, "metrics": metrics.as_dict()})
        if tracker.update(epoch, metrics):
            break

    return RunReport(
        mode="centralized",
        config={
            "epochs": epochs,
            "batch_size": batch_size,
            "learning_rate": learning_rate,
            "seed": seed,
            "convergence": convergence.model_dump(mode="json"),
        },
        rounds=logs,
        final_params=params,
        rounds_to_convergence=tracker.rounds_to_convergence,
        converged=tracker.converged,
        stop_reason=tracker.stop_reason,
    )
