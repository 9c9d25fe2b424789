"""
Data models shared by the experiment engine.

This module defines the in-memory structures handed between pipeline stages:
- RawTable / TransformState / PreparedDataset / ClientPartition: tabular data
- Architecture / ModelParams / AdamState / Gradients: the dense classifier
- ClientUpdate / RoundLog / RunReport: federated and centralized runs
- ConfusionMatrix / ClassificationMetrics / MetricsBundle: evaluation
- ShapVector / ShapMatrix: Shapley explanations
- SweepRow / SweepTable: parameter sweeps
- ExperimentResult / SweepResult: what a pipeline run wrote
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np


# ---------------------------------------------------------------------------
# Tabular data
# ---------------------------------------------------------------------------


@dataclass
class RawTable:
    """Parsed CSV: text cells, with None marking a missing cell."""

    headers: List[str]
    rows: List[List[Optional[str]]]
    source: str = "<memory>"

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_cols(self) -> int:
        return len(self.headers)

    def column(self, name: str) -> List[Optional[str]]:
        idx = self.headers.index(name)
        return [row[idx] for row in self.rows]


@dataclass
class TransformState:
    """
    Everything needed to replay a fitted preprocessing pipeline.

    kept_columns lists the surviving raw feature columns in output order.
    Encoder state is keyed by raw column name; scaler statistics are per
    output feature, aligned with feature_names.
    """

    kept_columns: List[str]
    kinds: Dict[str, str]
    ordinal_maps: Dict[str, Dict[str, int]]
    onehot_categories: Dict[str, List[str]]
    boolean_true_values: List[str]
    feature_names: List[str]
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    label_column: str
    label_positive_values: List[str] = field(default_factory=list)
    label_negative_values: List[str] = field(default_factory=list)
    missing_values: List[str] = field(default_factory=list)

    def label_of(self, raw: Optional[str]) -> int:
        value = "" if raw is None else raw.strip()
        if self.label_positive_values:
            return int(value in self.label_positive_values)
        return int(value not in self.label_negative_values)


@dataclass
class PreparedDataset:
    """Encoded, standardized feature matrix with binary labels."""

    features: np.ndarray
    labels: np.ndarray
    feature_names: List[str]
    transform: TransformState

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: np.ndarray) -> "PreparedDataset":
        return PreparedDataset(
            features=self.features[indices],
            labels=self.labels[indices],
            feature_names=list(self.feature_names),
            transform=self.transform,
        )

    def class_counts(self) -> Dict[str, int]:
        anomalous = int(self.labels.sum())
        return {"normal": self.n_samples - anomalous, "anomalous": anomalous}


@dataclass
class ClientPartition:
    """One client's horizontal IID slice of the training set."""

    client_id: int
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    @property
    def sample_count(self) -> int:
        return int(self.labels.shape[0])


# ---------------------------------------------------------------------------
# Dense network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    """Dense binary classifier shape: input -> hidden ReLU layers -> 1 sigmoid unit."""

    input_dim: int
    hidden_units: Tuple[int, ...]
    output_dim: int = 1

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if not self.hidden_units:
            raise ValueError("Architecture needs at least one hidden layer")
        if any(units < 1 for units in self.hidden_units):
            raise ValueError(f"hidden_units must be positive, got {list(self.hidden_units)}")
        if self.output_dim != 1:
            raise ValueError("Only a single sigmoid output unit is supported")

    def layer_shapes(self) -> List[Tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_units, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ModelParams:
    """Weights (fan_in x fan_out) and biases (fan_out,) per layer, float64."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def architecture(self) -> Architecture:
        return Architecture(
            input_dim=int(self.weights[0].shape[0]),
            hidden_units=tuple(int(w.shape[1]) for w in self.weights[:-1]),
            output_dim=int(self.weights[-1].shape[1]),
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def arrays(self) -> List[np.ndarray]:
        """Flat view in layer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def same_shapes(self, other: "ModelParams") -> bool:
        if self.n_layers != other.n_layers:
            return False
        return all(a.shape == b.shape for a, b in zip(self.arrays(), other.arrays()))

    def equals(self, other: "ModelParams") -> bool:
        return self.same_shapes(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class Gradients:
    """Partial derivatives of the mean batch loss, shaped like ModelParams."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


@dataclass
class AdamState:
    """Adam moments and hyperparameters; t counts completed steps."""

    m_weights: List[np.ndarray]
    m_biases: List[np.ndarray]
    v_weights: List[np.ndarray]
    v_biases: List[np.ndarray]
    t: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def as_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: Tuple[str, ...] = ()

    @property
    def is_degenerate(self) -> bool:
        return bool(self.degenerate)


@dataclass(frozen=True)
class MetricsBundle:
    """Global test-set metrics for one evaluation of a model."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    loss: float
    confusion: ConfusionMatrix
    degenerate: Tuple[str, ...] = ()

    def as_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": self.auc,
            "loss": self.loss,
            **self.confusion.as_dict(),
        }

    def value(self, metric: str) -> float:
        return float(getattr(self, metric))


# ---------------------------------------------------------------------------
# Federated / centralized runs
# ---------------------------------------------------------------------------


@dataclass
class ClientUpdate:
    client_id: int
    updated_params: ModelParams
    sample_count: int
    final_loss: float = float("nan")


@dataclass
class RoundLog:
    """One communication round (or one centralized epoch)."""

    round_index: int
    selected_clients: List[int]
    metrics: MetricsBundle
    wall_time: float = 0.0

    def row(self) -> Dict[str, Any]:
        return {
            "round": self.round_index,
            "selected_clients": " ".join(str(c) for c in self.selected_clients),
            **self.metrics.as_dict(),
        }


@dataclass
class RunReport:
    mode: str
    config: Dict[str, Any]
    rounds: List[RoundLog]
    final_params: ModelParams
    rounds_to_convergence: int
    converged: bool
    stop_reason: str
    class_distribution: Dict[str, Any] = field(default_factory=dict)

    @property
    def final_metrics(self) -> MetricsBundle:
        return self.rounds[-1].metrics

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "config": self.config,
            "rounds_to_convergence": self.rounds_to_convergence,
            "rounds_run": len(self.rounds),
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "final_metrics": self.final_metrics.as_dict(),
            "class_distribution": self.class_distribution,
            "rounds": [log.row() for log in self.rounds],
        }


# ---------------------------------------------------------------------------
# Explanations
# ---------------------------------------------------------------------------


@dataclass
class ShapVector:
    instance_id: int
    phi: np.ndarray
    base_value: float
    model_output: float
    adjusted: bool = False

    @property
    def efficiency_gap(self) -> float:
        return float(self.model_output - self.base_value - self.phi.sum())


@dataclass
class ShapMatrix:
    """Shapley rows for an explanation set plus the raw values used for coloring."""

    vectors: List[ShapVector]
    feature_names: List[str]
    feature_values: np.ndarray

    def __post_init__(self):
        width = len(self.feature_names)
        for vec in self.vectors:
            if vec.phi.shape != (width,):
                raise ValueError(
                    f"ShapVector {vec.instance_id} has {vec.phi.shape} values, expected ({width},)"
                )
        if self.feature_values.shape != (len(self.vectors), width):
            raise ValueError(
                f"feature_values shape {self.feature_values.shape} does not match "
                f"({len(self.vectors)}, {width})"
            )

    @property
    def phi(self) -> np.ndarray:
        return np.vstack([vec.phi for vec in self.vectors])


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    axis_values: Dict[str, Any]
    seed: int
    run_id: str
    metrics: MetricsBundle
    rounds_to_convergence: int
    converged: bool


@dataclass
class SweepTable:
    axes: List[str]
    rows: List[SweepRow] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Pipeline results
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    """What one experiment (or checkpoint explanation) produced and where."""

    run_id: str
    run_dir: Path
    report: Optional[RunReport] = None
    centralized: Optional[RunReport] = None
    shap: Optional[ShapMatrix] = None
    files: List[Path] = field(default_factory=list)


@dataclass
class SweepResult:
    run_id: str
    run_dir: Path
    table: SweepTable
    files: List[Path] = field(default_factory=list)
