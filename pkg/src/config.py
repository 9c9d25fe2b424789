"""
Declarative configuration models.

Every file the engine reads (dataset schemas, experiment and sweep configs) is
JSON validated by the pydantic models below. Validation collects every
offending field before failing, so a broken config is reported in one pass.

Environment defaults come from `.env` (python-dotenv):
- FEDIDS_LOG_LEVEL: loguru sink level (default INFO)
- FEDIDS_OUTPUT_DIR: default experiment output directory (default "runs")
- FEDIDS_WORKERS: threads used for client updates within a round (default 1)
"""

import json
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

load_dotenv()

LOG_LEVEL = os.getenv("FEDIDS_LOG_LEVEL", "INFO")
DEFAULT_OUTPUT_DIR = os.getenv("FEDIDS_OUTPUT_DIR", "runs")
DEFAULT_WORKERS = int(os.getenv("FEDIDS_WORKERS", "1"))

ColumnRole = Literal["feature", "label", "drop"]
ColumnKind = Literal["numeric", "boolean", "categorical_ordinal", "categorical_onehot"]

DEFAULT_TRUE_VALUES = ["1", "true", "True", "TRUE", "yes", "Yes", "t", "T"]
DEFAULT_MISSING_VALUES = ["", "NA", "N/A", "NaN", "nan", "null", "NULL", "None"]

# Hidden layer widths used for each dataset in the reference experiments
ARCHITECTURE_PRESETS: Dict[str, List[int]] = {
    "unsw_nb15": [150, 120, 90, 60, 30, 20, 10],
    "ton_iot": [60, 40, 30, 20, 10],
    "nsl_kdd": [80, 40, 30, 20, 10],
    "wustl_ehms": [10, 20, 40],
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# Dataset schema
# ---------------------------------------------------------------------------


class ColumnSpec(_Strict):
    name: str
    role: ColumnRole = "feature"
    kind: ColumnKind = "numeric"


class SchemaConfig(_Strict):
    """Columns, roles and encodings of one tabular dataset."""

    dataset_name: str
    columns: List[ColumnSpec]
    label_positive_values: List[str] = Field(default_factory=list)
    label_negative_values: List[str] = Field(default_factory=list)
    onehot_cardinality_limit: int = Field(default=64, ge=2)
    has_header: bool = True
    boolean_true_values: List[str] = Field(default_factory=lambda: list(DEFAULT_TRUE_VALUES))
    missing_values: List[str] = Field(default_factory=lambda: list(DEFAULT_MISSING_VALUES))

    @model_validator(mode="after")
    def _check_columns(self) -> "SchemaConfig":
        names = [c.name for c in self.columns]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"column names must be unique, duplicated: {duplicates}")
        labels = [c.name for c in self.columns if c.role == "label"]
        if len(labels) != 1:
            raise ValueError(f"exactly one column must have role 'label', found {len(labels)}: {labels}")
        if bool(self.label_positive_values) == bool(self.label_negative_values):
            raise ValueError(
                "set exactly one of label_positive_values (raw values mapped to 1) "
                "or label_negative_values (raw values mapped to 0)"
            )
        return self

    @property
    def column_names(self) -> List[str]:
        return [c.name for c in self.columns]

    @property
    def label_column(self) -> str:
        return next(c.name for c in self.columns if c.role == "label")

    @property
    def feature_columns(self) -> List[ColumnSpec]:
        return [c for c in self.columns if c.role == "feature"]

    @classmethod
    def from_file(cls, path: str | Path) -> "SchemaConfig":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Federated run
# ---------------------------------------------------------------------------


class ConvergenceConfig(_Strict):
    """
    When a run stops.

    fixed: run exactly max_rounds.
    early_stopping: stop once `metric` has not improved by min_delta for
        `patience` consecutive rounds; rounds_to_convergence is the last
        improving round.
    target: stop at the first round meeting every threshold in target_metrics.
    target_metrics are also honoured in early_stopping mode.
    """

    mode: Literal["fixed", "early_stopping", "target"] = "early_stopping"
    metric: Literal["accuracy", "loss"] = "accuracy"
    min_delta: float = Field(default=1e-4, ge=0.0)
    patience: int = Field(default=5, ge=1)
    target_metrics: Dict[str, float] = Field(default_factory=dict)

    @field_validator("target_metrics")
    @classmethod
    def _known_metrics(cls, value: Dict[str, float]) -> Dict[str, float]:
        allowed = {"accuracy", "precision", "recall", "f1", "auc", "loss"}
        unknown = sorted(set(value) - allowed)
        if unknown:
            raise ValueError(f"unknown target metrics {unknown}; allowed: {sorted(allowed)}")
        return value

    @model_validator(mode="after")
    def _target_needs_thresholds(self) -> "ConvergenceConfig":
        if self.mode == "target" and not self.target_metrics:
            raise ValueError("convergence mode 'target' requires target_metrics")
        return self


class FLConfig(_Strict):
    """Federated hyperparameters: M clients, fraction fit Fr, E local epochs, R rounds."""

    n_clients: int = Field(default=8, ge=1)
    fraction_fit: float = Field(default=1.0, gt=0.0, le=1.0)
    local_epochs: int = Field(default=1, ge=1)
    max_rounds: int = Field(default=50, ge=1)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=0.001, gt=0.0)
    seed: int = Field(default=0, ge=0)
    convergence: ConvergenceConfig = Field(default_factory=ConvergenceConfig)

    @property
    def clients_per_round(self) -> int:
        return selected_count(self.n_clients, self.fraction_fit)


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------


class DatasetConfig(_Strict):
    path: str
    schema_path: str
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    max_rows: Optional[int] = Field(default=None, ge=10)


class ArchitectureConfig(_Strict):
    preset: Optional[Literal["unsw_nb15", "ton_iot", "nsl_kdd", "wustl_ehms"]] = None
    hidden_units: Optional[List[int]] = None

    @model_validator(mode="after")
    def _exactly_one(self) -> "ArchitectureConfig":
        if (self.preset is None) == (self.hidden_units is None):
            raise ValueError("set exactly one of architecture.preset or architecture.hidden_units")
        if self.hidden_units is not None and (
            not self.hidden_units or any(u < 1 for u in self.hidden_units)
        ):
            raise ValueError("hidden_units must be a non-empty list of positive integers")
        return self

    def resolved_units(self) -> List[int]:
        if self.preset is not None:
            return list(ARCHITECTURE_PRESETS[self.preset])
        return list(self.hidden_units or [])


class XAIConfig(_Strict):
    enabled: bool = False
    background_size: int = Field(default=100, ge=1)
    max_instances: int = Field(default=500, ge=1)
    n_permutations: int = Field(default=64, ge=1)
    exact_max_features: int = Field(default=10, ge=1, le=15)


class SweepAxes(_Strict):
    n_clients: Optional[List[int]] = None
    fraction_fit: Optional[List[float]] = None
    local_epochs: Optional[List[int]] = None
    protocol_defaults: bool = True

    @field_validator("n_clients", "local_epochs")
    @classmethod
    def _positive_ints(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is not None:
            if not value:
                raise ValueError("sweep axis must list at least one value")
            if any(v < 1 for v in value):
                raise ValueError("sweep axis values must be positive")
        return value

    @field_validator("fraction_fit")
    @classmethod
    def _fractions(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None:
            if not value:
                raise ValueError("sweep axis must list at least one value")
            if any(not (0.0 < v <= 1.0) for v in value):
                raise ValueError("fraction_fit values must lie in (0, 1]")
        return value

    def axes(self) -> Dict[str, List[Any]]:
        out: Dict[str, List[Any]] = {}
        for name in ("n_clients", "fraction_fit", "local_epochs"):
            values = getattr(self, name)
            if values is not None:
                out[name] = list(values)
        return out


class ExperimentConfig(_Strict):
    """Top-level experiment description; see configs/ for examples."""

    dataset: DatasetConfig
    architecture: ArchitectureConfig
    mode: Literal["federated", "centralized", "sweep"] = "federated"
    federated: FLConfig = Field(default_factory=FLConfig)
    centralized_epochs: Optional[int] = Field(default=None, ge=1)
    compare_centralized: bool = False
    sweep: Optional[SweepAxes] = None
    explain: XAIConfig = Field(default_factory=XAIConfig)
    output_dir: str = DEFAULT_OUTPUT_DIR
    seed: int = Field(default=0, ge=0)
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    workers: int = Field(default=DEFAULT_WORKERS, ge=1)

    @model_validator(mode="after")
    def _check_mode(self) -> "ExperimentConfig":
        if self.mode == "sweep":
            if self.sweep is None or not self.sweep.axes():
                raise ValueError("sweep mode requires a sweep section with at least one axis")
        elif self.sweep is not None:
            raise ValueError(f"sweep axes are only valid in sweep mode (mode is '{self.mode}')")
        return self

    def fl_config(self) -> FLConfig:
        """FLConfig with the experiment seed applied."""
        return self.federated.model_copy(update={"seed": self.seed})

    def resolved_centralized_epochs(self) -> int:
        if self.centralized_epochs is not None:
            return self.centralized_epochs
        return self.federated.max_rounds * self.federated.local_epochs

    def resolve_path(self, value: str, base_dir: Optional[Path]) -> Path:
        path = Path(value)
        if base_dir is not None and not path.is_absolute():
            return base_dir / path
        return path


def load_experiment_config(path: str | Path, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Read an experiment config file and apply flag overrides before validation.

    Args:
        path: JSON config file
        overrides: Top-level field values (output_dir, seed, mode) that replace
            the file's values; None entries are ignored

    Returns:
        Validated ExperimentConfig

    Raises:
        FileNotFoundError: If the file does not exist
        pydantic.ValidationError: Listing every invalid field
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Experiment config not found: {path}")
    raw = json.loads(path.read_text(encoding="utf-8"))
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    return ExperimentConfig.model_validate(raw)


def format_validation_error(exc: Exception) -> List[str]:
    """Render a pydantic ValidationError as `field.path: message` lines."""
    errors = getattr(exc, "errors", None)
    if errors is None:
        return [str(exc)]
    lines = []
    for err in errors():
        loc = ".".join(str(part) for part in err.get("loc", ())) or "<config>"
        lines.append(f"{loc}: {err.get('msg', '')}")
    return lines


def selected_count(n_clients: int, fraction_fit: float) -> int:
    """max(1, round(M * Fr)); Python rounds halves to even."""
    if n_clients < 1 or not (0.0 < fraction_fit <= 1.0) or math.isnan(fraction_fit):
        raise ValueError(f"invalid selection parameters M={n_clients}, Fr={fraction_fit}")
    return max(1, round(n_clients * fraction_fit))
