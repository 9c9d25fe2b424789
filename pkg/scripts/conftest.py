"""Shared pytest fixtures: small schemas, CSV writers and the synthetic dataset."""

import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from src.config import ColumnSpec, SchemaConfig
from src.synthetic import generate_synthetic
from src.structures import Architecture, PreparedDataset, TransformState


def make_schema(columns, positive=("Attack",), **kwargs) -> SchemaConfig:
    """columns: iterable of (name, role, kind)."""
    return SchemaConfig(
        dataset_name=kwargs.pop("dataset_name", "test"),
        columns=[ColumnSpec(name=n, role=r, kind=k) for n, r, k in columns],
        label_positive_values=list(positive),
        **kwargs,
    )


def make_dataset(features: np.ndarray, labels: np.ndarray) -> PreparedDataset:
    """PreparedDataset around ready-made arrays (identity transform)."""
    d = features.shape[1]
    names = [f"x{i}" for i in range(d)]
    transform = TransformState(
        kept_columns=names,
        kinds={n: "numeric" for n in names},
        ordinal_maps={},
        onehot_categories={},
        boolean_true_values=["1"],
        feature_names=names,
        scaler_mean=np.zeros(d),
        scaler_std=np.ones(d),
        label_column="label",
        label_positive_values=["1"],
    )
    return PreparedDataset(
        features=np.asarray(features, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        feature_names=names,
        transform=transform,
    )


def blobs(n: int, d: int, seed: int, shift: float = 2.0):
    """Two Gaussian blobs separated along the first axis, labels 0/1 alternating."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    features = rng.normal(size=(n, d))
    features[:, 0] += shift * (2 * labels - 1)
    return features, labels


@pytest.fixture
def write_csv(tmp_path):
    def _write(text: str, name: str = "data.csv"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write


@pytest.fixture
def small_arch():
    return Architecture(input_dim=4, hidden_units=(6, 3))


@pytest.fixture(scope="session")
def synthetic_files(tmp_path_factory):
    """1,000-row, 5-feature synthetic dataset written once per session."""
    out = tmp_path_factory.mktemp("synthetic")
    csv_path, schema_path = generate_synthetic(1000, 5, seed=0, out_dir=out)
    return csv_path, schema_path
