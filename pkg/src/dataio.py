"""
Dataset ingestion and preprocessing.

Pipeline (fit on the training rows, replayed frozen on everything else):
1. Label mapping to {0, 1} (1 = anomaly)
2. Column removal: role=drop, single-valued or partially missing features
3. Encoding: booleans -> {0,1}, ordinal categories -> first-appearance index,
   one-hot categories -> one indicator per first-appearance category
4. Standardization with population mean / stddev

The fitted TransformState is enough to replay the exact mapping on another
table; unseen categories map to a reserved ordinal index or to an all-zeros
one-hot group.
"""

import csv
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from .config import SchemaConfig
from .structures import ClientPartition, PreparedDataset, RawTable, TransformState


class DatasetError(ValueError):
    """Base class for dataset loading and preprocessing failures."""


class SchemaMismatchError(DatasetError):
    pass


class RaggedRowError(DatasetError):
    def __init__(self, path: str, row_index: int, expected: int, found: int):
        self.path = path
        self.row_index = row_index
        super().__init__(
            f"{path}: row {row_index} has {found} cells, expected {expected} "
            f"(data row {row_index}, counting from 1 after the header)"
        )


class PreprocessingError(DatasetError):
    pass


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def load_dataset(path: str | Path, schema: SchemaConfig) -> RawTable:
    """
    Parse a CSV file into a RawTable of text cells.

    Args:
        path: CSV file (UTF-8, comma separated)
        schema: Declares the expected columns; with has_header=False the schema
            column order is used as the header

    Returns:
        RawTable with missing cells (schema.missing_values) stored as None

    Raises:
        FileNotFoundError: If the file does not exist
        SchemaMismatchError: If schema columns are absent from the header
        RaggedRowError: If a row has the wrong number of cells
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Dataset file not found: {path}")

    missing_tokens = set(schema.missing_values)
    rows: List[List[Optional[str]]] = []

    with path.open("r", encoding="utf-8-sig", newline="") as handle:
        reader = csv.reader(handle)
        if schema.has_header:
            headers = [h.strip() for h in next(reader, [])]
        else:
            headers = schema.column_names

        absent = [name for name in schema.column_names if name not in headers]
        if absent:
            raise SchemaMismatchError(
                f"{path}: header is missing schema columns {absent}\n"
                f"Header columns: {headers}"
            )
        extra = [h for h in headers if h not in schema.column_names]
        if extra:
            logger.warning(f"{path}: ignoring {len(extra)} columns not declared in schema: {extra}")

        n_cols = len(headers)
        for row_index, cells in enumerate(reader, start=1):
            if not cells:
                continue
            if len(cells) != n_cols:
                raise RaggedRowError(str(path), row_index, n_cols, len(cells))
            rows.append([None if c.strip() in missing_tokens else c.strip() for c in cells])

    logger.info(f"Loaded {len(rows)} rows x {n_cols} columns from {path}")
    return RawTable(headers=headers, rows=rows, source=str(path))


def subsample_table(table: RawTable, schema: SchemaConfig, max_rows: int, seed: int) -> RawTable:
    """Seeded row subsample, stratified by the binary label where possible."""
    if table.n_rows <= max_rows:
        return table
    labels = np.array([_label_value(v, schema) for v in table.column(schema.label_column)])
    indices = np.arange(table.n_rows)
    counts = np.bincount(labels, minlength=2)
    stratify = labels if counts.min() >= 2 else None
    kept, _ = train_test_split(indices, train_size=max_rows, stratify=stratify, random_state=seed)
    kept = np.sort(kept)
    logger.info(f"Subsampled {table.source}: {table.n_rows} -> {len(kept)} rows")
    return RawTable(headers=table.headers, rows=[table.rows[i] for i in kept], source=table.source)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def _label_value(raw: Optional[str], schema: SchemaConfig) -> int:
    value = "" if raw is None else raw
    if schema.label_positive_values:
        return int(value in schema.label_positive_values)
    return int(value not in schema.label_negative_values)


def _first_missing(values: List[Optional[str]], tokens: List[str]) -> Optional[int]:
    """Index of the first None cell or cell equal to a missing token, else None."""
    token_set = set(tokens)
    return next((i for i, v in enumerate(values) if v is None or v.strip() in token_set), None)


def _parse_numeric(values: List[Optional[str]], column: str, source: str) -> np.ndarray:
    parsed = pd.to_numeric(pd.Series(values, dtype=object), errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(parsed))
    if bad.size:
        row = int(bad[0])
        raise PreprocessingError(
            f"{source}: column '{column}' row {row + 1} holds non-numeric or missing value {values[row]!r}"
        )
    return parsed


def _first_appearance(values: List[str]) -> List[str]:
    return list(dict.fromkeys(values))


def _encode(table: RawTable, state: TransformState) -> np.ndarray:
    """Encode kept feature columns (unscaled) in feature_names order."""
    blocks = []
    for name in state.kept_columns:
        if name not in table.headers:
            raise SchemaMismatchError(f"{table.source}: column '{name}' required by the transform is absent")
        values = table.column(name)
        kind = state.kinds[name]
        row = _first_missing(values, state.missing_values)
        if row is not None:
            raise PreprocessingError(
                f"{table.source}: kept column '{name}' has a missing cell at row {row + 1}"
            )

        if kind == "numeric":
            blocks.append(_parse_numeric(values, name, table.source)[:, None])
        elif kind == "boolean":
            true_set = set(state.boolean_true_values)
            blocks.append(np.array([[1.0 if v in true_set else 0.0] for v in values]))
        elif kind == "categorical_ordinal":
            mapping = state.ordinal_maps[name]
            unknown = len(mapping)
            codes = np.array([mapping.get(v, unknown) for v in values], dtype=np.float64)
            blocks.append(codes[:, None])
        else:
            categories = state.onehot_categories[name]
            codes = pd.Categorical(values, categories=categories).codes
            # unseen categories get code -1 and land on the all-zeros row
            lookup = np.vstack([np.eye(len(categories)), np.zeros((1, len(categories)))])
            blocks.append(lookup[codes])

    if not blocks:
        return np.zeros((table.n_rows, 0))
    return np.hstack(blocks).astype(np.float64)


def _labels(table: RawTable, state: TransformState) -> np.ndarray:
    if state.label_column not in table.headers:
        raise SchemaMismatchError(f"{table.source}: label column '{state.label_column}' is absent")
    raw = table.column(state.label_column)
    row = _first_missing(raw, state.missing_values)
    if row is not None:
        raise PreprocessingError(f"{table.source}: label missing at row {row + 1}")
    return np.array([state.label_of(v) for v in raw], dtype=np.int64)


def _scale(encoded: np.ndarray, state: TransformState) -> np.ndarray:
    return (encoded - state.scaler_mean) / state.scaler_std


def preprocess_fit(table: RawTable, schema: SchemaConfig) -> PreparedDataset:
    """
    Fit the preprocessing pipeline on `table` and return the encoded dataset.

    Raises:
        SchemaMismatchError: If schema columns are absent from the table
        PreprocessingError: If no feature survives pruning, the label is
            single-class, or a one-hot column exceeds the cardinality limit
    """
    absent = [name for name in schema.column_names if name not in table.headers]
    if absent:
        raise SchemaMismatchError(f"{table.source}: table lacks schema columns {absent}")

    kept: List[str] = []
    kinds: Dict[str, str] = {}
    ordinal_maps: Dict[str, Dict[str, int]] = {}
    onehot_categories: Dict[str, List[str]] = {}
    pruned: List[Tuple[str, str]] = []

    for column in schema.feature_columns:
        values = table.column(column.name)
        if _first_missing(values, schema.missing_values) is not None:
            pruned.append((column.name, "missing values"))
            continue
        if len(set(values)) < 2:
            pruned.append((column.name, "single value"))
            continue

        if column.kind == "numeric":
            if np.unique(_parse_numeric(values, column.name, table.source)).size < 2:
                pruned.append((column.name, "single value"))
                continue
        elif column.kind == "boolean":
            true_set = set(schema.boolean_true_values)
            if len({v in true_set for v in values}) < 2:
                pruned.append((column.name, "single value"))
                continue
        elif column.kind == "categorical_ordinal":
            ordinal_maps[column.name] = {v: i for i, v in enumerate(_first_appearance(values))}
        else:
            categories = _first_appearance(values)
            if len(categories) > schema.onehot_cardinality_limit:
                raise PreprocessingError(
                    f"{table.source}: one-hot column '{column.name}' has {len(categories)} categories, "
                    f"above onehot_cardinality_limit={schema.onehot_cardinality_limit}\n"
                    f"Declare it categorical_ordinal or raise the limit in the schema."
                )
            onehot_categories[column.name] = categories

        kept.append(column.name)
        kinds[column.name] = column.kind

    for name, reason in pruned:
        logger.info(f"Pruned feature column '{name}' ({reason})")
    if not kept:
        raise PreprocessingError(
            f"{table.source}: no feature columns survive pruning "
            f"({len(pruned)} removed: {[n for n, _ in pruned]})"
        )

    feature_names: List[str] = []
    for name in kept:
        if kinds[name] == "categorical_onehot":
            feature_names.extend(f"{name}_{cat}" for cat in onehot_categories[name])
        else:
            feature_names.append(name)

    state = TransformState(
        kept_columns=kept,
        kinds=kinds,
        ordinal_maps=ordinal_maps,
        onehot_categories=onehot_categories,
        boolean_true_values=list(schema.boolean_true_values),
        feature_names=feature_names,
        scaler_mean=np.zeros(len(feature_names)),
        scaler_std=np.ones(len(feature_names)),
        label_column=schema.label_column,
        label_positive_values=list(schema.label_positive_values),
        label_negative_values=list(schema.label_negative_values),
        missing_values=list(schema.missing_values),
    )

    labels = _labels(table, state)
    if np.unique(labels).size < 2:
        raise PreprocessingError(
            f"{table.source}: label column '{schema.label_column}' maps to a single class "
            f"({int(labels[0]) if labels.size else 'empty'}); check label_positive_values"
        )

    encoded = _encode(table, state)
    scaler = StandardScaler().fit(encoded)
    state.scaler_mean = scaler.mean_.astype(np.float64)
    state.scaler_std = np.sqrt(scaler.var_).astype(np.float64)

    logger.info(
        f"Fitted preprocessing: {len(kept)} of {len(schema.feature_columns)} feature columns kept, "
        f"{len(feature_names)} encoded features, {int(labels.sum())}/{labels.size} anomalous rows"
    )
    return PreparedDataset(
        features=_scale(encoded, state),
        labels=labels,
        feature_names=list(feature_names),
        transform=state,
    )


def preprocess_apply(table: RawTable, transform: TransformState) -> PreparedDataset:
    """Replay a fitted transform with frozen encoders and scaler statistics."""
    labels = _labels(table, transform)
    features = _scale(_encode(table, transform), transform)
    logger.debug(f"Applied preprocessing to {table.n_rows} rows from {table.source}")
    return PreparedDataset(
        features=features,
        labels=labels,
        feature_names=list(transform.feature_names),
        transform=transform,
    )


def split_table(table: RawTable, schema: SchemaConfig, test_fraction: float, seed: int) -> Tuple[RawTable, RawTable]:
    """
    Stratified split of raw rows, so the scaler can be fitted on training rows only.

    Row assignment is identical to split_train_test on the encoded dataset.
    """
    labels = np.array([_label_value(v, schema) for v in table.column(schema.label_column)])
    train_idx, test_idx = _split_indices(labels, test_fraction, seed)
    return (
        RawTable(headers=table.headers, rows=[table.rows[i] for i in train_idx], source=table.source),
        RawTable(headers=table.headers, rows=[table.rows[i] for i in test_idx], source=table.source),
    )


def _split_indices(labels: np.ndarray, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = labels.shape[0]
    if n < 2:
        raise DatasetError(f"need at least 2 samples to split, got {n}")
    counts = np.bincount(labels, minlength=2)
    for cls, count in enumerate(counts):
        if count < 2:
            raise DatasetError(
                f"class {cls} has {count} sample(s); at least 2 are needed to appear in both splits"
            )
    n_test = int(round(test_fraction * n))
    if n_test < 2 or n - n_test < 2:
        raise DatasetError(
            f"test_fraction={test_fraction} on {n} samples gives {n_test} test rows; "
            f"both splits need at least one sample per class"
        )
    train_idx, test_idx = train_test_split(
        np.arange(n), test_size=n_test, stratify=labels, random_state=seed
    )
    return np.asarray(train_idx), np.asarray(test_idx)


def split_train_test(
    data: PreparedDataset, test_fraction: float, seed: int
) -> Tuple[PreparedDataset, PreparedDataset]:
    """
    Stratified random train/test split with |test| = round(test_fraction * n).

    Raises:
        DatasetError: If a class is too small to appear in both splits
    """
    train_idx, test_idx = _split_indices(data.labels, test_fraction, seed)
    logger.info(f"Split {data.n_samples} rows into {len(train_idx)} train / {len(test_idx)} test")
    return data.subset(train_idx), data.subset(test_idx)


def partition_clients(train: PreparedDataset, n_clients: int, seed: int) -> List[ClientPartition]:
    """
    Seeded shuffle followed by contiguous balanced slices (sizes differ by <= 1).

    Raises:
        ValueError: If n_clients exceeds the number of training samples
    """
    n = train.n_samples
    if n_clients < 1:
        raise ValueError(f"n_clients must be positive, got {n_clients}")
    if n_clients > n:
        raise ValueError(f"cannot split {n} training samples across {n_clients} clients")

    order = np.random.default_rng(seed).permutation(n)
    partitions = [
        ClientPartition(
            client_id=client_id,
            features=train.features[chunk],
            labels=train.labels[chunk],
            indices=chunk,
        )
        for client_id, chunk in enumerate(np.array_split(order, n_clients))
    ]
    sizes = [p.sample_count for p in partitions]
    logger.debug(f"Partitioned {n} samples across {n_clients} clients: sizes {sizes}")
    return partitions


def class_distribution(
    train: PreparedDataset, test: PreparedDataset, partitions: Optional[List[ClientPartition]] = None
) -> Dict[str, object]:
    """Normal vs anomalous counts per split (and per client when partitioned)."""
    summary: Dict[str, object] = {"train": train.class_counts(), "test": test.class_counts()}
    if partitions is not None:
        summary["clients"] = {
            str(p.client_id): {
                "normal": p.sample_count - int(p.labels.sum()),
                "anomalous": int(p.labels.sum()),
            }
            for p in partitions
        }
    return summary
