"""
Synthetic intrusion-detection fixture.

Writes a small CSV plus its SchemaConfig so the whole pipeline can run without
the public datasets. Column f0 is numeric and carries the planted signal; the
remaining columns cycle through one-hot categorical, boolean, ordinal
categorical and numeric noise. The label is "Attack" when f0 exceeds a threshold,
with a fraction of labels flipped at random.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
import pandas as pd
from loguru import logger

from .config import ColumnSpec, SchemaConfig

_CYCLE = ("numeric", "categorical_onehot", "boolean", "categorical_ordinal")
_PROTOCOLS = ["tcp", "udp", "icmp"]
_LEVELS = ["low", "medium", "high"]


@dataclass(frozen=True)
class AnomalyRule:
    """label = Attack iff f0 > threshold, then flip each label with probability noise."""

    threshold: float = 0.0
    noise: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.noise < 0.5:
            raise ValueError(f"noise must lie in [0, 0.5), got {self.noise}")


def column_kinds(n_features: int) -> list[str]:
    """f0 is numeric; f1 onward cycle one-hot, boolean, ordinal, numeric."""
    return ["numeric"] + [_CYCLE[(i + 1) % len(_CYCLE)] for i in range(n_features - 1)]


def synthetic_schema(n_features: int, name: str = "synthetic") -> SchemaConfig:
    columns = [ColumnSpec(name=f"f{i}", role="feature", kind=kind) for i, kind in enumerate(column_kinds(n_features))]
    columns.append(ColumnSpec(name="label", role="label", kind="categorical_ordinal"))
    return SchemaConfig(dataset_name=name, columns=columns, label_positive_values=["Attack"])


def synthetic_frame(n_samples: int, n_features: int, seed: int, rule: AnomalyRule = AnomalyRule()) -> pd.DataFrame:
    """
    Build the fixture as a DataFrame of text-ready columns.

    Raises:
        ValueError: If n_samples < 10 or n_features < 2
    """
    if n_samples < 10:
        raise ValueError(f"n_samples must be >= 10, got {n_samples}")
    if n_features < 2:
        raise ValueError(f"n_features must be >= 2, got {n_features}")

    rng = np.random.default_rng(seed)
    columns = {}
    for i, kind in enumerate(column_kinds(n_features)):
        if kind == "numeric":
            columns[f"f{i}"] = rng.normal(0.0, 1.0, size=n_samples)
        elif kind == "categorical_onehot":
            columns[f"f{i}"] = rng.choice(_PROTOCOLS, size=n_samples)
        elif kind == "boolean":
            columns[f"f{i}"] = rng.choice(["true", "false"], size=n_samples)
        else:
            columns[f"f{i}"] = rng.choice(_LEVELS, size=n_samples)

    attack = columns["f0"] > rule.threshold
    flips = rng.random(n_samples) < rule.noise
    attack = attack ^ flips
    columns["label"] = np.where(attack, "Attack", "Normal")
    return pd.DataFrame(columns)


def generate_synthetic(
    n_samples: int,
    n_features: int,
    seed: int,
    out_dir: str | Path,
    rule: AnomalyRule = AnomalyRule(),
    name: str = "synthetic",
) -> Tuple[Path, Path]:
    """
    Write `<name>.csv` and `<name>_schema.json` under out_dir.

    Args:
        n_samples: Data rows (>= 10)
        n_features: Feature columns (>= 2), f0 being the informative one
        seed: Generator seed; the same seed writes identical bytes
        out_dir: Destination directory (created if needed)
        rule: Planted labelling rule
        name: File stem and schema dataset_name

    Returns:
        (csv path, schema path)
    """
    frame = synthetic_frame(n_samples, n_features, seed, rule)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    csv_path = out_dir / f"{name}.csv"
    schema_path = out_dir / f"{name}_schema.json"
    frame.to_csv(csv_path, index=False, float_format="%.6f", lineterminator="\n")
    schema_path.write_text(synthetic_schema(n_features, name).model_dump_json(indent=2) + "\n", encoding="utf-8")

    attacks = int((frame["label"] == "Attack").sum())
    logger.info(
        f"Wrote synthetic dataset {csv_path} ({n_samples} rows, {n_features} features, "
        f"{attacks} attack / {n_samples - attacks} normal) and schema {schema_path}"
    )
    return csv_path, schema_path
