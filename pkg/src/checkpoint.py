"""
Model checkpoint container (.npz).

Layout, format_version 1 (see README.md):
- format_version: int64 scalar
- input_dim: int64 scalar
- hidden_units: int64 vector
- W{l}: float64 (fan_in x fan_out), C order, for l = 0 .. n_layers-1
- b{l}: float64 (fan_out,)
"""

from pathlib import Path

import numpy as np
from loguru import logger

from .structures import ModelParams

FORMAT_VERSION = 1


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arch = params.architecture
    arrays = {
        "format_version": np.int64(FORMAT_VERSION),
        "input_dim": np.int64(arch.input_dim),
        "hidden_units": np.asarray(arch.hidden_units, dtype=np.int64),
    }
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{layer}"] = np.ascontiguousarray(w, dtype=np.float64)
        arrays[f"b{layer}"] = np.ascontiguousarray(b, dtype=np.float64)
    with path.open("wb") as handle:
        np.savez(handle, **arrays)
    logger.info(f"Saved checkpoint ({params.n_layers} layers) to {path}")
    return path


def load_checkpoint(path: str | Path) -> ModelParams:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: On an unknown format version or inconsistent layer shapes
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format_version {version}")
        hidden = [int(u) for u in data["hidden_units"]]
        n_layers = len(hidden) + 1
        params = ModelParams(
            weights=[data[f"W{layer}"].astype(np.float64) for layer in range(n_layers)],
            biases=[data[f"b{layer}"].astype(np.float64) for layer in range(n_layers)],
        )
        input_dim = int(data["input_dim"])

    arch = params.architecture
    if arch.input_dim != input_dim or list(arch.hidden_units) != hidden:
        raise ValueError(f"{path}: layer shapes disagree with recorded architecture")
    return params
