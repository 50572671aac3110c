"""Checkpoint directory format.

    <dir>/config.json    model config (ModelConfig keys) plus optional "kind"
    <dir>/index.json     {"parameters": {name: shape}, "dtype": "<f8"}
    <dir>/<name>.bin     little-endian float64 blob per parameter
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from errors import CheckpointError

CONFIG_FILE = "config.json"
INDEX_FILE = "index.json"
BLOB_DTYPE = "<f8"


def write_arrays(directory: Path, arrays: dict[str, np.ndarray]) -> dict[str, list[int]]:
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, arr in arrays.items():
        (directory / f"{name}.bin").write_bytes(np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes())
        shapes[name] = list(arr.shape)
    return shapes


def read_arrays(directory: Path, shapes: dict[str, list[int]]) -> dict[str, np.ndarray]:
    arrays = {}
    for name, shape in shapes.items():
        blob = directory / f"{name}.bin"
        if not blob.is_file():
            raise CheckpointError(f"checkpoint {directory} is missing parameter blob {blob.name}")
        flat = np.frombuffer(blob.read_bytes(), dtype=BLOB_DTYPE)
        expected = int(np.prod(shape)) if shape else 1
        if flat.size != expected:
            raise CheckpointError(f"parameter {name} in {directory} has {flat.size} values, expected {expected}")
        arrays[name] = flat.astype(np.float64).reshape(shape)
    return arrays


def save_checkpoint(path: str | Path, config: dict[str, Any], params: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    shapes = write_arrays(path, params)
    (path / CONFIG_FILE).write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")
    (path / INDEX_FILE).write_text(json.dumps({"dtype": BLOB_DTYPE, "parameters": shapes}, indent=2),
                                   encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    if not (path / CONFIG_FILE).is_file() or not (path / INDEX_FILE).is_file():
        raise CheckpointError(f"no checkpoint found at {path}")
    try:
        config = json.loads((path / CONFIG_FILE).read_text(encoding="utf-8"))
        index = json.loads((path / INDEX_FILE).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint metadata in {path}: {e}") from e
    return config, read_arrays(path, index["parameters"])
