"""Raw little-endian float32 matrices with a JSON sidecar.

``<name>.f32`` holds the row-major values; ``<name>.f32.json`` holds at
least ``{"rows", "dim", "normalized"}`` plus any extra keys.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_matrix(path: str | Path, values, normalized: bool = False, **extra) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    path = Path(path)
    path.write_bytes(values.astype("<f4").tobytes(order="C"))
    meta = {"rows": int(values.shape[0]), "dim": int(values.shape[1]), "normalized": bool(normalized)}
    meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_matrix(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    rows, dim = int(meta["rows"]), int(meta["dim"])
    if raw.size != rows * dim:
        raise ValueError(f"{path}: {raw.size} values, sidecar says {rows}x{dim}")
    return raw.reshape(rows, dim).astype(np.float32), meta
