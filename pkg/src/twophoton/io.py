"""Atomic CSV/JSON output with 17-significant-digit floats."""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.17g"


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, columns, rows, int_columns=()) -> Path:
    """Write a header plus rows; integer columns are written without exponent."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float)) if len(rows) else np.zeros((0, len(columns)))
    ints = {columns.index(c) for c in int_columns if c in columns}
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(str(int(v)) if i in ints else FLOAT_FMT % v for i, v in enumerate(r)))
    _atomic_write(Path(path), "\n".join(lines) + "\n")
    return Path(path)


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, payload) -> Path:
    _atomic_write(Path(path), json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return Path(path)


def field_rows(field) -> tuple[list[str], np.ndarray]:
    """ScalarField CSV layout ``x, y[, z], value``."""
    pts = field.grid.points()
    cols = ["x", "y", "z"][: field.grid.dim] + ["value"]
    return cols, np.column_stack([pts, field.values.reshape(-1)])


def write_field(path, field) -> Path:
    cols, rows = field_rows(field)
    return write_csv(path, cols, rows)


def read_field(path, grid):
    from .coefficients import ScalarField

    header, data = read_csv(path)
    if data.shape[0] != grid.size:
        raise ValueError("field CSV does not match the grid")
    return ScalarField(grid, data[:, -1].reshape(grid.shape))


def write_sinogram(path, sino) -> Path:
    cols, rows = sino.export_rows()
    return write_csv(path, cols, rows, int_columns=("angle_index", "offset_index"))
