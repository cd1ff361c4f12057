"""Canonical CSV helpers.

Floats are written with their shortest round-trip representation and read back
with round-trip precision, so load -> write -> load is bit-identical.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pandas as pd

from app.errors import ParseError


def format_float(value: float) -> str:
    number = float(value)
    if math.isnan(number):
        return ""
    return repr(number)


def write_frame(frame: pd.DataFrame, path: Path) -> Path:
    """Write a frame as canonical CSV (LF line endings, repr floats, no index)."""
    out = frame.copy()
    for column in out.columns:
        if pd.api.types.is_float_dtype(out[column]):
            out[column] = out[column].map(format_float)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(path, index=False, lineterminator="\n")
    return path


def read_frame(path: Path, **kwargs) -> pd.DataFrame:
    """Read a canonical CSV written by `write_frame`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    try:
        return pd.read_csv(path, float_precision="round_trip", **kwargs)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ParseError(str(exc), path=str(path)) from exc


def write_matrix(ids: list[str], values: np.ndarray, path: Path) -> Path:
    """Square matrix with an `id` header column and ids as column names."""
    frame = pd.DataFrame(np.asarray(values, dtype=float), columns=list(ids))
    frame.insert(0, "id", list(ids))
    return write_frame(frame, path)


def read_matrix(path: Path) -> tuple[list[str], np.ndarray]:
    frame = read_frame(path, dtype={"id": str})
    if frame.columns[0] != "id":
        raise ParseError("matrix CSV must start with an 'id' column", path=str(path))
    ids = [str(v) for v in frame["id"].tolist()]
    columns = [str(c) for c in frame.columns[1:]]
    if columns != ids:
        raise ParseError("matrix row ids do not match column ids", path=str(path))
    values = frame.iloc[:, 1:].to_numpy(dtype=float)
    return ids, values
