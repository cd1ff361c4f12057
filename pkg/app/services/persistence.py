"""Anomaly persistence: Kendall tau-b between cross-sectional rank vectors over time."""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numba
import numpy as np
import pandas as pd
from scipy.stats import rankdata

from app.errors import ComputationError, DataValidationError
from app.services.returns import RiskAdjustedSeries
from app.services.spectra import gaussian_kde
from app.services.tables import read_matrix, write_frame, write_matrix


@dataclass(frozen=True, eq=False)
class PersistenceMatrix:
    time_indices: np.ndarray
    dates: tuple[date, ...]
    values: np.ndarray
    collection_label: str = ""

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def ids(self) -> tuple[str, ...]:
        """Time labels used when the matrix is exported or clustered."""
        if self.dates:
            return tuple(d.isoformat() for d in self.dates)
        return tuple(str(int(t)) for t in self.time_indices)

    def dissimilarity(self) -> np.ndarray:
        """1 - k(s, t), in [0, 2] with a zero diagonal."""
        values = 1.0 - self.values
        np.fill_diagonal(values, 0.0)
        return values


@numba.njit(cache=True, nogil=True)
def _count_inversions(values):
    """Number of strictly decreasing pairs, via bottom-up merge sort."""
    n = values.size
    src = values.copy()
    buf = np.empty_like(src)
    swaps = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i = lo
            j = mid
            k = lo
            while i < mid and j < hi:
                if src[j] < src[i]:
                    buf[k] = src[j]
                    swaps += mid - i
                    j += 1
                else:
                    buf[k] = src[i]
                    i += 1
                k += 1
            while i < mid:
                buf[k] = src[i]
                i += 1
                k += 1
            while j < hi:
                buf[k] = src[j]
                j += 1
                k += 1
        src, buf = buf, src
        width *= 2
    return swaps, src


@numba.njit(cache=True)
def _tied_pairs(sorted_values):
    total = 0
    run = 1
    for i in range(1, sorted_values.size):
        if sorted_values[i] == sorted_values[i - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    total += run * (run - 1) // 2
    return total


@numba.njit(cache=True, nogil=True)
def _tau_b(x_ranks, y_ranks):
    """Tau-b from dense integer ranks; NaN when either vector is entirely tied."""
    n = x_ranks.size
    span = np.int64(y_ranks.max() + 1)
    order = np.argsort(x_ranks * span + y_ranks, kind="mergesort")
    xs = x_ranks[order]
    ys = y_ranks[order]
    n0 = n * (n - 1) // 2
    n1 = _tied_pairs(xs)
    joint = 0
    run = 1
    for i in range(1, n):
        if xs[i] == xs[i - 1] and ys[i] == ys[i - 1]:
            run += 1
        else:
            joint += run * (run - 1) // 2
            run = 1
    joint += run * (run - 1) // 2
    swaps, y_sorted = _count_inversions(ys)
    n2 = _tied_pairs(y_sorted)
    if n0 == n1 or n0 == n2:
        return np.nan
    numerator = n0 - n1 - n2 + joint - 2 * swaps
    return numerator / np.sqrt(float(n0 - n1) * float(n0 - n2))


@numba.njit(cache=True, nogil=True)
def _persistence_fill(ranks):
    n_times = ranks.shape[0]
    out = np.empty((n_times, n_times))
    for s in range(n_times):
        out[s, s] = 1.0
        for t in range(s + 1, n_times):
            value = _tau_b(ranks[s], ranks[t])
            out[s, t] = value
            out[t, s] = value
    return out


def _dense_ranks(values: np.ndarray, axis: int = -1) -> np.ndarray:
    return rankdata(values, method="dense", axis=axis).astype(np.int64)


def kendall_tau(x, y) -> float:
    """Tie-corrected Kendall tau-b in O(n log n)."""
    xv = np.asarray(x, dtype=float).ravel()
    yv = np.asarray(y, dtype=float).ravel()
    if xv.size != yv.size:
        raise DataValidationError(f"vectors differ in length: {xv.size} vs {yv.size}")
    if xv.size < 2:
        raise DataValidationError("kendall_tau needs at least two observations")
    value = _tau_b(_dense_ranks(xv), _dense_ranks(yv))
    if np.isnan(value):
        raise ComputationError("kendall_tau is undefined for an entirely tied vector")
    return float(min(1.0, max(-1.0, value)))


def persistence_matrix(ra: RiskAdjustedSeries) -> PersistenceMatrix:
    """Entry (s, t) = tau-b between the cross-sections at times s and t."""
    values = np.asarray(ra.values, dtype=float)
    if values.shape[0] < 2 or values.shape[1] < 2:
        raise DataValidationError(
            f"persistence needs at least 2 time points and 2 assets, got {values.shape}"
        )
    tied = np.flatnonzero(np.ptp(values, axis=1) == 0)
    if tied.size:
        when = ra.dates[tied[0]] if ra.dates else int(ra.time_indices[tied[0]])
        raise ComputationError(f"risk-adjusted cross-section on {when} is entirely tied")
    matrix = np.clip(_persistence_fill(_dense_ranks(values, axis=1)), -1.0, 1.0)
    return PersistenceMatrix(
        time_indices=np.asarray(ra.time_indices),
        dates=tuple(ra.dates),
        values=matrix,
        collection_label=ra.collection_label,
    )


def persistence_norm(k: PersistenceMatrix) -> float:
    """Frobenius norm over all entries, diagonal included."""
    return float(np.linalg.norm(k.values, "fro"))


def persistence_element_density(k: PersistenceMatrix, grid: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """KDE of the strictly-upper-triangle persistence entries."""
    rows, cols = np.triu_indices(k.size, k=1)
    return gaussian_kde(k.values[rows, cols], grid)


def write_persistence(k: PersistenceMatrix, path: Path, long_format: bool = False) -> Path:
    """Square matrix keyed by date (with a sidecar marking it), or long `s,t,tau` rows.

    The sidecar keeps the return-axis time indices and collection label so a
    reload does not renumber the windows from 1.
    """
    path = Path(path)
    if not long_format:
        write_matrix(list(k.ids), k.values, path)
        meta = {
            "kind": "persistence",
            "role": "persistence",
            "size": k.size,
            "time_indices": [int(t) for t in k.time_indices],
            "collection_label": k.collection_label,
        }
        sidecar = path.with_name(path.name + ".meta.json")
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
    rows, cols = np.triu_indices(k.size)
    frame = pd.DataFrame(
        {
            "s": k.time_indices[rows],
            "t": k.time_indices[cols],
            "tau": k.values[rows, cols],
        }
    )
    return write_frame(frame, path)


def load_persistence(path: Path) -> PersistenceMatrix:
    path = Path(path)
    ids, values = read_matrix(path)
    sidecar = path.with_name(path.name + ".meta.json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    try:
        dates = tuple(date.fromisoformat(i) for i in ids)
    except ValueError:
        dates = ()
    if "time_indices" in meta:
        time_indices = np.asarray(meta["time_indices"], dtype=np.int64)
    elif not dates:
        time_indices = np.asarray([int(i) for i in ids], dtype=np.int64)
    else:
        time_indices = np.arange(1, len(ids) + 1)
    if time_indices.size != len(ids):
        raise DataValidationError(
            f"{sidecar.name} lists {time_indices.size} time indices for a {len(ids)} x {len(ids)} matrix"
        )
    return PersistenceMatrix(
        time_indices=time_indices,
        dates=dates,
        values=values,
        collection_label=meta.get("collection_label", ""),
    )
