"""Rolling correlation matrices, eigenspectra and dynamics deviation.

Correlations are formed from returns standardized inside each rolling window,
so every matrix has an exact unit diagonal. Eigenvalues are sorted descending
and tiny negative values (above -1e-10) are clamped to zero.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from datetime import date

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.integrate import trapezoid
from scipy.stats import norm

from app.errors import ComputationError, DataValidationError
from app.services.returns import ReturnsPanel
from app.services.tables import read_frame, write_frame

NEGATIVE_EIGENVALUE_TOLERANCE = 1e-10
SYMMETRY_TOLERANCE = 1e-12
BANDWIDTH_FLOOR = 1e-4
_KDE_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    asset_ids: tuple[str, ...]
    values: np.ndarray
    window_end_index: int
    window_end_date: date | None = None

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def upper_elements(self) -> np.ndarray:
        rows, cols = np.triu_indices(self.size, k=1)
        return self.values[rows, cols]


@dataclass(frozen=True, eq=False)
class Eigendecomposition:
    """Descending eigenvalues and matching orthonormal eigenvectors (as columns)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    asset_ids: tuple[str, ...] = ()

    def explained_ratios(self) -> np.ndarray:
        return self.eigenvalues / self.eigenvalues.size

    def loadings(self) -> np.ndarray:
        """Row m holds the coefficients of principal component m."""
        return self.eigenvectors.T

    def components(self, standardized: ReturnsPanel | np.ndarray) -> np.ndarray:
        """Transformed components, one row per PC and one column per time step."""
        values = standardized.returns if isinstance(standardized, ReturnsPanel) else standardized
        values = np.asarray(values, dtype=float)
        if values.shape[1] != self.eigenvectors.shape[0]:
            raise DataValidationError(
                f"expected {self.eigenvectors.shape[0]} asset columns, got {values.shape[1]}"
            )
        return self.loadings() @ values.T

    def market_mode(self) -> np.ndarray:
        return self.eigenvectors[:, 0]


@dataclass(frozen=True, eq=False)
class EigenspectrumSurface:
    """Per-window explained-variance ratios, one row per window end (return axis)."""

    window_end_indices: np.ndarray
    window_end_dates: tuple[date, ...]
    ratios: np.ndarray
    collection_label: str = ""

    def __post_init__(self) -> None:
        indices = np.asarray(self.window_end_indices, dtype=np.int64)
        ratios = np.asarray(self.ratios, dtype=float)
        if ratios.ndim != 2 or ratios.shape[0] != indices.size:
            raise DataValidationError("surface ratios must be W x M with one row per window")
        if indices.size and np.any(np.diff(indices) != 1):
            raise DataValidationError("surface window indices must be contiguous")
        object.__setattr__(self, "window_end_indices", indices)
        object.__setattr__(self, "ratios", ratios)
        object.__setattr__(self, "window_end_dates", tuple(self.window_end_dates))

    @property
    def n_ranks(self) -> int:
        return self.ratios.shape[1]

    @property
    def first(self) -> int:
        return int(self.window_end_indices[0])

    @property
    def last(self) -> int:
        return int(self.window_end_indices[-1])

    def rows(self, lo: int, hi: int) -> np.ndarray:
        if self.window_end_indices.size == 0 or not self.first <= lo <= hi <= self.last:
            raise DataValidationError(
                f"segment [{lo}, {hi}] outside surface '{self.collection_label}' domain"
                + (f" [{self.first}, {self.last}]" if self.window_end_indices.size else "")
            )
        return self.ratios[lo - self.first : hi - self.first + 1]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            self.ratios, columns=[f"lambda_{m + 1}" for m in range(self.n_ranks)]
        )
        frame.insert(0, "window_end_date", [d.isoformat() for d in self.window_end_dates])
        frame.insert(0, "window_end", self.window_end_indices)
        return frame


def _window_blocks(r: ReturnsPanel, T1: int) -> np.ndarray:
    if T1 < 2:
        raise DataValidationError(f"correlation window must be >= 2, got {T1}")
    if r.n_times < T1:
        raise DataValidationError(f"need at least {T1} returns for the window, got {r.n_times}")
    blocks = sliding_window_view(r.returns, T1, axis=0)  # (W, M, T1)
    flat = np.argwhere(np.ptp(blocks, axis=2) == 0)
    if flat.size:
        w, i = flat[0]
        raise ComputationError(
            f"asset '{r.asset_ids[i]}' has zero variance in the window ending at "
            f"index {r.first_index + w + T1 - 1} ({r.dates[w + T1 - 1]})"
        )
    return blocks


def _window_correlations(blocks: np.ndarray) -> np.ndarray:
    length = blocks.shape[2]
    centered = blocks - blocks.mean(axis=2, keepdims=True)
    z = centered / np.sqrt((centered**2).mean(axis=2, keepdims=True))
    corr = np.einsum("wit,wjt->wij", z, z) / length
    corr = 0.5 * (corr + np.swapaxes(corr, 1, 2))
    idx = np.arange(corr.shape[1])
    corr[:, idx, idx] = 1.0
    return corr


def rolling_correlation(r: ReturnsPanel, T1: int = 60) -> list[CorrelationMatrix]:
    """One correlation matrix per window end t in T1..T-1 (trailing, inclusive)."""
    corr = _window_correlations(_window_blocks(r, T1))
    ends = r.indices[T1 - 1 :]
    dates = r.dates[T1 - 1 :]
    return [
        CorrelationMatrix(
            asset_ids=r.asset_ids,
            values=corr[w],
            window_end_index=int(ends[w]),
            window_end_date=dates[w],
        )
        for w in range(corr.shape[0])
    ]


def correlation_matrix(r: ReturnsPanel) -> CorrelationMatrix:
    """Full-sample correlation matrix over every return row."""
    return rolling_correlation(r, T1=r.n_times)[0]


def _clamp_descending(eigenvalues: np.ndarray) -> np.ndarray:
    values = eigenvalues[..., ::-1].copy()
    if np.any(values < -NEGATIVE_EIGENVALUE_TOLERANCE):
        raise ComputationError(
            f"correlation matrix is not positive semi-definite (eigenvalue {values.min():.3e})"
        )
    values[values < 0] = 0.0
    return values


def eigendecompose(c: CorrelationMatrix | np.ndarray) -> Eigendecomposition:
    """Eigenvalues descending with eigenvectors sign-normalized (largest |entry| positive)."""
    values = np.asarray(c.values if isinstance(c, CorrelationMatrix) else c, dtype=float)
    ids = c.asset_ids if isinstance(c, CorrelationMatrix) else ()
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise DataValidationError(f"expected a square matrix, got shape {values.shape}")
    if np.max(np.abs(values - values.T)) > SYMMETRY_TOLERANCE:
        raise DataValidationError("matrix is not symmetric")
    raw_values, vectors = np.linalg.eigh(values)
    eigenvalues = _clamp_descending(raw_values)
    vectors = vectors[:, ::-1].copy()
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return Eigendecomposition(eigenvalues=eigenvalues, eigenvectors=vectors * signs, asset_ids=ids)


def explained_variance_surface(r: ReturnsPanel, T1: int = 60) -> EigenspectrumSurface:
    """Row t holds the window-t eigenvalues divided by M."""
    corr = _window_correlations(_window_blocks(r, T1))
    eigenvalues = _clamp_descending(np.linalg.eigvalsh(corr))
    return EigenspectrumSurface(
        window_end_indices=r.indices[T1 - 1 :],
        window_end_dates=r.dates[T1 - 1 :],
        ratios=eigenvalues / r.n_assets,
        collection_label=r.collection_label,
    )


def leading_ratio(surface: EigenspectrumSurface) -> np.ndarray:
    """First explained-variance ratio through time (market-mode strength)."""
    return surface.ratios[:, 0].copy()


def mean_spectrum(surface: EigenspectrumSurface, segment: tuple[int, int]) -> np.ndarray:
    """Mean explained-variance ratio per rank over the segment windows."""
    return surface.rows(*segment).mean(axis=0)


def dynamics_deviation(
    a: EigenspectrumSurface,
    b: EigenspectrumSurface,
    segment: tuple[int, int],
    k: int = 10,
) -> float:
    """Mean over segment windows of the summed top-k rank-matched ratio gaps."""
    if k < 1:
        raise DataValidationError(f"k must be positive, got {k}")
    for surface in (a, b):
        if surface.n_ranks < k:
            raise DataValidationError(
                f"surface '{surface.collection_label}' has {surface.n_ranks} ranks, need {k}"
            )
    lo, hi = segment
    rows_a, rows_b = a.rows(lo, hi), b.rows(lo, hi)
    dates_a = a.window_end_dates[lo - a.first : hi - a.first + 1]
    dates_b = b.window_end_dates[lo - b.first : hi - b.first + 1]
    if dates_a and dates_b and dates_a != dates_b:
        i = next(i for i, (x, y) in enumerate(zip(dates_a, dates_b)) if x != y)
        raise DataValidationError(
            f"window {lo + i} ends on {dates_a[i]} in '{a.collection_label}' but on "
            f"{dates_b[i]} in '{b.collection_label}'; align the panels first"
        )
    gaps = np.abs(rows_a[:, :k] - rows_b[:, :k]).sum(axis=1)
    return float(gaps.sum() / gaps.size)


def silverman_bandwidth(sample: np.ndarray) -> float:
    n = sample.size
    sigma = float(np.std(sample, ddof=1))
    q75, q25 = np.percentile(sample, [75, 25])
    iqr = float(q75 - q25)
    spread = min(sigma, iqr / 1.34) if iqr > 0 else sigma
    return max(0.9 * spread * n ** (-0.2), BANDWIDTH_FLOOR)


def gaussian_kde(sample: np.ndarray, grid: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE on [min-3h, max+3h], rescaled to unit trapezoid mass on the grid."""
    values = np.asarray(sample, dtype=float).ravel()
    if values.size < 2:
        raise DataValidationError(f"need at least 2 elements for a density, got {values.size}")
    if grid < 2:
        raise DataValidationError(f"grid must have at least 2 points, got {grid}")
    h = silverman_bandwidth(values)
    x = np.linspace(values.min() - 3 * h, values.max() + 3 * h, grid)
    density = np.zeros_like(x)
    for start in range(0, values.size, _KDE_CHUNK):
        chunk = values[start : start + _KDE_CHUNK]
        density += norm.pdf((x[:, None] - chunk[None, :]) / h).sum(axis=1)
    density /= values.size * h
    density /= trapezoid(density, x)
    return x, density


def correlation_element_density(
    cs: Sequence[CorrelationMatrix],
    segment: tuple[int, int],
    grid: int = 512,
) -> tuple[np.ndarray, np.ndarray]:
    """KDE of pooled strictly-upper-triangle correlations over the segment windows."""
    lo, hi = segment
    chosen = [c for c in cs if lo <= c.window_end_index <= hi]
    if not chosen:
        raise DataValidationError(f"segment [{lo}, {hi}] selects no correlation matrices")
    pooled = np.concatenate([c.upper_elements() for c in chosen])
    return gaussian_kde(pooled, grid)


def write_surface(surface: EigenspectrumSurface, path) -> None:
    write_frame(surface.to_frame(), path)


def load_surface(path, collection_label: str = "") -> EigenspectrumSurface:
    frame = read_frame(path, dtype={"window_end_date": str})
    if list(frame.columns[:2]) != ["window_end", "window_end_date"]:
        raise DataValidationError(f"{path}: surface CSV must start with 'window_end,window_end_date'")
    return EigenspectrumSurface(
        window_end_indices=frame["window_end"].to_numpy(dtype=np.int64),
        window_end_dates=tuple(date.fromisoformat(d) for d in frame["window_end_date"]),
        ratios=frame.iloc[:, 2:].to_numpy(dtype=float),
        collection_label=collection_label,
    )


def write_density(x: np.ndarray, density: np.ndarray, path) -> None:
    write_frame(pd.DataFrame({"x": x, "density": density}), path)


def load_density(path) -> tuple[np.ndarray, np.ndarray]:
    frame = read_frame(path)
    return frame["x"].to_numpy(dtype=float), frame["density"].to_numpy(dtype=float)


def window_range_for_dates(
    surfaces: Sequence[EigenspectrumSurface], start: date, end: date
) -> tuple[int, int]:
    """Window indices whose end date lies in [start, end], common to every surface."""
    lo, hi = None, None
    for surface in surfaces:
        ends = np.array(surface.window_end_dates, dtype="datetime64[D]")
        inside = np.flatnonzero((ends >= np.datetime64(start, "D")) & (ends <= np.datetime64(end, "D")))
        if inside.size == 0:
            raise DataValidationError(
                f"no windows of '{surface.collection_label}' end between {start} and {end}"
            )
        first = int(surface.window_end_indices[inside[0]])
        last = int(surface.window_end_indices[inside[-1]])
        lo = first if lo is None else max(lo, first)
        hi = last if hi is None else min(hi, last)
    if lo is None or hi is None or lo > hi:
        raise DataValidationError(f"surfaces share no windows between {start} and {end}")
    return lo, hi


def write_leading_ratio(surface: EigenspectrumSurface, path) -> None:
    frame = pd.DataFrame(
        {
            "window_end": surface.window_end_indices,
            "window_end_date": [d.isoformat() for d in surface.window_end_dates],
            "leading_ratio": leading_ratio(surface),
        }
    )
    write_frame(frame, path)
