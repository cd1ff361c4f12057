"""Pairwise distance structures over assets.

Trajectory, breaks (set semi-metric), extremes (Wasserstein on tails) and
total-returns matrices, plus the affinity transform and the normalized norm.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import structlog
from scipy.spatial.distance import pdist, squareform
from scipy.stats import wasserstein_distance

from app.errors import ComputationError, DataValidationError, UndefinedDistanceError
from app.services.changepoint import BreakSet
from app.services.ingest import PricePanel
from app.services.tables import read_matrix, write_matrix

logger = structlog.get_logger()

SYMMETRY_TOLERANCE = 1e-12
MIN_TAIL_SAMPLE = 10


class DistanceKind(str, Enum):
    TRAJECTORY = "trajectory"
    BREAKS = "breaks"
    EXTREMES = "extremes"
    RETURNS = "returns"


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    ids: tuple[str, ...]
    values: np.ndarray
    kind: DistanceKind

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        _check_square(values, len(self.ids))
        if np.max(np.abs(values - values.T), initial=0.0) > SYMMETRY_TOLERANCE:
            raise DataValidationError(f"{DistanceKind(self.kind).value} matrix is not symmetric")
        if np.any(np.diag(values) != 0):
            raise DataValidationError(f"{DistanceKind(self.kind).value} matrix diagonal must be zero")
        if np.any(values < 0):
            raise DataValidationError(f"{DistanceKind(self.kind).value} matrix has negative entries")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kind", DistanceKind(self.kind))

    @property
    def size(self) -> int:
        return len(self.ids)

    def permuted(self, order: Sequence[int]) -> DistanceMatrix:
        order = list(order)
        return DistanceMatrix(
            ids=tuple(self.ids[i] for i in order),
            values=self.values[np.ix_(order, order)],
            kind=self.kind,
        )


@dataclass(frozen=True, eq=False)
class AffinityMatrix:
    ids: tuple[str, ...]
    values: np.ndarray
    kind: DistanceKind


@dataclass(frozen=True, eq=False)
class TailMeasure:
    """Lower and upper order-statistic tails of one return sample."""

    asset_id: str
    lower_tail: np.ndarray
    upper_tail: np.ndarray
    lower: float
    upper: float
    tail_fraction: float = 0.1

    @property
    def pooled(self) -> np.ndarray:
        return np.concatenate([self.lower_tail, self.upper_tail])


def _check_square(values: np.ndarray, n: int) -> None:
    if values.ndim != 2 or values.shape != (n, n):
        raise DataValidationError(f"expected a {n}x{n} matrix, got shape {values.shape}")


def _symmetric_zero_diagonal(values: np.ndarray) -> np.ndarray:
    upper = np.triu(values, k=1)
    return upper + upper.T


def trajectory_matrix(panel: PricePanel) -> DistanceMatrix:
    """L1 distance between price trajectories normalized to unit L1 norm."""
    trajectories = panel.prices / panel.prices.sum(axis=0)
    if panel.n_assets < 2:
        values = np.zeros((panel.n_assets, panel.n_assets))
    else:
        values = squareform(pdist(trajectories.T, metric="cityblock"))
    return DistanceMatrix(ids=panel.asset_ids, values=values, kind=DistanceKind.TRAJECTORY)


def _mean_minimal(source: np.ndarray, target: np.ndarray) -> float:
    return float(np.abs(source[:, None] - target[None, :]).min(axis=1).mean())


def mj_semimetric(a: BreakSet | Sequence[int], b: BreakSet | Sequence[int]) -> float:
    """Half-sum of the two mean minimal distances between the index sets."""
    xa = np.asarray(a.indices if isinstance(a, BreakSet) else a, dtype=float)
    xb = np.asarray(b.indices if isinstance(b, BreakSet) else b, dtype=float)
    if xa.size == 0 or xb.size == 0:
        raise UndefinedDistanceError("semi-metric is undefined for an empty break set")
    return 0.5 * (_mean_minimal(xb, xa) + _mean_minimal(xa, xb))


def breaks_matrix(sets: Sequence[BreakSet]) -> DistanceMatrix:
    """Pairwise semi-metric; pairs with an empty set get the largest defined distance."""
    if len(sets) < 2:
        raise DataValidationError("breaks matrix needs at least two break sets")
    n = len(sets)
    values = np.zeros((n, n))
    undefined: list[tuple[int, int]] = []
    for i in range(n):
        for j in range(i + 1, n):
            try:
                values[i, j] = mj_semimetric(sets[i], sets[j])
            except UndefinedDistanceError:
                undefined.append((i, j))
    if undefined:
        empty = [s.asset_id for s in sets if s.is_empty]
        if len(empty) == n:
            raise ComputationError("every break set is empty; breaks matrix is undefined")
        if len(undefined) == n * (n - 1) // 2:
            raise ComputationError(
                "fewer than two non-empty break sets; no pairwise distance is defined"
            )
        fill = values.max()
        for i, j in undefined:
            values[i, j] = fill
        logger.warning(
            "empty break sets filled with the largest pairwise distance",
            assets=empty,
            fill=float(fill),
        )
    ids = tuple(s.asset_id for s in sets)
    return DistanceMatrix(ids=ids, values=_symmetric_zero_diagonal(values), kind=DistanceKind.BREAKS)


def tail_size(n: int, tail_fraction: float) -> int:
    # rounding guards products like 0.1 * 30 = 3.0000000000000004
    return max(1, math.ceil(round(tail_fraction * n, 9)))


def tail_measure(
    returns: Sequence[float] | np.ndarray, tail_fraction: float = 0.1, asset_id: str = ""
) -> TailMeasure:
    """Empirical tails: the ceil(fraction*n) smallest and largest observations."""
    sample = np.sort(np.asarray(returns, dtype=float).ravel())
    if sample.size < MIN_TAIL_SAMPLE:
        raise DataValidationError(
            f"tail measure needs at least {MIN_TAIL_SAMPLE} observations, got {sample.size}"
        )
    if not 0.0 < tail_fraction < 0.5:
        raise DataValidationError(f"tail_fraction must lie in (0, 0.5), got {tail_fraction}")
    size = tail_size(sample.size, tail_fraction)
    return TailMeasure(
        asset_id=asset_id,
        lower_tail=sample[:size].copy(),
        upper_tail=sample[-size:].copy(),
        lower=float(np.quantile(sample, tail_fraction)),
        upper=float(np.quantile(sample, 1.0 - tail_fraction)),
        tail_fraction=tail_fraction,
    )


def wasserstein_tails(a: TailMeasure, b: TailMeasure, renormalize: bool = True) -> float:
    """First Wasserstein distance between the pooled tails of two measures.

    With `renormalize=False` both tails keep their nominal mass 2*tail_fraction,
    which scales the distance by that mass.
    """
    if not math.isclose(a.tail_fraction, b.tail_fraction):
        raise DataValidationError("tail measures must share the same tail fraction")
    distance = float(wasserstein_distance(a.pooled, b.pooled))
    if renormalize:
        return distance
    return distance * 2.0 * a.tail_fraction


def extremes_matrix(measures: Sequence[TailMeasure], renormalize: bool = True) -> DistanceMatrix:
    n = len(measures)
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = wasserstein_tails(measures[i], measures[j], renormalize)
    ids = tuple(m.asset_id for m in measures)
    return DistanceMatrix(ids=ids, values=_symmetric_zero_diagonal(values), kind=DistanceKind.EXTREMES)


def returns_matrix(z: Sequence[float] | np.ndarray, ids: Sequence[str] | None = None) -> DistanceMatrix:
    """|z_i - z_j| over total returns."""
    totals = np.asarray(z, dtype=float).ravel()
    if totals.size < 2:
        raise DataValidationError("returns matrix needs at least two assets")
    names = tuple(ids) if ids is not None else tuple(str(i + 1) for i in range(totals.size))
    values = np.abs(totals[:, None] - totals[None, :])
    return DistanceMatrix(ids=names, values=values, kind=DistanceKind.RETURNS)


def to_affinity(d: DistanceMatrix) -> AffinityMatrix:
    """A = 1 - D / max(D) with an exact unit diagonal."""
    top = float(d.values.max(initial=0.0))
    if top <= 0:
        raise ComputationError(f"{d.kind.value} matrix is all zero; affinity is undefined")
    values = np.clip(1.0 - d.values / top, 0.0, 1.0)
    np.fill_diagonal(values, 1.0)
    return AffinityMatrix(ids=d.ids, values=values, kind=d.kind)


def normalized_norm(d: DistanceMatrix) -> float:
    """Frobenius norm over all entries divided by n."""
    return float(np.linalg.norm(d.values, "fro") / d.size)


def combined_ids(label: str, ids: Sequence[str]) -> list[str]:
    return [f"{label}:{asset}" for asset in ids]


def write_distance(matrix: DistanceMatrix | AffinityMatrix, path: Path) -> Path:
    """Matrix CSV plus a `<file>.meta.json` sidecar holding kind and role."""
    path = Path(path)
    write_matrix(list(matrix.ids), matrix.values, path)
    role = "affinity" if isinstance(matrix, AffinityMatrix) else "distance"
    meta = {"kind": matrix.kind.value, "role": role, "size": len(matrix.ids)}
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_distance(path: Path) -> DistanceMatrix | AffinityMatrix:
    path = Path(path)
    ids, values = read_matrix(path)
    sidecar = path.with_name(path.name + ".meta.json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    kind = DistanceKind(meta.get("kind", DistanceKind.TRAJECTORY.value))
    if meta.get("role") == "affinity":
        return AffinityMatrix(ids=tuple(ids), values=values, kind=kind)
    return DistanceMatrix(ids=tuple(ids), values=values, kind=kind)
