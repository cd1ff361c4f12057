"""Two-sample Kolmogorov-Smirnov change point detection.

Batch (phase 1) detection scans every split k of a fixed sample; sequential
(phase 2) detection monitors a stream, locates the change with the batch argmax
once the statistic crosses its threshold, and restarts right after the located
change. Thresholds are calibrated by Monte Carlo under an i.i.d. null.

Index conventions: a change index k means the change happened after the k-th
observation (1-based), so k is also the length of the pre-change piece.
"""

from __future__ import annotations

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date

import numba
import numpy as np
import pandas as pd
import structlog

from app.config import get_settings
from app.errors import DataValidationError
from app.services.returns import ReturnsPanel
from app.services.tables import read_frame, write_frame
from app.services.thresholds import CalibrationKind, KSStatistic, ThresholdCache, ThresholdTable

logger = structlog.get_logger()

DEFAULT_MIN_SEGMENT = 30
DEFAULT_REPLICATIONS = 10_000
CALIBRATION_CHUNK = 1_000
MIN_TAIL_COUNT = 10


@dataclass(frozen=True)
class BreakSet:
    asset_id: str
    indices: tuple[int, ...] = ()
    dates: tuple[date, ...] = ()

    def __post_init__(self) -> None:
        indices = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise DataValidationError(f"break indices for '{self.asset_id}' must be strictly increasing")
        if indices and indices[0] < 1:
            raise DataValidationError(f"break indices for '{self.asset_id}' must be >= 1")
        object.__setattr__(self, "indices", indices)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def is_empty(self) -> bool:
        return not self.indices


# --- kernels -----------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _split_scan(sorted_values, sorted_index, t, min_segment, scaled):
    """Max over k in [m, t-m] of the split statistic; smallest k wins ties.

    `sorted_values[:t]` is the segment in ascending order and `sorted_index[:t]`
    the positions (0-based, within the segment) of those values. ECDF gaps are
    only evaluated at the last copy of each distinct value.
    """
    best = -1.0
    best_k = -1
    for k in range(min_segment, t - min_segment + 1):
        n_b = t - k
        a = 0
        b = 0
        top = 0
        for j in range(t):
            if sorted_index[j] < k:
                a += 1
            else:
                b += 1
            if j + 1 < t and sorted_values[j + 1] == sorted_values[j]:
                continue
            gap = a * n_b - b * k
            if gap < 0:
                gap = -gap
            if gap > top:
                top = gap
        if scaled:
            stat = top / np.sqrt(float(k) * float(n_b) * float(t))
        else:
            stat = top / (float(k) * float(n_b))
        if stat > best:
            best = stat
            best_k = k
    return best, best_k


@numba.njit(cache=True, nogil=True)
def _insert_sorted(sorted_values, sorted_index, count, value, position):
    j = count
    while j > 0 and sorted_values[j - 1] > value:
        sorted_values[j] = sorted_values[j - 1]
        sorted_index[j] = sorted_index[j - 1]
        j -= 1
    sorted_values[j] = value
    sorted_index[j] = position


@numba.njit(cache=True, nogil=True)
def _max_statistics(samples, min_segment, scaled):
    n_rep, n = samples.shape
    out = np.empty(n_rep)
    for r in range(n_rep):
        order = np.argsort(samples[r], kind="mergesort")
        values = samples[r][order]
        out[r] = _split_scan(values, order.astype(np.int64), n, min_segment, scaled)[0]
    return out


@numba.njit(cache=True, nogil=True)
def _advance_paths(paths, sorted_values, sorted_index, t, min_segment, scaled, out):
    for r in range(paths.shape[0]):
        _insert_sorted(sorted_values[r], sorted_index[r], t - 1, paths[r, t - 1], t - 1)
        if t >= 2 * min_segment:
            out[r] = _split_scan(sorted_values[r], sorted_index[r], t, min_segment, scaled)[0]


@numba.njit(cache=True, nogil=True)
def _monitor(values, thresholds, tie_fractions, start, min_segment, scaled, uniforms):
    """First t with D_t above h_t; returns (t, argmax k) or (-1, -1)."""
    n = values.size
    sorted_values = np.empty(n)
    sorted_index = np.empty(n, dtype=np.int64)
    last = thresholds.size - 1
    for t in range(1, n + 1):
        _insert_sorted(sorted_values, sorted_index, t - 1, values[t - 1], t - 1)
        if t < 2 * min_segment or t < start:
            continue
        stat, k = _split_scan(sorted_values, sorted_index, t, min_segment, scaled)
        slot = min(t - start, last)
        h = thresholds[slot]
        if stat > h or (stat == h and uniforms[t - 1] < tie_fractions[slot]):
            return t, k
    return -1, -1


# --- statistic -----------------------------------------------------------------


def ks_statistic(x: Sequence[float] | np.ndarray, y: Sequence[float] | np.ndarray) -> float:
    """Sup-norm distance between the two empirical CDFs (exact sorted sweep)."""
    a = np.sort(np.asarray(x, dtype=float).ravel())
    b = np.sort(np.asarray(y, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise DataValidationError("ks_statistic needs two non-empty samples")
    points = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, points, side="right") / a.size
    cdf_b = np.searchsorted(b, points, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def split_statistic(
    x: np.ndarray, min_segment: int = DEFAULT_MIN_SEGMENT, statistic: KSStatistic | str = KSStatistic.RAW
) -> tuple[float, int]:
    """(max_k D_{k,n}, argmax k) over k in [min_segment, n - min_segment]."""
    values = np.ascontiguousarray(x, dtype=float)
    if values.size < 2 * min_segment:
        raise DataValidationError(
            f"sample of length {values.size} is shorter than 2 * min_segment = {2 * min_segment}"
        )
    order = np.argsort(values, kind="stable")
    stat, k = _split_scan(
        values[order], order.astype(np.int64), values.size, min_segment,
        KSStatistic(statistic) is KSStatistic.SCALED,
    )
    return float(stat), int(k)


# --- calibration ---------------------------------------------------------------


def _check_calibration(alpha: float, replications: int, min_segment: int) -> None:
    if not 0.0 < alpha < 1.0:
        raise DataValidationError(f"alpha must lie in (0, 1), got {alpha}")
    if replications < 1000:
        raise DataValidationError(f"replications must be >= 1000, got {replications}")
    if alpha * replications < MIN_TAIL_COUNT:
        raise DataValidationError(
            f"alpha * replications = {alpha * replications:g} < {MIN_TAIL_COUNT}; "
            "increase replications for this alpha"
        )
    if min_segment < 1:
        raise DataValidationError(f"min_segment must be positive, got {min_segment}")


def _phase1_null(
    n: int, replications: int, seed: int, min_segment: int, scaled: bool, workers: int
) -> np.ndarray:
    n_chunks = -(-replications // CALIBRATION_CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    sizes = [min(CALIBRATION_CHUNK, replications - i * CALIBRATION_CHUNK) for i in range(n_chunks)]

    def run(i: int) -> np.ndarray:
        samples = np.random.default_rng(children[i]).standard_normal((sizes[i], n))
        return _max_statistics(samples, min_segment, scaled)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return np.concatenate(list(pool.map(run, range(n_chunks))))


def _advance_all(paths, sorted_values, sorted_index, t, min_segment, scaled, out, workers) -> None:
    bounds = np.linspace(0, paths.shape[0], max(1, workers) + 1).astype(int)
    blocks = [(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]
    if len(blocks) == 1:
        _advance_paths(paths, sorted_values, sorted_index, t, min_segment, scaled, out)
        return

    def run(block: tuple[int, int]) -> None:
        a, b = block
        _advance_paths(
            paths[a:b], sorted_values[a:b], sorted_index[a:b], t, min_segment, scaled, out[a:b]
        )

    with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
        list(pool.map(run, blocks))


def _phase2_sequence(
    tmax: int,
    alpha: float,
    replications: int,
    seed: int,
    min_segment: int,
    scaled: bool,
    horizon: int,
    workers: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Conditional thresholds with surviving-path resampling.

    At each t the alarmed paths (the top alpha share of D_t) are replaced by copies
    of the prefixes of randomly chosen survivors, keeping their own future draws,
    so the population always represents streams with no prior alarm.
    """
    start = 2 * min_segment
    last = min(tmax, horizon)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    paths = rng.standard_normal((replications, last))
    sorted_values = np.empty_like(paths)
    sorted_index = np.empty(paths.shape, dtype=np.int64)
    stats = np.zeros(replications)
    target = int(round(alpha * replications))

    thresholds = np.empty(last - start + 1)
    fractions = np.empty(last - start + 1)
    for t in range(1, last + 1):
        _advance_all(paths, sorted_values, sorted_index, t, min_segment, scaled, stats, workers)
        if t < start:
            continue
        h = np.sort(stats)[::-1][target - 1]
        above = np.flatnonzero(stats > h)
        tied = np.flatnonzero(stats == h)
        need = target - above.size
        fractions[t - start] = need / tied.size
        thresholds[t - start] = h
        chosen = tied if need >= tied.size else rng.choice(tied, size=need, replace=False)
        alarmed = np.concatenate([above, chosen])
        alive = np.ones(replications, dtype=bool)
        alive[alarmed] = False
        donors = rng.choice(np.flatnonzero(alive), size=alarmed.size, replace=True)
        paths[alarmed, :t] = paths[donors, :t]
        sorted_values[alarmed, :t] = sorted_values[donors, :t]
        sorted_index[alarmed, :t] = sorted_index[donors, :t]

    if tmax > last:
        pad = tmax - last
        thresholds = np.concatenate([thresholds, np.full(pad, thresholds[-1])])
        fractions = np.concatenate([fractions, np.full(pad, fractions[-1])])
        logger.warning(
            "phase-2 thresholds extended flat beyond calibration horizon",
            horizon=last,
            tmax=tmax,
            note="conditional alarm rate falls below alpha past the horizon",
        )
    return thresholds, fractions, last


def calibrate_thresholds(
    kind: CalibrationKind | str,
    n_or_tmax: int,
    alpha: float,
    replications: int = DEFAULT_REPLICATIONS,
    *,
    seed: int,
    min_segment: int = DEFAULT_MIN_SEGMENT,
    statistic: KSStatistic | str = KSStatistic.RAW,
    horizon: int | None = None,
    workers: int | None = None,
    use_cache: bool = True,
) -> ThresholdTable:
    """Monte Carlo thresholds under an i.i.d. standard Gaussian null.

    phase1: upper-alpha quantile of max_k D_{k,n} for samples of length n.
    phase2: h_t for t = 2*min_segment .. tmax with P(D_t > h_t | no prior alarm) = alpha.
    `horizon` (default: MARKETDYN_CALIBRATION_HORIZON, else tmax) caps the simulated
    length; thresholds past a shorter horizon repeat its last value and are conservative.
    Results depend only on the arguments, never on `workers`.
    """
    kind = CalibrationKind(kind)
    statistic = KSStatistic(statistic)
    _check_calibration(alpha, replications, min_segment)
    settings = get_settings()
    workers = workers if workers is not None else settings.workers
    n = int(n_or_tmax)
    if n < 2 * min_segment:
        raise DataValidationError(f"n_or_tmax = {n} must be at least 2 * min_segment = {2 * min_segment}")
    if kind is CalibrationKind.PHASE2:
        if horizon is None:
            horizon = settings.calibration_horizon
        horizon = n if horizon is None else min(max(int(horizon), 2 * min_segment), n)
    else:
        horizon = n

    cache = ThresholdCache(settings.threshold_cache_dir) if use_cache else None
    key = dict(
        kind=kind, n=n, alpha=alpha, replications=replications, seed=seed,
        min_segment=min_segment, statistic=statistic, horizon=horizon,
    )
    if cache is not None:
        cached = cache.get(**key)
        if cached is not None:
            return cached

    scaled = statistic is KSStatistic.SCALED
    logger.info("calibrating thresholds", kind=kind.value, n=n, alpha=alpha, replications=replications)
    if kind is CalibrationKind.PHASE1:
        null = _phase1_null(n, replications, seed, min_segment, scaled, workers)
        table = ThresholdTable(
            kind=kind, statistic=statistic, alpha=alpha, replications=replications, seed=seed,
            min_segment=min_segment, start=n,
            thresholds=np.array([np.quantile(null, 1.0 - alpha)]),
            tie_fractions=np.ones(1), horizon=n,
        )
    else:
        thresholds, fractions, last = _phase2_sequence(
            n, alpha, replications, seed, min_segment, scaled, horizon, workers
        )
        table = ThresholdTable(
            kind=kind, statistic=statistic, alpha=alpha, replications=replications, seed=seed,
            min_segment=min_segment, start=2 * min_segment,
            thresholds=thresholds, tie_fractions=fractions, horizon=last,
        )
    if cache is not None:
        cache.put(table)
    return table


# --- detection -----------------------------------------------------------------


def _require_table(table: ThresholdTable, kind: CalibrationKind, min_segment: int) -> None:
    if table.kind is not kind:
        raise DataValidationError(f"expected a {kind.value} threshold table, got {table.kind.value}")
    if table.min_segment != min_segment:
        raise DataValidationError(
            f"table calibrated with min_segment={table.min_segment}, detection uses {min_segment}"
        )


def detect_batch(
    x: Sequence[float] | np.ndarray,
    thresholds: ThresholdTable,
    min_segment: int = DEFAULT_MIN_SEGMENT,
) -> int | None:
    """Argmax split k if max_k D_{k,n} exceeds h_n, else None."""
    values = np.asarray(x, dtype=float)
    _require_table(thresholds, CalibrationKind.PHASE1, min_segment)
    if values.size < 2 * min_segment:
        raise DataValidationError(
            f"sample of length {values.size} is shorter than 2 * min_segment = {2 * min_segment}"
        )
    if thresholds.start != values.size:
        raise DataValidationError(
            f"phase-1 table calibrated for n={thresholds.start}, sample has n={values.size}"
        )
    stat, k = split_statistic(values, min_segment, thresholds.statistic)
    return k if stat > thresholds.threshold(values.size) else None


def _stream_setup(
    x, thresholds: ThresholdTable, min_segment: int, seed: int | None
) -> tuple[np.ndarray, np.ndarray]:
    values = np.ascontiguousarray(x, dtype=float)
    _require_table(thresholds, CalibrationKind.PHASE2, min_segment)
    if values.size > thresholds.tmax:
        raise DataValidationError(
            f"threshold table covers segments up to {thresholds.tmax}, stream has {values.size}"
        )
    rng = np.random.default_rng(thresholds.seed if seed is None else seed)
    return values, rng.random(values.size)


def first_alarm(
    x: Sequence[float] | np.ndarray,
    thresholds: ThresholdTable,
    min_segment: int = DEFAULT_MIN_SEGMENT,
    *,
    seed: int | None = None,
) -> int | None:
    """Stream length at the first alarm without restarts, or None."""
    values, uniforms = _stream_setup(x, thresholds, min_segment, seed)
    t, _ = _monitor(
        values, thresholds.thresholds, thresholds.tie_fractions, thresholds.start,
        min_segment, thresholds.statistic is KSStatistic.SCALED, uniforms,
    )
    return int(t) if t > 0 else None


def detect_sequential(
    x: Sequence[float] | np.ndarray,
    thresholds: ThresholdTable,
    min_segment: int = DEFAULT_MIN_SEGMENT,
    *,
    seed: int | None = None,
) -> list[int]:
    """Sorted change indices (1-based) found by monitoring with restarts."""
    values, uniforms = _stream_setup(x, thresholds, min_segment, seed)
    scaled = thresholds.statistic is KSStatistic.SCALED
    found: list[int] = []
    offset = 0
    while values.size - offset >= 2 * min_segment:
        t, k = _monitor(
            values[offset:], thresholds.thresholds, thresholds.tie_fractions,
            thresholds.start, min_segment, scaled, uniforms[offset:],
        )
        if t < 0:
            break
        offset += int(k)
        found.append(offset)
    return found


def detect_panel(
    r: ReturnsPanel,
    thresholds: ThresholdTable,
    min_segment: int = DEFAULT_MIN_SEGMENT,
    *,
    workers: int | None = None,
) -> list[BreakSet]:
    """Sequential break sets for every asset column, in asset order."""
    workers = workers if workers is not None else get_settings().workers

    def run(i: int) -> BreakSet:
        local = detect_sequential(r.returns[:, i], thresholds, min_segment)
        return BreakSet(
            asset_id=r.asset_ids[i],
            indices=tuple(r.first_index + k - 1 for k in local),
            dates=tuple(r.dates[k - 1] for k in local),
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sets = list(pool.map(run, range(r.n_assets)))
    logger.info(
        "break sets detected",
        collection=r.collection_label,
        assets=r.n_assets,
        breaks=sum(len(s) for s in sets),
    )
    return sets


def write_break_sets(sets: Sequence[BreakSet], path) -> None:
    """CSV `asset_id,change_index,change_date`; an empty set is a row with blank fields."""
    rows: list[dict] = []
    for s in sets:
        if s.is_empty:
            rows.append({"asset_id": s.asset_id, "change_index": "", "change_date": ""})
        for i, idx in enumerate(s.indices):
            when = s.dates[i].isoformat() if i < len(s.dates) else ""
            rows.append({"asset_id": s.asset_id, "change_index": str(idx), "change_date": when})
    frame = pd.DataFrame(rows, columns=["asset_id", "change_index", "change_date"])
    write_frame(frame, path)


def load_break_sets(path) -> list[BreakSet]:
    frame = read_frame(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != ["asset_id", "change_index", "change_date"]:
        raise DataValidationError(f"{path}: expected columns asset_id,change_index,change_date")
    grouped: dict[str, tuple[list[int], list[date]]] = {}
    for row in frame.itertuples(index=False):
        indices, dates = grouped.setdefault(row.asset_id, ([], []))
        if row.change_index:
            indices.append(int(row.change_index))
            if row.change_date:
                dates.append(date.fromisoformat(row.change_date))
    return [
        BreakSet(asset_id=a, indices=tuple(i), dates=tuple(d)) for a, (i, d) in grouped.items()
    ]
