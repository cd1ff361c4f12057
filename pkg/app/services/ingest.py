"""Price panel ingestion, calendar alignment, period partitions and synthetic panels."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import structlog

from app.errors import DataValidationError, ParseError
from app.services.tables import write_frame

logger = structlog.get_logger()

_MISSING_TOKENS = {"", "na", "nan", "null", "none"}


class AlignmentPolicy(str, Enum):
    """How missing cells are resolved when loading a panel."""

    INTERSECT = "intersect"
    FORWARD_FILL = "forward_fill"


class Calendar(str, Enum):
    """Synthetic calendars: 7-day weeks (crypto) or 5-day weeks (equities)."""

    DAILY = "daily"
    BUSINESS = "business"


@dataclass(frozen=True, eq=False)
class PricePanel:
    """Date-aligned matrix of closing prices for one collection."""

    asset_ids: tuple[str, ...]
    dates: tuple[date, ...]
    prices: np.ndarray
    collection_label: str = ""

    def __post_init__(self) -> None:
        prices = np.array(self.prices, dtype=float)
        object.__setattr__(self, "asset_ids", tuple(str(a) for a in self.asset_ids))
        object.__setattr__(self, "dates", tuple(self.dates))
        if prices.ndim != 2 or prices.shape != (len(self.dates), len(self.asset_ids)):
            raise DataValidationError(
                f"prices shape {prices.shape} does not match "
                f"{len(self.dates)} dates x {len(self.asset_ids)} assets"
            )
        if len(set(self.asset_ids)) != len(self.asset_ids):
            raise DataValidationError("asset ids must be unique")
        for previous, current in zip(self.dates, self.dates[1:]):
            if current <= previous:
                raise DataValidationError(f"dates must be strictly increasing (at {current})")
        bad = ~np.isfinite(prices) | (prices <= 0)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise DataValidationError(
                f"price for asset '{self.asset_ids[col]}' on {self.dates[row]} "
                f"must be positive and finite, got {prices[row, col]!r}"
            )
        prices.setflags(write=False)
        object.__setattr__(self, "prices", prices)

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_assets(self) -> int:
        return len(self.asset_ids)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.prices, columns=list(self.asset_ids))
        frame.insert(0, "date", [d.isoformat() for d in self.dates])
        return frame

    def select_dates(self, keep: Iterable[date]) -> PricePanel:
        wanted = set(keep)
        rows = [i for i, d in enumerate(self.dates) if d in wanted]
        return PricePanel(
            asset_ids=self.asset_ids,
            dates=tuple(self.dates[i] for i in rows),
            prices=self.prices[rows],
            collection_label=self.collection_label,
        )

    def select_assets(self, order: Sequence[str]) -> PricePanel:
        index = {a: i for i, a in enumerate(self.asset_ids)}
        cols = [index[a] for a in order]
        return PricePanel(
            asset_ids=tuple(order),
            dates=self.dates,
            prices=self.prices[:, cols],
            collection_label=self.collection_label,
        )


@dataclass(frozen=True)
class PeriodSegment:
    label: str
    start_index: int
    end_index: int

    @property
    def size(self) -> int:
        return self.end_index - self.start_index + 1


@dataclass(frozen=True)
class PeriodPartition:
    """Named, non-overlapping inclusive index ranges over panel dates 1..T."""

    segments: tuple[PeriodSegment, ...]
    n_dates: int

    def __post_init__(self) -> None:
        labels = [s.label for s in self.segments]
        if len(set(labels)) != len(labels):
            raise DataValidationError("partition labels must be unique")
        ordered = sorted(self.segments, key=lambda s: s.start_index)
        for seg in ordered:
            if not 1 <= seg.start_index <= seg.end_index <= self.n_dates:
                raise DataValidationError(
                    f"segment '{seg.label}' [{seg.start_index}, {seg.end_index}] "
                    f"outside 1..{self.n_dates}"
                )
        for left, right in zip(ordered, ordered[1:]):
            if right.start_index <= left.end_index:
                raise DataValidationError(f"segments '{left.label}' and '{right.label}' overlap")

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.segments]

    def get(self, label: str) -> PeriodSegment:
        for seg in self.segments:
            if seg.label == label:
                return seg
        raise DataValidationError(f"unknown partition segment '{label}' (have {self.labels})")

    def window_range(self, label: str, first: int, last: int) -> tuple[int, int]:
        """Return-axis window indices whose end date falls inside the segment.

        Window t ends on panel date t+1, so the segment [s, e] maps to [s-1, e-1],
        clipped to the available windows [first, last].
        """
        seg = self.get(label)
        lo = max(seg.start_index - 1, first)
        hi = min(seg.end_index - 1, last)
        if lo > hi:
            raise DataValidationError(
                f"segment '{label}' contains no windows in [{first}, {last}]"
            )
        return lo, hi


def _as_date(value: Any) -> date:
    if isinstance(value, pd.Timestamp):
        return value.date()
    if isinstance(value, date):
        return value
    try:
        return date.fromisoformat(str(value).strip())
    except ValueError as exc:
        raise DataValidationError(f"invalid ISO date: {value!r}") from exc


def load_panel(
    csv_path: str | Path,
    alignment_policy: AlignmentPolicy | str = AlignmentPolicy.FORWARD_FILL,
    collection_label: str | None = None,
) -> PricePanel:
    """Load a `date,<asset_1>,...` CSV into a validated PricePanel."""
    path = Path(csv_path)
    policy = AlignmentPolicy(alignment_policy)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")

    try:
        raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise ParseError("file is empty", path=str(path)) from exc
    except pd.errors.ParserError as exc:
        raise ParseError(str(exc), path=str(path)) from exc

    header = [str(h).strip() for h in raw.iloc[0].tolist()]
    if not header or header[0].lower() != "date":
        raise ParseError("header must start with 'date'", path=str(path), row=1)
    asset_ids = header[1:]
    if not asset_ids:
        raise ParseError("header names no assets", path=str(path), row=1)
    if len(set(asset_ids)) != len(asset_ids) or any(not a for a in asset_ids):
        raise ParseError("asset ids must be unique and non-empty", path=str(path), row=1)

    body = raw.iloc[1:].reset_index(drop=True)
    if body.empty:
        raise ParseError("no data rows", path=str(path))
    # empty cells read as "", absent trailing fields as NaN
    short = body.isna().any(axis=1).to_numpy()
    if short.any():
        i = int(np.flatnonzero(short)[0])
        raise ParseError(
            f"expected {len(header)} fields, found {int(body.iloc[i].notna().sum())}",
            path=str(path),
            row=i + 2,
        )

    dates: list[date] = []
    values = np.full((len(body), len(asset_ids)), np.nan)
    for i, row in enumerate(body.itertuples(index=False)):
        row_number = i + 2
        try:
            dates.append(date.fromisoformat(str(row[0]).strip()))
        except ValueError as exc:
            raise ParseError(f"invalid date {row[0]!r}", path=str(path), row=row_number) from exc
        for j, cell in enumerate(row[1:]):
            text = str(cell).strip()
            if text.lower() in _MISSING_TOKENS:
                continue
            try:
                number = float(text)
            except ValueError as exc:
                raise ParseError(
                    f"non-numeric value {text!r} for asset '{asset_ids[j]}'",
                    path=str(path),
                    row=row_number,
                ) from exc
            if not np.isfinite(number) or number <= 0:
                raise DataValidationError(
                    f"non-positive or non-finite price {text!r} for asset "
                    f"'{asset_ids[j]}' on {dates[-1]}"
                )
            values[i, j] = number

    frame = pd.DataFrame(values, columns=asset_ids, index=pd.Index(dates, name="date"))
    if frame.index.has_duplicates:
        dup = frame.index[frame.index.duplicated()][0]
        raise DataValidationError(f"duplicate date {dup} in {path}")
    frame = frame.sort_index(kind="stable")

    if policy is AlignmentPolicy.FORWARD_FILL:
        filled = frame.ffill()
        leading = filled.isna()
        if leading.to_numpy().any():
            row, col = np.argwhere(leading.to_numpy())[0]
            raise DataValidationError(
                f"asset '{asset_ids[col]}' has no value to forward-fill from on {filled.index[row]}"
            )
        frame = filled
    else:
        frame = frame.dropna(how="any")
        if frame.empty:
            raise DataValidationError(f"no complete rows in {path} under intersect policy")

    label = collection_label if collection_label is not None else path.stem
    panel = PricePanel(
        asset_ids=tuple(asset_ids),
        dates=tuple(frame.index),
        prices=frame.to_numpy(dtype=float),
        collection_label=label,
    )
    logger.info(
        "panel loaded",
        path=str(path),
        collection=label,
        n_dates=panel.n_dates,
        n_assets=panel.n_assets,
        policy=policy.value,
    )
    return panel


def write_panel(panel: PricePanel, path: str | Path) -> Path:
    """Write the canonical CSV form of a panel."""
    return write_frame(panel.to_frame(), Path(path))


def align_panels(a: PricePanel, b: PricePanel) -> tuple[PricePanel, PricePanel]:
    """Restrict both panels to their common dates."""
    common = set(a.dates) & set(b.dates)
    if not common:
        raise DataValidationError(
            f"panels '{a.collection_label}' and '{b.collection_label}' share no dates"
        )
    return a.select_dates(common), b.select_dates(common)


def make_partition(
    panel: PricePanel,
    boundaries: Sequence[tuple[str, Any, Any]] | Sequence[Any],
) -> PeriodPartition:
    """Map (label, start_date, end_date) intervals onto inclusive panel indices (1-based).

    Interval ends absent from the panel snap to the nearest panel date inside the interval.
    """
    first, last = panel.dates[0], panel.dates[-1]
    intervals: list[tuple[str, date, date]] = []
    for item in boundaries:
        if isinstance(item, tuple | list):
            label, start, end = item
        else:
            label, start, end = item.label, item.start, item.end
        start_d, end_d = _as_date(start), _as_date(end)
        if start_d > end_d:
            raise DataValidationError(f"segment '{label}' has start {start_d} after end {end_d}")
        if start_d < first or end_d > last:
            raise DataValidationError(
                f"segment '{label}' [{start_d}, {end_d}] outside panel range [{first}, {last}]"
            )
        intervals.append((str(label), start_d, end_d))

    ordered = sorted(intervals, key=lambda x: x[1])
    for (l_label, _, l_end), (r_label, r_start, _) in zip(ordered, ordered[1:]):
        if r_start <= l_end:
            raise DataValidationError(f"segments '{l_label}' and '{r_label}' overlap")

    dates = np.array(panel.dates, dtype="datetime64[D]")
    segments: list[PeriodSegment] = []
    for label, start_d, end_d in intervals:
        inside = np.flatnonzero(
            (dates >= np.datetime64(start_d, "D")) & (dates <= np.datetime64(end_d, "D"))
        )
        if inside.size == 0:
            raise DataValidationError(f"segment '{label}' contains no panel dates")
        segments.append(PeriodSegment(label, int(inside[0]) + 1, int(inside[-1]) + 1))
    return PeriodPartition(segments=tuple(segments), n_dates=panel.n_dates)


def _calendar_dates(start: date, periods: int, calendar: Calendar | str) -> tuple[date, ...]:
    freq = "B" if Calendar(calendar) is Calendar.BUSINESS else "D"
    return tuple(d.date() for d in pd.date_range(start=start, periods=periods, freq=freq))


def _factor_returns(
    rng: np.random.Generator, n_assets: int, n_returns: int, beta: float, sigma: float
) -> np.ndarray:
    if not 0.0 <= beta < 1.0:
        raise DataValidationError(f"beta must lie in [0, 1), got {beta}")
    if sigma <= 0:
        raise DataValidationError(f"sigma_idio must be positive, got {sigma}")
    factor = rng.standard_normal(n_returns)
    noise = rng.standard_normal((n_returns, n_assets))
    return sigma * (beta * factor[:, None] + np.sqrt(1.0 - beta**2) * noise)


def _prices_from_returns(returns: np.ndarray, initial: float = 100.0) -> np.ndarray:
    log_paths = np.vstack([np.zeros((1, returns.shape[1])), np.cumsum(returns, axis=0)])
    return initial * np.exp(log_paths)


def _synthetic_ids(n_assets: int, prefix: str) -> tuple[str, ...]:
    return tuple(f"{prefix}{i + 1:03d}" for i in range(n_assets))


def synth_one_factor(
    M: int,
    T: int,
    beta: float,
    sigma_idio: float,
    seed: int,
    *,
    collection_label: str = "synthetic",
    calendar: Calendar | str = Calendar.DAILY,
    start: date = date(2018, 1, 3),
    prefix: str = "a",
) -> PricePanel:
    """One-factor panel: returns sigma*(beta*f + sqrt(1-beta^2)*eps), prices start at 100."""
    if M < 2 or T < 2:
        raise DataValidationError(f"need M >= 2 and T >= 2, got M={M}, T={T}")
    rng = np.random.default_rng(seed)
    returns = _factor_returns(rng, M, T - 1, beta, sigma_idio)
    return PricePanel(
        asset_ids=_synthetic_ids(M, prefix),
        dates=_calendar_dates(start, T, calendar),
        prices=_prices_from_returns(returns),
        collection_label=collection_label,
    )


def synth_regimes(
    M: int,
    regimes: Sequence[tuple[int, float, float]],
    seed: int,
    *,
    collection_label: str = "synthetic",
    calendar: Calendar | str = Calendar.DAILY,
    start: date = date(2018, 1, 3),
    prefix: str = "a",
) -> PricePanel:
    """Piecewise one-factor panel; each regime is (n_returns, beta, sigma)."""
    if M < 2 or not regimes:
        raise DataValidationError("need M >= 2 and at least one regime")
    rng = np.random.default_rng(seed)
    blocks = []
    for length, beta, sigma in regimes:
        if length < 1:
            raise DataValidationError(f"regime length must be positive, got {length}")
        blocks.append(_factor_returns(rng, M, int(length), float(beta), float(sigma)))
    returns = np.vstack(blocks)
    return PricePanel(
        asset_ids=_synthetic_ids(M, prefix),
        dates=_calendar_dates(start, returns.shape[0] + 1, calendar),
        prices=_prices_from_returns(returns),
        collection_label=collection_label,
    )
