"""Log returns, standardized returns, total returns and rolling risk-adjusted returns."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from app.errors import ComputationError, DataValidationError
from app.services.ingest import PricePanel
from app.services.tables import read_frame, write_frame


@dataclass(frozen=True, eq=False)
class ReturnsPanel:
    """(T-1) x M log returns; return t is stamped with the later panel date."""

    asset_ids: tuple[str, ...]
    dates: tuple[date, ...]
    returns: np.ndarray
    collection_label: str = ""
    # 1-based position of the first row on the return axis of the source panel
    first_index: int = 1

    def __post_init__(self) -> None:
        values = np.array(self.returns, dtype=float)
        if values.ndim != 2 or values.shape != (len(self.dates), len(self.asset_ids)):
            raise DataValidationError(
                f"returns shape {values.shape} inconsistent with "
                f"{len(self.dates)} dates x {len(self.asset_ids)} assets"
            )
        if not np.isfinite(values).all():
            raise DataValidationError("returns must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "returns", values)
        object.__setattr__(self, "asset_ids", tuple(self.asset_ids))
        object.__setattr__(self, "dates", tuple(self.dates))

    @property
    def n_times(self) -> int:
        return self.returns.shape[0]

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]

    @property
    def indices(self) -> np.ndarray:
        """1-based return-axis index of each row."""
        return np.arange(self.first_index, self.first_index + self.n_times)

    def rows(self, lo: int, hi: int) -> ReturnsPanel:
        """Rows with return-axis index in [lo, hi] (inclusive)."""
        last = self.first_index + self.n_times - 1
        if not self.first_index <= lo <= hi <= last:
            raise DataValidationError(
                f"index range [{lo}, {hi}] outside returns domain [{self.first_index}, {last}]"
            )
        a, b = lo - self.first_index, hi - self.first_index + 1
        return ReturnsPanel(
            asset_ids=self.asset_ids,
            dates=self.dates[a:b],
            returns=self.returns[a:b],
            collection_label=self.collection_label,
            first_index=lo,
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.returns, columns=list(self.asset_ids))
        frame.insert(0, "date", [d.isoformat() for d in self.dates])
        frame.insert(0, "index", self.indices)
        return frame


@dataclass(frozen=True, eq=False)
class RiskAdjustedSeries:
    """Trailing-window return sums divided by the window's population sigma."""

    asset_ids: tuple[str, ...]
    time_indices: np.ndarray
    dates: tuple[date, ...]
    values: np.ndarray
    window: int = 61
    collection_label: str = ""


def log_returns(panel: PricePanel) -> ReturnsPanel:
    """Element (t, i) = ln(p_i(t) / p_i(t-1))."""
    if panel.n_dates < 2:
        raise DataValidationError("need at least two dates to form returns")
    logs = np.log(panel.prices)
    return ReturnsPanel(
        asset_ids=panel.asset_ids,
        dates=panel.dates[1:],
        returns=np.diff(logs, axis=0),
        collection_label=panel.collection_label,
    )


def standardize(r: ReturnsPanel, window: tuple[int, int] | None = None) -> ReturnsPanel:
    """Zero mean, unit population sigma per column over the window.

    The result holds the window rows only; without a window the whole panel is used.
    """
    source = r.rows(*window) if window is not None else r
    degenerate = np.flatnonzero(np.ptp(source.returns, axis=0) == 0)
    if degenerate.size:
        raise ComputationError(
            f"asset '{source.asset_ids[degenerate[0]]}' has zero variance over the window"
        )
    centered = source.returns - source.returns.mean(axis=0)
    sigma = np.sqrt((centered**2).mean(axis=0))
    return ReturnsPanel(
        asset_ids=source.asset_ids,
        dates=source.dates,
        returns=centered / sigma,
        collection_label=source.collection_label,
        first_index=source.first_index,
    )


def total_returns(r: ReturnsPanel) -> np.ndarray:
    """Per-asset sum of log returns (ln of last over first price)."""
    return r.returns.sum(axis=0)


def rolling_risk_adjusted(r: ReturnsPanel, window: int = 61) -> RiskAdjustedSeries:
    """kappa_i(t) = sum of returns t-window+1..t over their population sigma."""
    if window < 2:
        raise DataValidationError(f"risk-adjusted window must be >= 2, got {window}")
    if r.n_times < window:
        raise DataValidationError(
            f"need at least {window} returns for the risk-adjusted window, got {r.n_times}"
        )
    # (W, M, window)
    blocks = sliding_window_view(r.returns, window, axis=0)
    sums = blocks.sum(axis=2)
    zero = np.argwhere(np.ptp(blocks, axis=2) == 0)
    if zero.size:
        t, i = zero[0]
        raise ComputationError(
            f"zero return volatility for asset '{r.asset_ids[i]}' "
            f"in window ending {r.dates[t + window - 1]}"
        )
    centered = blocks - blocks.mean(axis=2, keepdims=True)
    sigma = np.sqrt((centered**2).mean(axis=2))
    return RiskAdjustedSeries(
        asset_ids=r.asset_ids,
        time_indices=r.indices[window - 1 :],
        dates=r.dates[window - 1 :],
        values=sums / sigma,
        window=window,
        collection_label=r.collection_label,
    )


def write_returns(r: ReturnsPanel, path) -> None:
    write_frame(r.to_frame(), path)


def load_returns(path, collection_label: str = "") -> ReturnsPanel:
    frame = read_frame(path, dtype={"date": str})
    if list(frame.columns[:2]) != ["index", "date"]:
        raise DataValidationError(f"{path}: returns CSV must start with 'index,date'")
    indices = frame["index"].to_numpy(dtype=int)
    return ReturnsPanel(
        asset_ids=tuple(str(c) for c in frame.columns[2:]),
        dates=tuple(date.fromisoformat(d) for d in frame["date"]),
        returns=frame.iloc[:, 2:].to_numpy(dtype=float),
        collection_label=collection_label,
        first_index=int(indices[0]) if indices.size else 1,
    )
