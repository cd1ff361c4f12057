"""Threshold tables and their on-disk cache.

Cache files are CSV with a two-line comment header:

    # marketdyn threshold table v1
    # {"kind": "phase2", "statistic": "raw", "alpha": 0.05, ...}
    t,threshold,tie_fraction
    60,0.4,1.0
    ...

Filenames encode the key, e.g. ``phase2-raw-n400-a0.05-r10000-s7-m30-h200.csv``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
import structlog

from app.errors import DataValidationError, ParseError
from app.services.tables import read_frame, write_frame

logger = structlog.get_logger()

CACHE_FORMAT = "marketdyn threshold table v1"


class CalibrationKind(str, Enum):
    PHASE1 = "phase1"
    PHASE2 = "phase2"


class KSStatistic(str, Enum):
    """`raw`: max over splits of the KS distance. `scaled`: each split's distance
    is multiplied by sqrt(k(n-k)/n) before taking the max."""

    RAW = "raw"
    SCALED = "scaled"


@dataclass(frozen=True, eq=False)
class ThresholdTable:
    """Calibrated thresholds h_t for t = start .. start + len(thresholds) - 1.

    Phase 1 tables hold a single threshold for sample length `start`. Phase 2
    tables also carry, per t, the fraction of null paths sitting exactly on h_t
    that must alarm to hit alpha; detection alarms on D_t == h_t with that probability.
    """

    kind: CalibrationKind
    statistic: KSStatistic
    alpha: float
    replications: int
    seed: int
    min_segment: int
    start: int
    thresholds: np.ndarray
    tie_fractions: np.ndarray = field(default_factory=lambda: np.ones(1))
    horizon: int = 0

    def __post_init__(self) -> None:
        thresholds = np.asarray(self.thresholds, dtype=float)
        fractions = np.asarray(self.tie_fractions, dtype=float)
        if thresholds.size == 0 or np.any(thresholds <= 0):
            raise DataValidationError("thresholds must be non-empty and positive")
        if fractions.shape != thresholds.shape:
            fractions = np.ones_like(thresholds)
        object.__setattr__(self, "kind", CalibrationKind(self.kind))
        object.__setattr__(self, "statistic", KSStatistic(self.statistic))
        object.__setattr__(self, "thresholds", thresholds)
        object.__setattr__(self, "tie_fractions", fractions)

    @property
    def tmax(self) -> int:
        return self.start + self.thresholds.size - 1

    @property
    def arl0(self) -> float:
        return 1.0 / self.alpha

    def covers(self, t: int) -> bool:
        return self.start <= t <= self.tmax

    def threshold(self, t: int) -> float:
        if not self.covers(t):
            raise DataValidationError(
                f"threshold table covers t in [{self.start}, {self.tmax}], not {t}"
            )
        return float(self.thresholds[t - self.start])

    def meta(self) -> dict:
        return {
            "kind": self.kind.value,
            "statistic": self.statistic.value,
            "alpha": self.alpha,
            "replications": self.replications,
            "seed": self.seed,
            "min_segment": self.min_segment,
            "start": self.start,
            "horizon": self.horizon,
        }


def cache_filename(
    *,
    kind: CalibrationKind | str,
    statistic: KSStatistic | str,
    n: int,
    alpha: float,
    replications: int,
    seed: int,
    min_segment: int,
    horizon: int,
) -> str:
    return (
        f"{CalibrationKind(kind).value}-{KSStatistic(statistic).value}-n{n}-a{alpha!r}"
        f"-r{replications}-s{seed}-m{min_segment}-h{horizon}.csv"
    )


class ThresholdCache:
    """Directory of calibrated tables keyed by their calibration parameters."""

    def __init__(self, directory: Path) -> None:
        self.directory = Path(directory)

    def path_for(self, **key) -> Path:
        return self.directory / cache_filename(**key)

    def get(self, **key) -> ThresholdTable | None:
        path = self.path_for(**key)
        if not path.exists():
            logger.info("threshold cache miss", file=path.name)
            return None
        try:
            table = load_table(path)
        except (ParseError, DataValidationError, ValueError) as exc:
            logger.warning("ignoring unreadable threshold cache entry", file=str(path), error=str(exc))
            return None
        logger.info("threshold cache hit", file=path.name)
        return table

    def put(self, table: ThresholdTable) -> Path:
        path = self.path_for(
            kind=table.kind,
            statistic=table.statistic,
            n=table.tmax,
            alpha=table.alpha,
            replications=table.replications,
            seed=table.seed,
            min_segment=table.min_segment,
            horizon=table.horizon,
        )
        write_table(table, path)
        return path


def write_table(table: ThresholdTable, path: Path) -> Path:
    path = Path(path)
    frame = pd.DataFrame(
        {
            "t": np.arange(table.start, table.tmax + 1),
            "threshold": table.thresholds,
            "tie_fraction": table.tie_fractions,
        }
    )
    tmp = path.with_suffix(".tmp")
    write_frame(frame, tmp)
    body = tmp.read_text(encoding="utf-8")
    header = f"# {CACHE_FORMAT}\n# {json.dumps(table.meta(), sort_keys=True)}\n"
    tmp.write_text(header + body, encoding="utf-8")
    tmp.replace(path)
    return path


def load_table(path: Path) -> ThresholdTable:
    path = Path(path)
    with path.open(encoding="utf-8") as handle:
        first = handle.readline().strip()
        second = handle.readline().strip()
    if first != f"# {CACHE_FORMAT}":
        raise ParseError(f"unsupported threshold table format {first!r}", path=str(path), row=1)
    try:
        meta = json.loads(second.removeprefix("#").strip())
    except json.JSONDecodeError as exc:
        raise ParseError("invalid table metadata", path=str(path), row=2) from exc
    frame = read_frame(path, comment="#")
    return ThresholdTable(
        kind=meta["kind"],
        statistic=meta["statistic"],
        alpha=float(meta["alpha"]),
        replications=int(meta["replications"]),
        seed=int(meta["seed"]),
        min_segment=int(meta["min_segment"]),
        start=int(meta["start"]),
        thresholds=frame["threshold"].to_numpy(dtype=float),
        tie_fractions=frame["tie_fraction"].to_numpy(dtype=float),
        horizon=int(meta["horizon"]),
    )
