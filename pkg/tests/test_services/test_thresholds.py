"""Tests for threshold tables and the on-disk threshold cache."""

import numpy as np
import pytest

from app.errors import DataValidationError, ParseError
from app.services import changepoint
from app.services.changepoint import calibrate_thresholds
from app.services.thresholds import (
    CalibrationKind,
    KSStatistic,
    ThresholdCache,
    ThresholdTable,
    cache_filename,
    load_table,
    write_table,
)


def _table(**overrides) -> ThresholdTable:
    fields = dict(
        kind=CalibrationKind.PHASE2,
        statistic=KSStatistic.RAW,
        alpha=0.05,
        replications=1000,
        seed=3,
        min_segment=5,
        start=10,
        thresholds=np.array([0.61, 0.58, 0.56]),
        tie_fractions=np.array([1.0, 0.25, 0.5]),
        horizon=12,
    )
    fields.update(overrides)
    return ThresholdTable(**fields)


def test_table_lookup_covers_start_to_tmax():
    table = _table()
    assert table.tmax == 12
    assert table.arl0 == pytest.approx(20.0)
    assert table.threshold(11) == 0.58
    with pytest.raises(DataValidationError):
        table.threshold(13)


def test_table_rejects_non_positive_thresholds():
    with pytest.raises(DataValidationError):
        _table(thresholds=np.array([0.5, 0.0, 0.4]))


def test_table_file_round_trip(tmp_path):
    table = _table()
    loaded = load_table(write_table(table, tmp_path / "t.csv"))
    np.testing.assert_array_equal(loaded.thresholds, table.thresholds)
    np.testing.assert_array_equal(loaded.tie_fractions, table.tie_fractions)
    assert loaded.meta() == table.meta()


def test_foreign_file_is_not_a_table(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("t,threshold\n1,0.5\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_table(path)


def test_cache_filename_encodes_every_key():
    name = cache_filename(
        kind="phase2", statistic="raw", n=400, alpha=0.05, replications=10000,
        seed=7, min_segment=30, horizon=200,
    )
    assert name == "phase2-raw-n400-a0.05-r10000-s7-m30-h200.csv"


def test_cache_put_then_get(tmp_path):
    cache = ThresholdCache(tmp_path)
    table = _table()
    path = cache.put(table)
    assert path.parent == tmp_path
    key = dict(
        kind="phase2", statistic="raw", n=12, alpha=0.05, replications=1000,
        seed=3, min_segment=5, horizon=12,
    )
    assert cache.get(**key).meta() == table.meta()
    assert cache.get(**{**key, "seed": 4}) is None


def test_unreadable_cache_entry_is_ignored(tmp_path):
    cache = ThresholdCache(tmp_path)
    key = dict(
        kind="phase1", statistic="raw", n=60, alpha=0.05, replications=1000,
        seed=1, min_segment=30, horizon=60,
    )
    cache.path_for(**key).write_text("garbage\n", encoding="utf-8")
    assert cache.get(**key) is None


def test_calibration_reuses_cached_table(isolated_threshold_cache, monkeypatch):
    first = calibrate_thresholds("phase1", 60, 0.05, 1000, seed=2, min_segment=20)
    assert list(isolated_threshold_cache.glob("phase1-*.csv"))

    def fail(*args):
        raise AssertionError("cache was not used")

    monkeypatch.setattr(changepoint, "_phase1_null", fail)
    second = calibrate_thresholds("phase1", 60, 0.05, 1000, seed=2, min_segment=20)
    assert second.threshold(60) == first.threshold(60)


def test_phase2_cache_key_uses_the_clamped_horizon(isolated_threshold_cache, monkeypatch):
    first = calibrate_thresholds("phase2", 30, 0.05, 1000, seed=4, min_segment=5, horizon=500)
    assert first.horizon == 30
    monkeypatch.setattr(changepoint, "_phase2_sequence", lambda *args: pytest.fail("recomputed"))
    second = calibrate_thresholds("phase2", 30, 0.05, 1000, seed=4, min_segment=5, horizon=300)
    np.testing.assert_array_equal(second.thresholds, first.thresholds)
