"""Pytest fixtures for marketdyn tests."""

from datetime import date
from pathlib import Path

import numpy as np
import pytest

from app.config import get_settings
from app.services.ingest import PricePanel, synth_one_factor, write_panel


@pytest.fixture(autouse=True)
def isolated_threshold_cache(monkeypatch, tmp_path_factory):
    """Every test gets its own threshold cache directory."""
    cache_dir = tmp_path_factory.mktemp("threshold_cache")
    monkeypatch.setenv("MARKETDYN_CACHE", str(cache_dir))
    get_settings.cache_clear()
    yield cache_dir
    get_settings.cache_clear()


@pytest.fixture
def one_factor_panel() -> PricePanel:
    return synth_one_factor(8, 260, 0.6, 0.01, seed=11, collection_label="alpha")


@pytest.fixture
def other_panel() -> PricePanel:
    return synth_one_factor(6, 260, 0.3, 0.02, seed=12, collection_label="beta", prefix="b")


@pytest.fixture
def tiny_panel() -> PricePanel:
    prices = np.array(
        [
            [100.0, 50.0, 10.0],
            [101.0, 49.0, 10.5],
            [102.0, 51.0, 10.2],
            [100.5, 52.0, 10.1],
            [103.0, 50.5, 10.8],
        ]
    )
    dates = tuple(date(2020, 1, d) for d in (2, 3, 6, 7, 8))
    return PricePanel(asset_ids=("x", "y", "z"), dates=dates, prices=prices, collection_label="tiny")


@pytest.fixture
def write_csv(tmp_path):
    """Write raw CSV text under tmp_path and return its path."""

    def _write(name: str, text: str) -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write


@pytest.fixture
def panel_csv(tmp_path, one_factor_panel) -> Path:
    return write_panel(one_factor_panel, tmp_path / "alpha.csv")
