"""Tests for trajectory, breaks, extremes and returns distance matrices."""

import json
import math
from datetime import date

import numpy as np
import pytest
from scipy.stats import wasserstein_distance

from app.errors import ComputationError, DataValidationError, UndefinedDistanceError
from app.services.changepoint import BreakSet
from app.services.distances import (
    AffinityMatrix,
    DistanceKind,
    DistanceMatrix,
    TailMeasure,
    breaks_matrix,
    combined_ids,
    extremes_matrix,
    load_distance,
    mj_semimetric,
    normalized_norm,
    returns_matrix,
    tail_measure,
    tail_size,
    to_affinity,
    trajectory_matrix,
    wasserstein_tails,
    write_distance,
)
from app.services.ingest import PricePanel


def _tails(values, fraction=0.25, asset_id="") -> TailMeasure:
    values = np.sort(np.asarray(values, dtype=float))
    half = values.size // 2
    return TailMeasure(
        asset_id=asset_id,
        lower_tail=values[:half],
        upper_tail=values[half:],
        lower=float(values[half - 1]),
        upper=float(values[half]),
        tail_fraction=fraction,
    )


def test_scaled_trajectories_are_at_zero_distance(tiny_panel):
    doubled = PricePanel(
        asset_ids=("x", "x2"),
        dates=tiny_panel.dates,
        prices=np.column_stack([tiny_panel.prices[:, 0], 2 * tiny_panel.prices[:, 0]]),
    )
    d = trajectory_matrix(doubled)
    assert d.values[0, 1] == pytest.approx(0.0, abs=1e-15)


def test_trajectory_distance_hand_example():
    panel = PricePanel(
        asset_ids=("flat", "rise"),
        dates=(date(2020, 1, 1), date(2020, 1, 2)),
        prices=np.array([[1.0, 1.0], [1.0, 3.0]]),
    )
    d = trajectory_matrix(panel)
    assert d.values[0, 1] == pytest.approx(0.5)
    assert d.kind is DistanceKind.TRAJECTORY


def test_trajectory_matrix_matches_direct_evaluation(one_factor_panel):
    d = trajectory_matrix(one_factor_panel)
    p = one_factor_panel.prices / one_factor_panel.prices.sum(axis=0)
    for i, j in [(0, 1), (2, 7), (5, 3)]:
        assert d.values[i, j] == pytest.approx(np.abs(p[:, i] - p[:, j]).sum(), abs=1e-14)
    assert np.all(d.values <= 2.0)


def test_semimetric_of_equal_sets_is_zero():
    assert mj_semimetric([3, 9, 40], [3, 9, 40]) == 0.0


def test_semimetric_singletons_is_index_gap():
    assert mj_semimetric([0], [10]) == 10.0


def test_semimetric_hand_example():
    assert mj_semimetric([0, 10], [5]) == 5.0


def test_semimetric_of_empty_set_is_undefined():
    with pytest.raises(UndefinedDistanceError):
        mj_semimetric(BreakSet("a"), BreakSet("b", (4,)))


def test_breaks_matrix_of_singletons():
    d = breaks_matrix([BreakSet("a", (1,)), BreakSet("b", (2,)), BreakSet("c", (3,))])
    np.testing.assert_array_equal(d.values, [[0, 1, 2], [1, 0, 1], [2, 1, 0]])


def test_breaks_matrix_of_identical_sets_is_zero():
    sets = [BreakSet(name, (10, 50)) for name in "abc"]
    assert not breaks_matrix(sets).values.any()


def test_breaks_matrix_fills_empty_sets_with_largest_distance():
    d = breaks_matrix([BreakSet("a", (1,)), BreakSet("b", (9,)), BreakSet("quiet")])
    assert d.values[0, 1] == 8.0
    assert d.values[0, 2] == d.values[1, 2] == 8.0


def test_breaks_matrix_without_defined_pairs_is_an_error():
    with pytest.raises(ComputationError):
        breaks_matrix([BreakSet("a"), BreakSet("b")])
    with pytest.raises(ComputationError):
        breaks_matrix([BreakSet("a", (4,)), BreakSet("b"), BreakSet("c")])


def test_tail_measure_of_one_to_hundred():
    measure = tail_measure(np.arange(1, 101), 0.1, "u")
    np.testing.assert_array_equal(measure.lower_tail, np.arange(1, 11))
    np.testing.assert_array_equal(measure.upper_tail, np.arange(91, 101))
    assert measure.lower == pytest.approx(np.quantile(np.arange(1, 101), 0.1))


def test_tail_measure_of_symmetric_sample_is_symmetric():
    half = np.random.default_rng(0).exponential(size=50)
    measure = tail_measure(np.concatenate([half, -half]))
    assert measure.lower == pytest.approx(-measure.upper, abs=1e-12)


def test_tail_size_rounds_up_without_float_noise():
    assert tail_size(30, 0.1) == 3
    assert tail_size(31, 0.1) == 4


def test_tail_measure_needs_ten_observations():
    with pytest.raises(DataValidationError):
        tail_measure(np.arange(9.0))


def test_wasserstein_of_equal_tails_is_zero():
    m = tail_measure(np.random.default_rng(1).normal(size=200))
    assert wasserstein_tails(m, m) == 0.0


def test_wasserstein_between_point_masses_is_their_gap():
    assert wasserstein_tails(_tails(np.zeros(4)), _tails(np.ones(4))) == pytest.approx(1.0)


def test_wasserstein_equal_size_tails_use_order_statistics():
    a, b = _tails([-2, -1, 1, 2]), _tails([-3, -2, 2, 3])
    assert wasserstein_tails(a, b) == pytest.approx(1.0)
    # CDF-integral oracle on a fine grid
    grid = np.linspace(-4, 4, 80001)
    cdf_a = np.searchsorted(np.sort(a.pooled), grid, side="right") / 4
    cdf_b = np.searchsorted(np.sort(b.pooled), grid, side="right") / 4
    assert np.abs(cdf_a - cdf_b).sum() * (grid[1] - grid[0]) == pytest.approx(1.0, abs=1e-3)


def test_unnormalized_tails_scale_by_tail_mass():
    rng = np.random.default_rng(2)
    a, b = tail_measure(rng.normal(size=100)), tail_measure(rng.standard_t(3, size=100))
    expected = wasserstein_distance(a.pooled, b.pooled)
    assert wasserstein_tails(a, b) == pytest.approx(expected)
    assert wasserstein_tails(a, b, renormalize=False) == pytest.approx(0.2 * expected)


def test_extremes_matrix_is_a_valid_distance_matrix():
    rng = np.random.default_rng(3)
    measures = [tail_measure(rng.normal(scale=s, size=150), asset_id=f"a{s}") for s in (1, 2, 3)]
    d = extremes_matrix(measures)
    assert d.ids == ("a1", "a2", "a3")
    assert d.values[0, 2] > d.values[0, 1] > 0


def test_tail_mass_choice_leaves_affinities_unchanged():
    rng = np.random.default_rng(4)
    measures = [tail_measure(rng.standard_t(df, size=120), asset_id=f"t{df}") for df in (2, 4, 8, 30)]
    full = extremes_matrix(measures)
    raw = extremes_matrix(measures, renormalize=False)
    np.testing.assert_allclose(raw.values, 0.2 * full.values, rtol=1e-12)
    np.testing.assert_allclose(to_affinity(raw).values, to_affinity(full).values, atol=1e-12)


def test_returns_matrix_arithmetic():
    d = returns_matrix([0.0, 1.0, 3.0])
    assert (d.values[0, 2], d.values[1, 2], d.values[0, 1]) == (3.0, 2.0, 1.0)
    assert d.ids == ("1", "2", "3")


def test_returns_matrix_of_equal_totals_is_zero():
    assert not returns_matrix([0.4, 0.4, 0.4]).values.any()


def test_affinity_maps_largest_distance_to_zero():
    a = to_affinity(returns_matrix([0.0, 1.0, 3.0]))
    assert isinstance(a, AffinityMatrix)
    np.testing.assert_array_equal(np.diag(a.values), 1.0)
    assert a.values[0, 2] == 0.0
    assert a.values[0, 1] == pytest.approx(2 / 3)


def test_affinity_of_zero_matrix_is_an_error():
    with pytest.raises(ComputationError):
        to_affinity(returns_matrix([1.0, 1.0]))


def test_normalized_norm_examples():
    assert normalized_norm(returns_matrix([2.0, 2.0, 2.0])) == 0.0
    assert normalized_norm(returns_matrix([0.0, 1.0])) == pytest.approx(math.sqrt(2) / 2)


def test_distance_matrix_validates_structure():
    with pytest.raises(DataValidationError):
        DistanceMatrix(ids=("a", "b"), values=np.array([[0.0, 1.0], [2.0, 0.0]]), kind="returns")
    with pytest.raises(DataValidationError):
        DistanceMatrix(ids=("a", "b"), values=np.array([[1.0, 1.0], [1.0, 0.0]]), kind="returns")


def test_permuted_matrix_keeps_pairs():
    d = returns_matrix([0.0, 1.0, 3.0], ["a", "b", "c"]).permuted([2, 0, 1])
    assert d.ids == ("c", "a", "b")
    assert d.values[0, 1] == 3.0


def test_combined_ids_prefix_collection_label():
    assert combined_ids("crypto", ["BTC", "ETH"]) == ["crypto:BTC", "crypto:ETH"]


def test_distance_and_affinity_files_round_trip(tmp_path):
    d = returns_matrix([0.1, -0.25, 0.7], ["a", "b", "c"])
    path = write_distance(d, tmp_path / "d.csv")
    meta = json.loads((tmp_path / "d.csv.meta.json").read_text())
    assert meta == {"kind": "returns", "role": "distance", "size": 3}
    loaded = load_distance(path)
    assert isinstance(loaded, DistanceMatrix)
    np.testing.assert_array_equal(loaded.values, d.values)

    a = load_distance(write_distance(to_affinity(d), tmp_path / "a.csv"))
    assert isinstance(a, AffinityMatrix)
    assert a.kind is DistanceKind.RETURNS


def _double_loop_semimetric(a: list[int], b: list[int]) -> float:
    def mean_minimal(source, target):
        total = 0.0
        for s in source:
            best = None
            for t in target:
                gap = abs(s - t)
                if best is None or gap < best:
                    best = gap
            total += best
        return total / len(source)

    return 0.5 * (mean_minimal(a, b) + mean_minimal(b, a))


def test_semimetric_matches_double_loop_over_random_sets():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        a = sorted(rng.choice(500, size=int(rng.integers(1, 21)), replace=False).tolist())
        b = sorted(rng.choice(500, size=int(rng.integers(1, 21)), replace=False).tolist())
        expected = _double_loop_semimetric(a, b)
        assert mj_semimetric(a, b) == pytest.approx(expected, abs=1e-12)
        assert mj_semimetric(BreakSet("b", tuple(b)), BreakSet("a", tuple(a))) == pytest.approx(
            expected, abs=1e-12
        )


def _cdf_gap_integral(x: np.ndarray, y: np.ndarray) -> float:
    """Exact integral of |F_x - F_y| between consecutive support points."""
    x, y = np.sort(x), np.sort(y)
    support = np.unique(np.concatenate([x, y]))
    total = 0.0
    for left, right in zip(support[:-1], support[1:]):
        f_x = np.searchsorted(x, left, side="right") / x.size
        f_y = np.searchsorted(y, left, side="right") / y.size
        total += abs(f_x - f_y) * (right - left)
    return total


def test_wasserstein_matches_cdf_integration_over_random_samples():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        a = tail_measure(rng.standard_t(3, size=int(rng.integers(10, 60))))
        b = tail_measure(rng.normal(scale=rng.uniform(0.5, 2), size=int(rng.integers(10, 60))))
        expected = _cdf_gap_integral(a.pooled, b.pooled)
        assert wasserstein_tails(a, b) == pytest.approx(expected, abs=1e-10)


def test_matrices_follow_asset_permutations(one_factor_panel):
    rng = np.random.default_rng(7)
    order = rng.permutation(one_factor_panel.n_assets).tolist()
    shuffled = PricePanel(
        asset_ids=tuple(one_factor_panel.asset_ids[i] for i in order),
        dates=one_factor_panel.dates,
        prices=one_factor_panel.prices[:, order],
    )
    expected = trajectory_matrix(one_factor_panel).permuted(order)
    got = trajectory_matrix(shuffled)
    assert got.ids == expected.ids
    np.testing.assert_allclose(got.values, expected.values, atol=1e-15)

    samples = [rng.standard_t(4, size=80) for _ in order]
    measures = [tail_measure(s, asset_id=f"e{i}") for i, s in enumerate(samples)]
    got = extremes_matrix([measures[i] for i in order])
    expected = extremes_matrix(measures).permuted(order)
    assert got.ids == expected.ids
    np.testing.assert_allclose(got.values, expected.values, atol=1e-15)

    z = rng.normal(size=len(order))
    ids = [f"r{i}" for i in range(len(order))]
    got = returns_matrix(z[order], [ids[i] for i in order])
    np.testing.assert_array_equal(got.values, returns_matrix(z, ids).permuted(order).values)


def test_affinity_is_scale_invariant():
    d = returns_matrix(np.random.default_rng(8).normal(size=6))
    tripled = DistanceMatrix(ids=d.ids, values=3 * d.values, kind=d.kind)
    np.testing.assert_allclose(to_affinity(tripled).values, to_affinity(d).values, atol=1e-12)
    assert np.all((to_affinity(d).values >= 0) & (to_affinity(d).values <= 1))
