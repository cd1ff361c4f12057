"""Tests for agglomerative clustering, cuts and dendrogram exports."""

import json
from datetime import date

import numpy as np
import pytest
from scipy.cluster.hierarchy import linkage as scipy_linkage
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial.distance import squareform

from app.errors import DataValidationError
from app.services.cluster import (
    CutMode,
    Linkage,
    agglomerate,
    cut,
    load_assignments,
    load_clustering_input,
    load_dendrogram,
    to_newick,
    write_assignments,
    write_dendrogram,
)
from app.services.distances import returns_matrix, write_distance
from app.services.persistence import PersistenceMatrix, write_persistence


def _random_distances(n: int, seed: int) -> np.ndarray:
    points = np.random.default_rng(seed).normal(size=(n, 3))
    return np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2))


def test_single_linkage_heights_are_minimum_spanning_tree_edges():
    d = _random_distances(15, 0)
    den = agglomerate(d, Linkage.SINGLE)
    mst = minimum_spanning_tree(d).toarray()
    np.testing.assert_allclose(den.heights, np.sort(mst[mst > 0]), atol=1e-12)


@pytest.mark.parametrize("method", ["average", "complete", "single"])
def test_merge_heights_match_scipy(method):
    d = _random_distances(20, 1)
    den = agglomerate(d, method)
    expected = scipy_linkage(squareform(d, checks=False), method=method)[:, 2]
    np.testing.assert_allclose(den.heights, expected, atol=1e-12)
    assert den.merges[-1].size == 20


def test_merge_node_ids_follow_linkage_convention():
    d = returns_matrix([0.0, 1.0, 10.0, 11.5], ["a", "b", "c", "d"])
    den = agglomerate(d, Linkage.AVERAGE)
    first, second, last = den.merges
    assert (first.a, first.b, first.height, first.size) == (0, 1, 1.0, 2)
    assert (second.a, second.b, second.height) == (2, 3, 1.5)
    assert {last.a, last.b} == {4, 5}
    assert last.height == pytest.approx((10 + 11.5 + 9 + 10.5) / 4)


def test_equal_distances_merge_lexicographically_smallest_pair():
    d = np.ones((4, 4)) - np.eye(4)
    den = agglomerate(d, Linkage.COMPLETE)
    assert (den.merges[0].a, den.merges[0].b) == (0, 1)


def test_asymmetric_input_is_rejected():
    d = np.array([[0.0, 1.0], [2.0, 0.0]])
    with pytest.raises(DataValidationError):
        agglomerate(d)


def test_persistence_matrix_clusters_on_dissimilarity():
    k = PersistenceMatrix(
        time_indices=np.arange(1, 4),
        dates=(),
        values=np.array([[1.0, 0.9, -0.2], [0.9, 1.0, -0.1], [-0.2, -0.1, 1.0]]),
    )
    den = agglomerate(k)
    assert den.leaves == ("1", "2", "3")
    assert den.merges[0].height == pytest.approx(0.1)
    assert den.merges[1].height == pytest.approx((1.2 + 1.1) / 2)


def test_cut_into_k_clusters_numbers_by_first_appearance():
    d = returns_matrix([10.0, 0.0, 10.2, 0.1, 5.0], ["p", "q", "r", "s", "t"])
    den = agglomerate(d, Linkage.AVERAGE)
    two = cut(den, CutMode.K_CLUSTERS, 3)
    assert two.n_clusters == 3
    assert two.labels.tolist() == [1, 2, 1, 2, 3]
    assert two.blocks() == [{"p", "r"}, {"q", "s"}, {"t"}]
    assert cut(den, "k_clusters", 1).labels.tolist() == [1] * 5
    assert cut(den, "k_clusters", 5).labels.tolist() == [1, 2, 3, 4, 5]


def test_cut_at_height_keeps_lower_merges():
    d = returns_matrix([10.0, 0.0, 10.2, 0.1, 5.0], ["p", "q", "r", "s", "t"])
    den = agglomerate(d, Linkage.SINGLE)
    assert cut(den, CutMode.HEIGHT, 0.15).n_clusters == 4
    assert cut(den, CutMode.HEIGHT, 0.5).n_clusters == 3
    assert cut(den, CutMode.HEIGHT, 100.0).n_clusters == 1


def test_invalid_cut_values_are_rejected():
    den = agglomerate(returns_matrix([0.0, 1.0, 2.0]))
    with pytest.raises(DataValidationError):
        cut(den, CutMode.K_CLUSTERS, 4)
    with pytest.raises(DataValidationError):
        cut(den, CutMode.HEIGHT, -1.0)


def test_newick_branch_lengths_are_height_differences():
    d = returns_matrix([0.0, 1.0, 4.0], ["a", "b", "c"])
    den = agglomerate(d, Linkage.SINGLE)
    assert to_newick(den) == "((a:1.0,b:1.0):2.0,c:3.0);"


def test_newick_quotes_special_labels():
    d = returns_matrix([0.0, 1.0], ["crypto:BTC", "crypto:ETH"])
    assert to_newick(agglomerate(d)) == "('crypto:BTC':1.0,'crypto:ETH':1.0);"


def test_single_leaf_dendrogram():
    den = agglomerate(np.zeros((1, 1)), ids=["only"])
    assert den.merges == ()
    assert to_newick(den) == "only;"
    assert cut(den, CutMode.K_CLUSTERS, 1).labels.tolist() == [1]


def test_dendrogram_and_assignments_round_trip(tmp_path):
    den = agglomerate(returns_matrix([0.3, -0.1, 0.9, 0.0], ["w", "x", "y", "z"]))
    write_dendrogram(den, tmp_path / "den.json", tmp_path / "den.nwk")
    payload = json.loads((tmp_path / "den.json").read_text())
    assert set(payload) == {"leaves", "linkage", "merges"}
    assert set(payload["merges"][0]) == {"a", "b", "height", "size"}
    assert load_dendrogram(tmp_path / "den.json") == den
    assert (tmp_path / "den.nwk").read_text().strip() == to_newick(den)

    assignment = cut(den, CutMode.K_CLUSTERS, 2)
    loaded = load_assignments(write_assignments(assignment, tmp_path / "a.csv"))
    assert loaded.ids == assignment.ids
    np.testing.assert_array_equal(loaded.labels, assignment.labels)


def test_clustering_input_detects_matrix_role(tmp_path):
    write_distance(returns_matrix([0.0, 2.0, 3.0], ["a", "b", "c"]), tmp_path / "d.csv")
    k = PersistenceMatrix(
        time_indices=np.arange(1, 3),
        dates=(date(2021, 1, 4), date(2021, 1, 5)),
        values=np.array([[1.0, 0.2], [0.2, 1.0]]),
    )
    write_persistence(k, tmp_path / "k.csv")
    assert load_clustering_input(tmp_path / "d.csv").ids == ("a", "b", "c")
    assert isinstance(load_clustering_input(tmp_path / "k.csv"), PersistenceMatrix)


def _naive_merges(d: np.ndarray, method: str) -> list[tuple[int, int, float]]:
    """Cubic agglomeration that recomputes cluster gaps from leaf pairs each step."""
    n = d.shape[0]
    clusters = {i: [i] for i in range(n)}
    node = {i: i for i in range(n)}
    merges = []
    for step in range(n - 1):
        best = None
        slots = sorted(clusters)
        for x, i in enumerate(slots):
            for j in slots[x + 1:]:
                gaps = [d[p, q] for p in clusters[i] for q in clusters[j]]
                if method == "single":
                    gap = min(gaps)
                elif method == "complete":
                    gap = max(gaps)
                else:
                    gap = sum(gaps) / len(gaps)
                if best is None or gap < best[0]:
                    best = (gap, i, j)
        gap, i, j = best
        merges.append((node[i], node[j], gap))
        clusters[i] += clusters.pop(j)
        node[i] = n + step
        del node[j]
    return merges


@pytest.mark.parametrize("method", ["single", "complete"])
def test_tied_integer_matrices_match_naive_agglomeration(method):
    rng = np.random.default_rng(2)
    for _ in range(300):
        n = int(rng.integers(2, 9))
        upper = np.triu(rng.integers(1, 5, size=(n, n)).astype(float), k=1)
        d = upper + upper.T
        got = [(m.a, m.b, m.height) for m in agglomerate(d, method).merges]
        assert got == _naive_merges(d, method)


def test_average_linkage_matches_naive_agglomeration():
    rng = np.random.default_rng(3)
    for trial in range(300):
        d = _random_distances(int(rng.integers(2, 9)), seed=100 + trial)
        got = agglomerate(d, Linkage.AVERAGE).merges
        expected = _naive_merges(d, "average")
        assert [(m.a, m.b) for m in got] == [(a, b) for a, b, _ in expected]
        np.testing.assert_allclose([m.height for m in got], [h for _, _, h in expected], atol=1e-12)


@pytest.mark.parametrize("method", ["average", "complete", "single"])
def test_leaf_permutation_gives_an_isomorphic_dendrogram(method):
    rng = np.random.default_rng(4)
    points = rng.normal(size=12)
    d = returns_matrix(points, [f"x{i}" for i in range(12)])
    shuffled = d.permuted(rng.permutation(12).tolist())
    den, other = agglomerate(d, method), agglomerate(shuffled, method)
    np.testing.assert_allclose(np.sort(other.heights), np.sort(den.heights), atol=1e-12)
    for k in (1, 3, 5, 12):
        blocks = cut(den, CutMode.K_CLUSTERS, k).blocks()
        assert len(blocks) == k
        assert set().union(*blocks) == set(d.ids)
        assert sorted(map(sorted, cut(other, CutMode.K_CLUSTERS, k).blocks())) == sorted(map(sorted, blocks))


def test_three_points_cut_below_the_far_gap():
    den = agglomerate(returns_matrix([0.0, 1.0, 10.0]), Linkage.AVERAGE)
    assert den.heights.tolist() == [1.0, 9.5]
    assert cut(den, CutMode.HEIGHT, 5.0).labels.tolist() == [1, 1, 2]
    assert cut(den, CutMode.HEIGHT, 9.5).n_clusters == 1
