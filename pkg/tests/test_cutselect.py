import numpy as np
import pytest
from scipy.stats import ortho_group

from wiser.cutselect import (
    CutScores, NeighborGraph, budget_size, cut_statistics, knn_graph, read_cut_tsv,
    select_subset, write_cut_tsv,
)
from wiser.errors import ConfigError, DataError

SWEEP = (10, 20, 40, 50, 60, 80, 100)


def knn_oracle(z, K):
    """Per-node neighbor lists by explicit sort of (distance, index) pairs."""
    n = len(z)
    out = []
    for i in range(n):
        cand = sorted((float(np.sqrt(((z[i] - z[j]) ** 2).sum())), j) for j in range(n) if j != i)
        out.append(cand[: min(K, n - 1)])
    return out


def cut_oracle(z, labels, K):
    """Direct per-node loops over neighbors."""
    labels = list(labels)
    n = len(labels)
    prior = {c: labels.count(c) / n for c in (0, 1)}
    rows = []
    for i, nbrs in enumerate(knn_oracle(z, K)):
        w = [1.0 / (1.0 + d) for d, _ in nbrs]
        J = sum(wk for wk, (_, j) in zip(w, nbrs) if labels[j] != labels[i])
        p = prior[labels[i]]
        mu = (1 - p) * sum(w)
        sigma = np.sqrt(p * (1 - p) * sum(wk * wk for wk in w))
        if sigma > 0:
            zz = (J - mu) / sigma
        else:
            zz = 0.0 if J == mu else np.inf
        rows.append((J, mu, sigma, zz))
    return np.array(rows)


def test_collinear_example():
    z = np.array([[0.0], [1.0], [3.0]])
    g = knn_graph(z, 1)
    assert g.neighbors[:, 0].tolist() == [1, 0, 1]
    np.testing.assert_allclose(g.weights[:, 0], [0.5, 0.5, 1 / 3], rtol=0, atol=1e-15)


def test_distance_tie_goes_to_lower_index():
    z = np.array([[0.0], [-1.0], [1.0]])
    assert knn_graph(z, 1).neighbors[0, 0] == 1


def test_knn_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(2, 30))
        z = rng.normal(size=(n, 3)).round(1)  # rounding creates distance ties
        K = int(rng.integers(1, 8))
        g = knn_graph(z, K)
        for i, nbrs in enumerate(knn_oracle(z, K)):
            assert g.neighbors[i].tolist() == [j for _, j in nbrs]


def test_knn_small_graph_and_errors():
    g = knn_graph(np.arange(3.0).reshape(3, 1), 20)
    assert g.neighbors.shape == (3, 2)
    with pytest.raises(DataError):
        knn_graph(np.zeros((1, 2)), 3)


def test_cut_statistics_match_direct_recomputation():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 51))
        z = rng.normal(size=(n, int(rng.integers(1, 5))))
        labels = rng.integers(0, 2, size=n)
        K = int(rng.integers(1, 10))
        s = cut_statistics(knn_graph(z, K), labels)
        got = np.column_stack([s.J, s.mu, s.sigma, s.z])
        want = cut_oracle(z, labels, K)
        fin = np.isfinite(want)
        assert np.array_equal(fin, np.isfinite(got))
        np.testing.assert_allclose(got[fin], want[fin], rtol=0, atol=1e-12)


def test_homogeneous_neighborhood_has_zero_cut():
    z = np.array([[0.0], [0.1], [0.2], [5.0], [5.1], [5.2]])
    labels = np.array([0, 0, 0, 1, 1, 1])
    s = cut_statistics(knn_graph(z, 2), labels)
    assert np.all(s.J == 0)
    assert np.all(s.z < 0)


def test_single_class_zero_sigma():
    s = cut_statistics(knn_graph(np.arange(4.0).reshape(4, 1), 2), np.ones(4, dtype=int))
    assert np.all(s.sigma == 0) and np.all(s.z == 0)
    g = NeighborGraph(np.array([[1], [0]]), np.ones((2, 1)))
    s = cut_statistics(g, np.array([0, 1]), priors={0: 1.0, 1: 1.0})
    assert np.all(np.isinf(s.z))


def test_isometry_invariance():
    rng = np.random.default_rng(2)
    for seed in range(10):
        z = rng.normal(size=(40, 4))
        labels = rng.integers(0, 2, size=40)
        q = ortho_group.rvs(4, random_state=seed)
        a = cut_statistics(knn_graph(z, 5), labels)
        b = cut_statistics(knn_graph(z @ q + rng.normal(size=4), 5), labels)
        np.testing.assert_allclose(a.z, b.z, rtol=1e-9, atol=1e-9)


def test_relabel_symmetry_of_cut_weight():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(30, 2))
    labels = rng.integers(0, 2, size=30)
    g = knn_graph(z, 4)
    np.testing.assert_array_equal(cut_statistics(g, labels).J, cut_statistics(g, 1 - labels).J)


@pytest.mark.parametrize("n", [1, 7, 33, 250])
def test_budget_contract(n):
    z = np.random.default_rng(n).normal(size=n)
    s = CutScores(z, z, z, z)
    prev = None
    for b in SWEEP:
        sel = select_subset(s, b)
        assert len(sel) == max(1, (b * n) // 100) == budget_size(n, b)
        assert len(np.unique(sel)) == len(sel)
        if prev is not None:
            assert set(prev) <= set(sel.tolist())
        prev = sel.tolist()


def test_select_smallest_z_ties_by_index():
    z = np.array([0.5, -1.0, 0.5, 0.5, np.inf])
    sel = select_subset(CutScores(z, z, z, z), 40)
    assert sel.tolist() == [0, 1]


def test_budget_out_of_range():
    z = np.zeros(3)
    for b in (0, -5, 100.5):
        with pytest.raises(ConfigError):
            select_subset(CutScores(z, z, z, z), b)


def test_cut_tsv_round_trip(tmp_path):
    z = np.array([0.25, np.inf, -1.5])
    s = CutScores(np.array([1.0, 2.0, 0.0]), np.ones(3), np.array([0.5, 0.0, 1.0]), z)
    write_cut_tsv(tmp_path / "c.tsv", ["a", "b", "c"], s, [2])
    ids, back, sel = read_cut_tsv(tmp_path / "c.tsv")
    assert ids == ["a", "b", "c"]
    assert back.z.tobytes() == z.tobytes()
    assert sel.tolist() == [False, False, True]
