import numpy as np
import pytest

from conftest import hide_high_degree, weighted_edges
from gridtopo.additive_tree import (
    PARENT_CHILD,
    SIBLINGS,
    UNRELATED,
    DistanceMatrix,
    ReconstructedTree,
    complex_recursive_grouping,
    recursive_grouping,
    sibling_test,
)
from gridtopo.errors import ReconstructionError
from gridtopo.graphs import collapse_hidden, pairwise_matrix, splits
from gridtopo.grid import build_topology_matrices, effective_distances, seven_bus_feeder, random_feeder


def _dm(edges, labels, tol=None):
    return DistanceMatrix(labels, pairwise_matrix(edges, labels), tol)


def test_sibling_star_and_path():
    star = [("h", "a", 1.0), ("h", "b", 1.0), ("h", "c", 1.0)]
    d = _dm(star, ["a", "b", "c"])
    v = sibling_test(d, "a", "b")
    assert v.kind == SIBLINGS and v.constant == pytest.approx(0.0)
    path = [("a", "b", 1.0), ("b", "c", 1.0)]
    v = sibling_test(_dm(path, ["a", "b", "c"]), "a", "b")
    assert v.kind == PARENT_CHILD and abs(v.constant) == pytest.approx(1.0)
    assert v.parent == "b"
    with pytest.raises(ValueError):
        sibling_test(_dm(path[:1], ["a", "b"]), "a", "b")


def test_sibling_unrelated_on_seven_bus():
    f = seven_bus_feeder()
    d = _dm(weighted_edges(f), [0, 1, 2, 3, 4, 5, 6, 7])
    assert sibling_test(d, 3, 5).kind == UNRELATED
    v = sibling_test(d, 6, 7)
    assert v.kind == PARENT_CHILD and v.parent == 6


def test_seven_bus_leaves_observed_collapses_degree_two():
    f = seven_bus_feeder()
    obs = [0, 3, 5, 7]
    R = build_topology_matrices(f).R
    d = DistanceMatrix(obs, effective_distances(R, obs))
    tree = recursive_grouping(d)
    # buses 1 and 4 have degree 3 and reappear; 2 and 6 are series-merged
    assert len(tree.hidden) == 2
    lengths = {frozenset(e[:2]): e[2] for e in tree.edges}
    h4 = next(h for h in tree.hidden if frozenset((h, 5)) in lengths)
    h1 = next(h for h in tree.hidden if h != h4)
    assert lengths[frozenset((h4, 7))] == pytest.approx(2.0)
    assert lengths[frozenset((h4, 5))] == pytest.approx(1.0)
    assert lengths[frozenset((h1, h4))] == pytest.approx(1.0)
    assert lengths[frozenset((h1, 3))] == pytest.approx(2.0)
    assert lengths[frozenset((h1, 0))] == pytest.approx(1.0)
    assert np.allclose(tree.pairwise(obs), d.d)


def test_all_observed_returns_true_tree():
    f = random_feeder(12, np.random.default_rng(0))
    labels = list(range(13))
    tree = recursive_grouping(_dm(weighted_edges(f), labels))
    assert not tree.hidden
    assert tree.edge_set == f.edges


def test_random_hidden_recovery():
    rng = np.random.default_rng(1)
    for _ in range(30):
        f = random_feeder(int(rng.integers(5, 21)), rng)
        obs = hide_high_degree(f, rng)
        edges = weighted_edges(f)
        tree = recursive_grouping(_dm(edges, obs))
        truth = collapse_hidden(edges, obs)
        assert splits(tree.edges, obs) == splits(truth, obs)
        assert len(tree.hidden) == f.n_nodes - len(obs)
        assert all(tree.degree(h) >= 3 for h in tree.hidden)
        assert tree.max_error < 1e-9


def test_fixed_point_and_json():
    rng = np.random.default_rng(2)
    f = random_feeder(15, rng)
    obs = hide_high_degree(f, rng)
    tree = recursive_grouping(_dm(weighted_edges(f), obs))
    again = recursive_grouping(DistanceMatrix(obs, tree.pairwise(obs)))
    assert splits(again.edges, obs) == splits(tree.edges, obs)
    rec = ReconstructedTree.from_dict(tree.to_dict())
    assert np.allclose(rec.pairwise(obs).real, tree.pairwise(obs))
    assert sum(n["hidden"] for n in tree.to_dict()["node_list"]) == len(tree.hidden)


def test_inconsistent_distances_report_quadruple():
    d = np.array([[0, 1, 5, 1], [1, 0, 1, 5], [5, 1, 0, 1], [1, 5, 1, 0]], float)
    with pytest.raises(ReconstructionError) as exc:
        recursive_grouping(DistanceMatrix(list("abcd"), d, tol=1e-6))
    assert set(exc.value.quadruple) == set("abcd")
    loose = recursive_grouping(DistanceMatrix(list("abcd"), d, tol=1e-6), strict=False)
    assert not loose.consistent


def test_complex_proportional_matches_real():
    rng = np.random.default_rng(3)
    f = random_feeder(12, rng, rx_ratio=2.0)
    obs = hide_high_degree(f, rng)
    D = pairwise_matrix(weighted_edges(f, "r"), obs)
    real = recursive_grouping(DistanceMatrix(obs, D))
    cplx = complex_recursive_grouping(D, 0.5 * D, labels=obs)
    assert splits(real.edges, obs) == splits(cplx.edges, obs)
    assert all(isinstance(w, complex) for _, _, w in cplx.edges)


def test_complex_from_kron_reduced_admittance():
    rng = np.random.default_rng(4)
    f = random_feeder(10, rng)
    obs = hide_high_degree(f, rng)
    Y = build_topology_matrices(f).Y
    keep = [b - 1 for b in obs if b > 0]
    from gridtopo.grid import kron_reduce

    Z = np.linalg.inv(kron_reduce(Y, keep))
    D = effective_distances(Z, list(range(1, len(keep) + 1)) + [0])
    labels = [b for b in obs if b > 0] + [0]
    tree = complex_recursive_grouping(D.real, D.imag, labels=labels)
    truth = collapse_hidden(weighted_edges(f, "z"), obs)
    assert splits(tree.edges, labels) == splits(truth, labels)
    assert np.abs(tree.pairwise(labels) - pairwise_matrix(truth, labels)).max() < 1e-9


def test_complex_stability_below_tolerance():
    rng = np.random.default_rng(5)
    f = random_feeder(10, rng)
    obs = hide_high_degree(f, rng)
    D = pairwise_matrix(weighted_edges(f, "z"), obs)
    tol = 1e-6
    base = complex_recursive_grouping(D.real, D.imag, tol=tol, labels=obs)
    E = rng.uniform(-1, 1, D.shape) * tol / 10 / 2
    E = E + E.T
    np.fill_diagonal(E, 0)
    pert = complex_recursive_grouping(D.real + E, D.imag - E, tol=tol, labels=obs)
    assert splits(pert.edges, obs) == splits(base.edges, obs)


def test_complex_components_disagree():
    # real part from one tree, imaginary from another topology
    a = [(0, "h", 1.0), ("h", 1, 1.0), ("h", 2, 1.0), (0, "g", 1.0), ("g", 3, 1.0), ("g", 4, 1.0)]
    b = [(0, "h", 1.0), ("h", 1, 1.0), ("h", 3, 1.0), (0, "g", 1.0), ("g", 2, 1.0), ("g", 4, 1.0)]
    labels = [0, 1, 2, 3, 4]
    with pytest.raises(ReconstructionError):
        complex_recursive_grouping(pairwise_matrix(a, labels), pairwise_matrix(b, labels), tol=1e-9, labels=labels)
