import warnings

import numpy as np
import pytest

from conftest import identifiable_for_probing, relerr
from gridtopo.errors import EnumerationCapError, RankDeficiencyError, StructuralError
from gridtopo.grid import Feeder, LineLibrary, build_incidence, build_topology_matrices, seven_bus_feeder, random_feeder
from gridtopo.harness import random_library
from gridtopo.meter import (
    _laplacian_objective,
    covariance_rx,
    impedance_ls,
    khatri_rao_design,
    laplacian_tree,
    milp_identify,
    partial_covariance_rx,
    probing_laplacian_fit,
    vec,
)
from gridtopo.simulate import (
    InjectionModel,
    MeasurementSet,
    analytic_covariances,
    generate_probing_sequence,
    sample_covariances,
    sample_injections,
    simulate_voltages_linear,
)


def _identifiable(n_buses, count, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        f = random_feeder(n_buses, rng)
        if identifiable_for_probing(f):
            out.append(f)
    return out, rng


def _objective(G, ms, lam, mu):
    n = G.shape[0]
    return _laplacian_objective(G, ms.dV @ ms.dV.T, ms.dP @ ms.dV.T, float(np.sum(ms.dP**2)), lam, mu, np.eye(n) + 1)


# -- moment-based recovery -------------------------------------------------


def test_covariance_rx_exact_on_analytic_moments(rng):
    f = random_feeder(8, rng)
    m = InjectionModel.diagonal(rng.uniform(0.5, 2, 8), rng.uniform(0.5, 2, 8), cov_pq=rng.uniform(-0.3, 0.3, 8))
    est = covariance_rx(analytic_covariances(f, m))
    tm = build_topology_matrices(f)
    assert est.mode == "diagonal" and est.identifiable.all()
    assert np.abs(est.R - tm.R).max() < 1e-12 * tm.R.max()
    assert np.abs(est.X - tm.X).max() < 1e-12 * tm.X.max()
    R, X = est.square()
    assert np.allclose(R, R.T) and R.min() >= -1e-14


def test_covariance_rx_block_mode_with_correlation(rng):
    f = random_feeder(6, rng)
    m = InjectionModel.random(6, rng, solar=[1, 2, 5], solar_corr=0.6)
    assert not m.is_diagonal
    est = covariance_rx(analytic_covariances(f, m))
    assert est.mode == "block"
    assert relerr(est.R, build_topology_matrices(f).R) < 1e-10


def test_covariance_rx_flags_singular_bus(rng):
    f = random_feeder(4, rng)
    # bus 2: E[pq]^2 = E[p^2] E[q^2]
    m = InjectionModel.diagonal([1.0, 2.0, 1.0, 1.0], [1.0, 0.5, 1.0, 1.0], cov_pq=[0.0, 1.0, 0.2, 0.0])
    est = covariance_rx(analytic_covariances(f, m), mode="diagonal")
    assert est.identifiable.tolist() == [True, False, True, True]
    assert np.all(np.isnan(est.R[:, 1])) and not np.any(np.isnan(est.R[:, [0, 2, 3]]))


def test_covariance_rx_sampled_accuracy():
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        f = random_feeder(8, rng)
        m = InjectionModel.random(8, rng)
        P, Q = sample_injections(m, 20_000, rng)
        V, th = simulate_voltages_linear(f, P, Q, noise_sd=1e-4, rng=rng)
        ms = MeasurementSet("magnitude", list(range(1, 9)), V=V, theta=th, P=P, Q=Q)
        R = build_topology_matrices(f).R
        est = covariance_rx(sample_covariances(ms), mode="diagonal")
        nz = R > 0
        errs.append(np.median(np.abs(est.R - R)[nz] / R[nz]))
    assert max(errs) < 0.05


def test_partial_covariance_seven_bus_leaves():
    f = seven_bus_feeder()
    b = analytic_covariances(f, InjectionModel.diagonal(1.0, 1.0, n=7))
    est, tree = partial_covariance_rx(b, [3, 5, 7])
    assert est.mode == "block"
    assert len(tree.hidden) == 2
    lengths = {tuple(sorted((m, n))): w for m, n, w in tree.edges}
    adj = {v: {u for e in lengths for u in e if v in e and u != v} for v in tree.nodes}
    h1 = next(h for h in tree.hidden if 0 in adj[h])
    (h4,) = set(tree.hidden) - {h1}
    # bus 2 and bus 6 have degree two and fold into the lines beside them
    expect = {(0, h1): 1, (h1, 3): 2, (h1, h4): 1, (h4, 5): 1, (h4, 7): 2}
    assert {tuple(sorted(e)) for e in expect} == set(lengths)
    for e, w in expect.items():
        assert lengths[tuple(sorted(e))] == pytest.approx(w, abs=1e-9)


def test_partial_covariance_all_buses_is_direct_tree(rng):
    f = random_feeder(7, rng)
    b = analytic_covariances(f, InjectionModel.random(7, rng))
    _, tree = partial_covariance_rx(b)
    assert not tree.hidden and tree.edge_set == f.edges
    lengths = {tuple(sorted((m, n))): w for m, n, w in tree.edges}
    for ln in f.lines:
        assert lengths[(ln.parent, ln.child)] == pytest.approx(ln.r, rel=1e-8)


def test_partial_covariance_correlated_solar_inside_observed_set():
    f = seven_bus_feeder(r=0.02, x=0.03)
    m = InjectionModel.random(7, np.random.default_rng(4), solar=[3, 5, 7], solar_corr=0.7)
    assert abs(m.cov_pp[2, 4]) > 0 and not m.is_diagonal
    b = analytic_covariances(f, m)
    _, tree = partial_covariance_rx(b, [3, 5, 7])
    truth = analytic_covariances(f, InjectionModel.diagonal(1.0, 1.0, n=7))
    _, ref = partial_covariance_rx(truth, [3, 5, 7])
    assert relerr(tree.pairwise([0, 3, 5, 7]), ref.pairwise([0, 3, 5, 7])) < 1e-9
    assert len(tree.hidden) == 2


# -- closed-form line resistances -----------------------------------------


def test_impedance_ls_two_bus_hand_value():
    f = Feeder(2, [(0, 1, 0.25, 0.1)])
    dV, dP = np.array([[0.25 * 0.03]]), np.array([[0.03]])
    fit = impedance_ls(f, dV, dP)
    assert fit.rho[0] == pytest.approx(4.0, rel=1e-12)
    assert fit.r[0] == pytest.approx(0.25, rel=1e-12)


def test_impedance_ls_round_trip_and_identity(rng):
    f = random_feeder(9, rng)
    ms = generate_probing_sequence(f, f.leaves, 0.05, 30, noise_sd=0, rng=rng)
    fit = impedance_ls(f, ms.dV, ms.dP)
    assert np.max(np.abs(fit.rho - 1 / f.r) * f.r) < 1e-8
    A = build_incidence(f).reduced
    rho = 1 / f.r
    G = A.T @ np.diag(rho) @ A
    assert np.allclose(khatri_rao_design(A, ms.dV) @ rho, vec(G @ ms.dV), rtol=0, atol=1e-12 * np.abs(G).max())
    assert np.allclose(G, np.linalg.inv(build_topology_matrices(f).R))


def test_impedance_ls_rank_and_clipping(rng):
    f = random_feeder(4, rng)
    with pytest.raises(RankDeficiencyError, match="dependent lines"):
        impedance_ls(f, np.zeros((4, 3)), np.zeros((4, 3)))
    ms = generate_probing_sequence(f, f.leaves, 0.05, 10, noise_sd=0, rng=rng)
    with pytest.warns(RuntimeWarning, match="clipping"):
        fit = impedance_ls(f, ms.dV, -ms.dP)
    assert fit.clipped.all() and np.all(fit.rho == 1e-9)


# -- Laplacian fit on probing data ----------------------------------------


def test_probing_fit_recovers_laplacian():
    fs, rng = _identifiable(8, 10, 5)
    for f in fs:
        ms = generate_probing_sequence(f, f.leaves, 0.05, 30, noise_sd=0, rng=rng)
        fit = probing_laplacian_fit(ms.dV, ms.dP)
        G = np.linalg.inv(build_topology_matrices(f).R)
        assert relerr(fit.G, G) < 1e-3
        assert set(fit.tree) == f.edges
        assert relerr(fit.tree_G, G) < 1e-8


def test_probing_fit_feasibility_and_monotone_objective(rng):
    f = random_feeder(7, rng)
    ms = generate_probing_sequence(f, f.leaves, 0.05, 25, noise_sd=1e-4, rng=rng)
    fit = probing_laplacian_fit(ms.dV, ms.dP, polish=False)
    G = fit.G
    assert np.array_equal(G, G.T)
    assert np.all(G[~np.eye(7, dtype=bool)] <= 0)
    assert np.linalg.eigvalsh(G).min() > 0
    obj, lt, mt = fit.objective, fit.lam_trace, fit.mu_trace
    same = (lt[1:] == lt[:-1]) & (mt[1:] == mt[:-1])
    steps = np.diff(obj)[same]
    assert np.all(steps <= 1e-9 * np.maximum(np.abs(obj[1:][same]), 1.0))
    assert np.all(np.diff(lt) <= 0) and np.all(np.diff(mt) <= 0)


def test_probing_fit_objective_not_above_truth():
    fs, rng = _identifiable(6, 5, 8)
    for f in fs:
        ms = generate_probing_sequence(f, f.leaves, 0.05, 40, noise_sd=0, rng=rng)
        fit = probing_laplacian_fit(ms.dV, ms.dP, lam=1e-8, mu=1e-8, continuation=False, max_iter=2000)
        G = np.linalg.inv(build_topology_matrices(f).R)
        assert _objective(fit.G, ms, 1e-8, 1e-8) <= _objective(G, ms, 1e-8, 1e-8) + 1e-6


def test_probing_fit_priors(rng):
    fs, rng = _identifiable(6, 1, 2)
    f = fs[0]
    ms = generate_probing_sequence(f, f.leaves, 0.05, 30, noise_sd=1e-4, rng=rng)
    absent = next((a, b) for a in range(1, 7) for b in range(a + 1, 7) if (a, b) not in f.edges)
    fit = probing_laplacian_fit(ms.dV, ms.dP, forbidden=[absent])
    assert fit.G[absent[0] - 1, absent[1] - 1] == 0.0
    with pytest.raises(StructuralError):
        probing_laplacian_fit(ms.dV, ms.dP, forbidden=[(1, k) for k in range(7) if k != 1])
    with pytest.raises(ValueError):
        probing_laplacian_fit(ms.dV, ms.dP, mu=0.0)


def test_laplacian_tree_uses_ground_links():
    f = Feeder(4, [(0, 1, 1.0, 1.0), (1, 2, 0.5, 1.0), (0, 3, 2.0, 1.0)])
    G = np.linalg.inv(build_topology_matrices(f).R)
    assert set(laplacian_tree(G)) == f.edges
    assert (0, 3) not in set(laplacian_tree(G, banned=[(0, 3)]))


# -- exact identification over a line library -----------------------------


def _probing_case(seed, n_buses=6, decoys=3):
    fs, rng = _identifiable(n_buses, 1, seed)
    f = fs[0]
    ms = generate_probing_sequence(f, f.leaves, 0.05, 30, noise_sd=0, rng=rng)
    return f, ms, random_library(f, decoys, rng)


def test_milp_true_edges_only(rng):
    f = random_feeder(5, rng)
    ms = generate_probing_sequence(f, f.leaves, 0.05, 20, noise_sd=0, rng=rng)
    sol = milp_identify(LineLibrary.from_feeder(f), ms.dV, ms.dP)
    assert sol.n_candidates == 1 and np.all(sol.w == 1)
    assert np.allclose(sol.rho, impedance_ls(f, ms.dV, ms.dP).rho, rtol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_milp_selects_true_topology(seed):
    f, ms, lib = _probing_case(seed)
    sol = milp_identify(lib, ms.dV, ms.dP)
    assert lib.feeder(sol.w).edges == f.edges
    assert np.array_equal(sol.w, lib.status_of(f))
    sel = sol.w.astype(bool)
    assert np.all(sol.rho[sel] > 0) and np.all(sol.rho[~sel] == 0)


def test_milp_objective_forms_agree():
    f, ms, lib = _probing_case(3, n_buses=5, decoys=5)
    sol = milp_identify(lib, ms.dV, ms.dP)
    assert sol.n_candidates >= 20 and not sol.skipped
    assert sol.max_gap < 1e-8
    # independent oracle: direct least squares on each candidate's columns
    H = khatri_rao_design(lib.reduced_incidence.astype(float), ms.dV)
    p = vec(ms.dP)
    rng = np.random.default_rng(0)
    for k in rng.choice(len(sol.table), 20, replace=False):
        w, cost = sol.table[k]
        idx = np.flatnonzero(w)
        resid = p - H[:, idx] @ np.linalg.lstsq(H[:, idx], p, rcond=None)[0]
        assert cost == pytest.approx(float(resid @ resid), rel=1e-8, abs=1e-10 * float(p @ p))


def test_milp_argmin_scale_invariant():
    f, ms, lib = _probing_case(7)
    noisy = generate_probing_sequence(f, f.leaves, 0.05, 30, noise_sd=1e-4, rng=np.random.default_rng(1))
    w = milp_identify(lib, noisy.dV, noisy.dP).w
    for c in (0.1, 3.0, 40.0):
        assert np.array_equal(milp_identify(lib, c * noisy.dV, c * noisy.dP).w, w)


def test_milp_cap():
    f, ms, lib = _probing_case(1)
    with pytest.raises(EnumerationCapError):
        milp_identify(lib, ms.dV, ms.dP, cap=1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        milp_identify(lib, ms.dV, ms.dP)
