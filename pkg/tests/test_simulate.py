import numpy as np
import pytest

from conftest import path_sum_matrix, relerr
from gridtopo.errors import DegenerateProbingError, InsufficientDataError
from gridtopo.grid import Feeder, build_topology_matrices, full_admittance, random_feeder
from gridtopo.simulate import (
    CovarianceBundle,
    InjectionModel,
    MeasurementSet,
    analytic_covariances,
    forward_injections,
    generate_probing_sequence,
    sample_covariances,
    sample_injections,
    simulate_phasors,
    simulate_voltages_ldf,
    simulate_voltages_linear,
)


def test_injection_model_validation():
    with pytest.raises(ValueError):
        InjectionModel.diagonal([1.0, -1.0], 1.0)
    with pytest.raises(ValueError):
        # |E[pq]| above sqrt(E[p^2] E[q^2])
        InjectionModel.diagonal(1.0, 1.0, cov_pq=2.0, n=2)
    m = InjectionModel.diagonal(1.0, 1.0, cov_pq=[0.5, 1.0])
    assert m.identifiable.tolist() == [True, False]
    assert m.is_diagonal


def test_zero_variance_and_determinism():
    m = InjectionModel.diagonal(0.0, 0.0, mean_p=[0.1, 0.2], mean_q=-0.05)
    P, Q = sample_injections(m, 7, 3)
    assert np.all(P == np.array([[0.1], [0.2]])) and np.all(Q == -0.05)
    m = InjectionModel.random(4, np.random.default_rng(0))
    a = sample_injections(m, 20, 42)
    b = sample_injections(m, 20, 42)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_sample_variance_converges():
    m = InjectionModel.diagonal(1.0, 1.0, n=3)
    P, Q = sample_injections(m, 50_000, 1)
    assert np.all(np.abs(P.var(axis=1) - 1) < 0.05) and np.all(np.abs(Q.var(axis=1) - 1) < 0.05)


def test_model_json_roundtrip():
    m = InjectionModel.random(3, np.random.default_rng(2), solar=[1, 3], solar_corr=0.5)
    again = InjectionModel.from_dict(m.to_dict())
    assert np.array_equal(again.joint, m.joint)
    assert m.cov_pp[0, 2] > 0 and not m.is_diagonal


def test_flat_profile():
    f = random_feeder(5, np.random.default_rng(3))
    V, th = simulate_voltages_linear(f, np.zeros((5, 3)), np.zeros((5, 3)), noise_sd=0)
    assert np.all(V == 1.0) and np.all(th == 0.0)
    assert np.all(simulate_voltages_ldf(f, np.zeros((5, 2)), np.zeros((5, 2)), noise_sd=0) == 1.0)
    U, I = simulate_phasors(f, np.zeros((5, 2)), np.zeros((5, 2)), noise_sd=0)
    assert np.all(I == 0)


def test_two_bus_hand_value():
    f = Feeder(2, [(0, 1, 1.0, 1.0)])
    V, th = simulate_voltages_linear(f, [[0.01]], [[0.01]], noise_sd=0)
    assert V[0, 0] == pytest.approx(1.02)
    assert th[0, 0] == pytest.approx(0.0)


def test_linear_model_matches_path_sums(rng):
    f = random_feeder(9, rng)
    P, Q = rng.normal(size=(9, 4)) * 0.01, rng.normal(size=(9, 4)) * 0.01
    V, th = simulate_voltages_linear(f, P, Q, noise_sd=0)
    R, X = path_sum_matrix(f, f.r), path_sum_matrix(f, f.x)
    assert np.allclose(V, R @ P + X @ Q + 1, atol=1e-14)
    assert np.allclose(th, X @ P - R @ Q, atol=1e-14)
    Vn, _ = simulate_voltages_linear(f, P, Q, noise_sd=1e-4, rng=rng)
    assert 5e-5 < np.std(Vn - V) < 2e-4


def test_ldf_taylor_and_linearity(rng):
    f = random_feeder(6, rng)
    P, Q = 1e-3 * rng.normal(size=(6, 3)), 1e-3 * rng.normal(size=(6, 3))
    V, _ = simulate_voltages_linear(f, P, Q, noise_sd=0)
    V2 = simulate_voltages_ldf(f, P, Q, noise_sd=0)
    dev = np.abs(V - 1).max()
    assert np.abs(V**2 - V2).max() <= 1.01 * dev**2
    V2b = simulate_voltages_ldf(f, 2 * P, 2 * Q, noise_sd=0)
    assert np.allclose(V2b - 1, 2 * (V2 - 1), rtol=0, atol=1e-15)


def test_forward_model_inverts_linear_model(rng):
    f = random_feeder(8, rng)
    P, Q = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
    V, th = simulate_voltages_linear(f, P, Q, noise_sd=0)
    P2, Q2 = forward_injections(f, V, th)
    assert np.abs(P2 - P).max() < 1e-10 and np.abs(Q2 - Q).max() < 1e-10


def test_phasor_kcl_and_round_trip(rng):
    f = random_feeder(7, rng)
    P, Q = sample_injections(InjectionModel.random(7, rng), 30, rng)
    U, I = simulate_phasors(f, P, Q, noise_sd=0)
    Yfull = full_admittance(f)
    u_full = np.vstack([np.ones((1, 30)), U]) - 1.0
    i_full = Yfull @ u_full
    assert np.allclose(i_full[1:], I, atol=1e-14)
    # substation current balances the bus currents
    assert np.abs(i_full[0] + I.sum(axis=0)).max() < 1e-14
    Y = np.linalg.lstsq((U - 1).T, I.T, rcond=None)[0].T
    assert relerr(Y, build_topology_matrices(f).Y) < 1e-10


def test_phasor_noise_on_currents_only(rng):
    f = random_feeder(4, rng)
    P, Q = rng.normal(size=(4, 2000)) * 0.01, rng.normal(size=(4, 2000)) * 0.01
    U0, I0 = simulate_phasors(f, P, Q, noise_sd=0)
    U1, I1 = simulate_phasors(f, P, Q, noise_sd=1e-3, rng=rng)
    assert np.array_equal(U0, U1)
    assert np.std((I1 - I0).real) == pytest.approx(1e-3, rel=0.05)


def test_polar_form_close_to_linear(rng):
    f = random_feeder(4, rng)
    P, Q = 1e-4 * rng.normal(size=(4, 3)), 1e-4 * rng.normal(size=(4, 3))
    Ul, _ = simulate_phasors(f, P, Q, noise_sd=0)
    Up, _ = simulate_phasors(f, P, Q, noise_sd=0, form="polar")
    assert np.abs(Ul - Up).max() < 1e-6


def test_probing_single_step():
    f = random_feeder(6, np.random.default_rng(5))
    R = build_topology_matrices(f).R
    ms = generate_probing_sequence(f, [4], 0.02, 2, noise_sd=0, pattern="cyclic")
    assert ms.dV.shape == (6, 1)
    assert np.allclose(ms.dV[:, 0], 0.02 * R[:, 3], atol=1e-15)
    assert np.all(ms.dP[np.arange(6) != 3] == 0)


def test_probing_noise_doubles_variance(rng):
    f = random_feeder(5, rng)
    s = 1e-3
    ms = generate_probing_sequence(f, f.leaves, 0.01, 20_001, noise_sd=s, rng=rng)
    R = build_topology_matrices(f).R
    resid = ms.dV - R @ ms.dP
    assert resid.var() == pytest.approx(2 * s**2, rel=0.05)


def test_probing_rank_and_errors(rng):
    f = random_feeder(10, rng)
    ms = generate_probing_sequence(f, f.leaves, 0.05, len(f.leaves) + 3, noise_sd=0, rng=rng)
    rows = [b - 1 for b in f.leaves]
    assert np.linalg.matrix_rank(ms.dP[rows]) == len(f.leaves)
    assert ms.dP.shape[1] == ms.dV.shape[1] == ms.T - 1 == len(f.leaves) + 2
    with pytest.raises(DegenerateProbingError):
        generate_probing_sequence(f, f.leaves, 0.0, 5)
    bg = InjectionModel.random(10, rng)
    ms = generate_probing_sequence(f, [2], 0.05, 50, background=bg, noise_sd=0, rng=rng)
    others = [i for i in range(10) if i != 1]
    assert np.any(ms.dP[others] != 0)  # background drift enters the other buses


def test_analytic_covariance_formula(rng):
    f = random_feeder(6, rng)
    m = InjectionModel.random(6, rng)
    b = analytic_covariances(f, m)
    R, X = path_sum_matrix(f, f.r), path_sum_matrix(f, f.x)
    Spp, Sqq, Spq = m.cov_pp, m.cov_qq, m.cov_pq
    vv = R @ Spp @ R + X @ Sqq @ X + R @ Spq @ X + X @ Spq.T @ R
    assert np.allclose(b.vv, vv, atol=1e-15)
    assert np.allclose(b.vp, R @ Spp + X @ Spq.T, atol=1e-15)
    assert np.allclose(b.vq, R @ Spq + X @ Sqq, atol=1e-15)
    for M in (b.vv, b.vtheta):
        assert np.allclose(M, M.T) and np.linalg.eigvalsh(M).min() > -1e-15
    noisy = analytic_covariances(f, m, noise_sd=1e-3)
    assert np.allclose(noisy.vv - b.vv, 1e-6 * np.eye(6))


def test_sample_covariances_converge_and_center(rng):
    f = random_feeder(5, rng)
    m = InjectionModel.random(5, rng)
    P, Q = sample_injections(m, 100_000, rng)
    V, th = simulate_voltages_linear(f, P, Q, noise_sd=0)
    ms = MeasurementSet("magnitude", list(range(1, 6)), V=V, theta=th, P=P, Q=Q)
    s = sample_covariances(ms)
    a = analytic_covariances(f, m)
    for name in ("vv", "vp", "vq", "pp", "qq", "vtheta"):
        assert relerr(getattr(s, name), getattr(a, name)) < 0.05, name
    const = MeasurementSet("magnitude", [1, 2], V=np.ones((2, 10)) * 1.01)
    assert np.all(sample_covariances(const).vv == 0)
    with pytest.raises(InsufficientDataError):
        sample_covariances(MeasurementSet("magnitude", [1], V=np.ones((1, 1))))


def test_measurement_csv_roundtrip(tmp_path, rng):
    f = random_feeder(3, rng)
    U, I = simulate_phasors(f, rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), noise_sd=1e-3, rng=rng)
    ms = MeasurementSet("phasor", [1, 2, 3], U=U, I=I)
    ms.to_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "t,bus,kind,value_re,value_im"
    back = MeasurementSet.from_csv(tmp_path / "m.csv")
    assert back.kind == "phasor" and np.array_equal(back.U, U) and np.array_equal(back.I, I)
    with pytest.raises(ValueError):
        MeasurementSet("magnitude", [1, 2], V=np.ones((3, 2)))


def test_bundle_json_and_restrict(rng):
    f = random_feeder(4, rng)
    b = analytic_covariances(f, InjectionModel.random(4, rng))
    back = CovarianceBundle.from_json(b.to_json())
    assert np.array_equal(back.vv, b.vv) and back.kind == "analytic"
    sub = b.restrict([2, 4])
    assert np.array_equal(sub.vv, b.vv[np.ix_([1, 3], [1, 3])])
    assert sub.vtheta.shape == (4, 4) and sub.vtheta[2, 3] == b.vtheta[5, 7]
