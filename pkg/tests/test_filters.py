import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from gridkal.discretization import (
    DescriptorSystem,
    MeshSpec,
    assemble_linear,
    assemble_output,
    linearize_friction,
    noise_amplitude,
    stationary_solve,
)
from gridkal.filters import (
    DiscreteFilterModel,
    FilterError,
    OUParams,
    augment_basis,
    build_filter_model,
    build_reduced_filter_model,
    covariance_defect,
    cskf_matrices,
    filter_inputs,
    initial_state,
    kf_correct,
    kf_predict,
    load_gains,
    precompute_gains,
    prolong_estimate,
    run_cskf,
    run_enkf,
    run_kf,
    run_rkf,
    save_gains,
)
from gridkal.mor import build_basis, identity_basis
from gridkal.network import builtin_diamond
from gridkal.simulation import BoundarySignal, Segment, boundary_inputs, simulate_linear, synthesize_measurements

from conftest import two_pipe

TAU, THETA = 0.02, 0.51


def scalar_system(E=1.0, A=-1.0):
    return DescriptorSystem(np.array([[E]]), np.array([[A]]), np.zeros((1, 0)), np.zeros((0, 1)),
                            np.arange(1), np.arange(0), np.arange(0), (), (), np.eye(1))


def scalar_model(phi=1.0, q=1.0, h=1.0, r=1.0):
    return DiscreteFilterModel.from_matrices([[phi]], [[0.0]], [q], [[h]], [[r]])


# ---- model assembly -------------------------------------------------------

def test_scalar_transition():
    model = build_filter_model(scalar_system(), OUParams(np.zeros(0), np.zeros(0), np.zeros(0)),
                               TAU, THETA, np.zeros(1), np.zeros((0, 0)))
    expected = (1 - TAU * (1 - THETA)) / (1 + TAU * THETA)
    assert model.transition()[0, 0] == pytest.approx(expected, rel=1e-14)
    assert model.transition()[0, 0] == pytest.approx(0.98020, abs=5e-6)


@pytest.fixture(scope="module")
def two_pipe_setup():
    net = linearize_friction(two_pipe(), stationary_solve(two_pipe(), {"v1": 3.0, "v3": 2.0}))
    sys = assemble_output(net, assemble_linear(net, MeshSpec(4)), ["v1", "v3"])
    stat = stationary_solve(two_pipe(), {"v1": 3.0, "v3": 2.0}, MeshSpec(4))
    Z = noise_amplitude(two_pipe(), sys, stat)
    ou = OUParams(np.array([3.0, 3.0]), np.array([0.5, 0.0]), np.array([0.2, 0.2]))
    return net, sys, stat, Z, ou


def test_ou_block_and_noise(two_pipe_setup):
    _, sys, _, Z, ou = two_pipe_setup
    model = build_filter_model(sys, ou, TAU, THETA, Z, 1e-4 * np.eye(2))
    Phi = model.transition()
    N = sys.N
    np.testing.assert_allclose(np.diag(Phi[N:, N:]), 1 / 1.06, rtol=1e-14)
    np.testing.assert_allclose(model.Psi[N:, -1], [0.02 / 1.06 * 3 * 0.5, 0.0], rtol=1e-14)
    np.testing.assert_allclose(model.Q[N:], 8e-4, rtol=1e-14)
    assert np.all(model.Q >= 0) and not model.Q[sys.multiplier].any()
    assert not model.H[:, N:].any()
    np.testing.assert_array_equal(model.H[:, :N], sys.C.toarray())
    # top block of Φ matches the θ-scheme applied to a unit state
    At = (sys.E - TAU * THETA * sys.A).toarray()
    ref = np.linalg.solve(At, (sys.E + TAU * (1 - THETA) * sys.A).toarray())
    np.testing.assert_allclose(Phi[:N, :N], ref, atol=1e-12)
    np.testing.assert_allclose(Phi[:N, N:], TAU * np.linalg.solve(At, sys.B.toarray()), atol=1e-12)


@pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
def test_model_errors(two_pipe_setup):
    _, sys, _, Z, ou = two_pipe_setup
    bad = Z.copy()
    bad[sys.multiplier] = 1.0
    with pytest.raises(FilterError, match="multiplier"):
        build_filter_model(sys, ou, TAU, THETA, bad, np.eye(2))
    with pytest.raises(FilterError, match="positive definite"):
        build_filter_model(sys, ou, TAU, THETA, Z, np.zeros((2, 2)))
    with pytest.raises(FilterError, match="OU"):
        build_filter_model(sys, OUParams(np.ones(1), np.zeros(1), np.ones(1)), TAU, THETA, Z, np.eye(2))
    with pytest.raises(FilterError, match="singular"):
        build_filter_model(scalar_system(E=0.0, A=0.0), OUParams(np.zeros(0), np.zeros(0), np.zeros(0)),
                           TAU, THETA, np.zeros(1), np.zeros((0, 0)))


def test_filter_inputs():
    uD = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    u = filter_inputs(uD, 0.5)
    np.testing.assert_allclose(u, [[2.0, 3.0, 1.0], [4.0, 5.0, 1.0]])


# ---- single steps ---------------------------------------------------------

def test_predict_and_correct_scalar():
    model = scalar_model()
    s = kf_predict(initial_state([0.0], [[1.0]]), model, np.zeros(1))
    assert s.x_pred[0] == 0.0 and s.P_pred[0, 0] == 2.0
    s = kf_correct(s, model, np.array([1.0]))
    assert s.K_gain[0, 0] == pytest.approx(2 / 3, rel=1e-15)
    assert s.x_corr[0] == pytest.approx(2 / 3, rel=1e-15)
    assert s.P_corr[0, 0] == pytest.approx(2 / 3, rel=1e-15)


def test_predict_trivial_cases(rng):
    M = rng.standard_normal((4, 4))
    P = M @ M.T
    model = DiscreteFilterModel.from_matrices(np.eye(4), np.zeros((4, 1)), np.zeros(4), np.eye(4), np.eye(4))
    s = kf_predict(initial_state(np.zeros(4), P), model, np.zeros(1))
    np.testing.assert_allclose(s.P_pred, P, atol=1e-14)
    assert not s.x_pred.any()
    with pytest.raises(FilterError):
        kf_predict(initial_state(np.zeros(3), np.eye(3)), model, np.zeros(1))
    with pytest.raises(FilterError):
        kf_correct(initial_state(np.zeros(4), P), model, np.zeros(4))


def test_correct_limits(rng):
    M = rng.standard_normal((3, 3))
    P = M @ M.T + np.eye(3)
    x = rng.standard_normal(3)
    y = rng.standard_normal(3)
    for r, check in ((1e12, lambda s: np.linalg.norm(s.x_corr - x) <= 1e-6 * np.linalg.norm(x)),
                     (1e-14, lambda s: np.allclose(s.x_corr, y, atol=1e-6))):
        model = DiscreteFilterModel.from_matrices(np.eye(3), np.zeros((3, 1)), np.zeros(3), np.eye(3),
                                                  r * np.eye(3))
        s = kf_predict(initial_state(x, P), model, np.zeros(1))
        assert check(kf_correct(s, model, y))


def test_singular_innovation():
    model = DiscreteFilterModel.from_matrices([[1.0]], [[0.0]], [0.0], [[1.0]], [[1.0]])
    model.R = np.zeros((1, 1))
    s = kf_predict(initial_state([0.0], [[0.0]]), model, np.zeros(1))
    with pytest.raises(FilterError, match="innovation"):
        kf_correct(s, model, np.zeros(1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2 ** 31))
def test_covariances_stay_psd(n, m, seed):
    rng = np.random.default_rng(seed)
    Phi = rng.standard_normal((n, n))
    Phi /= max(1.0, np.max(np.abs(np.linalg.eigvals(Phi))))
    model = DiscreteFilterModel.from_matrices(Phi, np.zeros((n, 1)), rng.uniform(0, 1, n),
                                              rng.standard_normal((m, n)), np.diag(rng.uniform(0.1, 1, m)))
    s = initial_state(np.zeros(n), np.eye(n))
    for _ in range(20):
        s = kf_correct(kf_predict(s, model, np.zeros(1)), model, rng.standard_normal(m))
        for P in (s.P_pred, s.P_corr):
            np.testing.assert_array_equal(P, P.T)
            assert covariance_defect(P) >= -1e-10


# ---- gains ----------------------------------------------------------------

def test_precompute_scalar_and_zero():
    g = precompute_gains(scalar_model(), np.eye(1), 1)
    assert g.gains[0, 0, 0] == pytest.approx(2 / 3, rel=1e-15)
    g0 = precompute_gains(scalar_model(q=0.0), np.zeros((1, 1)), 5)
    assert not g0.gains.any()


def test_gains_independent_of_data(two_pipe_setup, tmp_path):
    _, sys, _, Z, ou = two_pipe_setup
    model = build_filter_model(sys, ou, TAU, THETA, Z, 1e-4 * np.eye(2))
    a = precompute_gains(model, model.Q_matrix, 30)
    b = precompute_gains(model, model.Q_matrix, 30)
    assert a.digest == b.digest
    h = save_gains(a, tmp_path / "gains")
    loaded = load_gains(tmp_path / "gains", model, model.Q_matrix)
    assert loaded.digest == h
    with pytest.raises(FilterError, match="different model"):
        load_gains(tmp_path / "gains", model, 2 * model.Q_matrix)


def signals_for(nodes, sigma=0.2, mu=0.5):
    v1 = BoundarySignal(nodes[0], (Segment("linear", 0, 0.2, v0=3, v1=3.5), Segment("constant", 0.2, 10, value=3.5)),
                        kappa=3.0, mu=mu, sigma=sigma)
    return [v1, BoundarySignal.constant(nodes[1], 2.0, 10.0, kappa=3.0, sigma=sigma)]


def scenario(two_pipe_setup, K=40, seed=7, sigma=0.2, pct=0.01, mu=0.5):
    net, sys, stat, Z, ou = two_pipe_setup
    sigs = signals_for(["v1", "v3"], sigma, mu)
    traj = simulate_linear(sys, sigs, stat.vector, TAU, THETA, K, seed=seed)
    meas = synthesize_measurements(traj, net, MeshSpec(4), ["v1", "v3"], pct, seed) if pct else None
    uD, _ = boundary_inputs(sigs, sys.boundary, TAU, K, seed)
    x0 = np.concatenate([stat.vector, np.zeros(2)])
    return traj, meas, filter_inputs(uD, THETA), x0


def test_streaming_equals_precomputed(two_pipe_setup):
    _, sys, _, Z, ou = two_pipe_setup
    traj, meas, u, x0 = scenario(two_pipe_setup)
    model = build_filter_model(sys, ou, TAU, THETA, Z, meas.R)
    s = run_kf(model, u, meas.y, x0)
    p = run_kf(model, u, meas.y, x0, gains=precompute_gains(model, model.Q_matrix, len(u)))
    assert s.gain_mode == "streaming" and p.gain_mode == "precomputed"
    np.testing.assert_allclose(p.x, s.x, rtol=1e-12, atol=1e-12 * np.abs(s.x).max())
    # a different measurement realization gives different estimates but the same gains
    _, meas2, _, _ = scenario(two_pipe_setup, seed=8)
    g1 = precompute_gains(build_filter_model(sys, ou, TAU, THETA, Z, meas.R), model.Q_matrix, len(u))
    g2 = precompute_gains(build_filter_model(sys, ou, TAU, THETA, Z, meas.R), model.Q_matrix, len(u))
    assert g1.digest == g2.digest
    assert not np.allclose(run_kf(model, u, meas2.y, x0, gains=g1).x, p.x)


def test_zero_noise_tracks_linear_model(two_pipe_setup):
    _, sys, _, _, ou = two_pipe_setup
    traj, _, u, x0 = scenario(two_pipe_setup, sigma=0.0, pct=0, mu=0.0)
    quiet = OUParams(ou.kappa, np.zeros(2), np.zeros(2))
    model = build_filter_model(sys, quiet, TAU, THETA, np.zeros(sys.N), 1e-14 * np.eye(2))
    y = traj.states[1:] @ sys.C.toarray().T
    est = run_kf(model, u, y, x0, P0=np.zeros((model.dim, model.dim)))
    np.testing.assert_allclose(est.x[:, :sys.N], traj.states[1:], atol=1e-8)


def test_series_checks(two_pipe_setup):
    _, sys, _, Z, ou = two_pipe_setup
    model = build_filter_model(sys, ou, TAU, THETA, Z, np.eye(2))
    with pytest.raises(FilterError):
        run_kf(model, np.zeros((5, 3)), np.zeros((4, 2)), np.zeros(model.dim))
    with pytest.raises(FilterError):
        run_kf(model, np.zeros((5, 2)), np.zeros((5, 2)), np.zeros(model.dim))
    with pytest.raises(FilterError):
        run_kf(model, np.zeros((5, 3)), np.zeros((5, 2)), np.zeros(3))


# ---- reduced and low-rank filters ----------------------------------------

def test_rkf_and_cskf_with_identity_equal_kf(two_pipe_setup):
    _, sys, _, Z, ou = two_pipe_setup
    _, meas, u, x0 = scenario(two_pipe_setup)
    model = build_filter_model(sys, ou, TAU, THETA, Z, meas.R)
    kf = run_kf(model, u, meas.y, x0)
    basis = identity_basis(sys)
    rkf = prolong_estimate(run_rkf(sys, basis, ou, TAU, THETA, Z, meas.R, u, meas.y, x0))
    cskf = run_cskf(model, augment_basis(basis, 2), u, meas.y, x0)
    scale = np.linalg.norm(kf.x, axis=1)
    for est in (rkf, cskf):
        assert np.max(np.linalg.norm(est.x - kf.x, axis=1) / scale) <= 1e-9


def test_prolongation():
    rng = np.random.default_rng(3)
    Vx = np.linalg.qr(rng.standard_normal((10, 4)))[0]
    from gridkal.filters import EstimateTrajectory
    xr = rng.standard_normal((6, 4))
    red = EstimateTrajectory(xr, "reduced", "precomputed", {"offline_s": 0, "online_s": 0, "postproc_s": 0},
                             {3: np.eye(4)}, Vx)
    full = prolong_estimate(red, cov_steps=[3])
    np.testing.assert_allclose(np.linalg.norm(full.x, axis=1), np.linalg.norm(xr, axis=1), rtol=1e-12)
    np.testing.assert_allclose(full.covariances[3], Vx @ Vx.T, atol=1e-14)
    assert full.timing["online_s"] == 0 and full.timing["postproc_s"] >= 0
    zero = EstimateTrajectory(np.zeros((2, 4)), "reduced", "precomputed", {}, basis=Vx)
    assert not prolong_estimate(zero).x.any()
    ident = EstimateTrajectory(xr, "reduced", "precomputed", {}, basis=np.eye(4))
    np.testing.assert_array_equal(prolong_estimate(ident).x, xr)
    with pytest.raises(FilterError):
        prolong_estimate(red, np.eye(5))
    with pytest.raises(FilterError):
        prolong_estimate(red, cov_steps=[4])


def test_reduced_initial_state_within_projection_residual(two_pipe_setup):
    _, sys, stat, Z, ou = two_pipe_setup
    basis = build_basis(sys, 6)
    Vx = augment_basis(basis, 2).Vx
    x0 = np.concatenate([stat.vector, np.zeros(2)])
    residual = np.linalg.norm(x0 - Vx @ (Vx.T @ x0))
    _, meas, u, _ = scenario(two_pipe_setup, K=1)
    est = run_rkf(sys, basis, ou, TAU, THETA, Z, meas.R, u, meas.y, x0)
    assert est.x.shape == (1, basis.n + 2) and est.tag == "reduced"
    assert np.linalg.norm(Vx @ (Vx.T @ x0) - x0) == pytest.approx(residual)


def test_transition_matrices_differ_on_diamond():
    net = builtin_diamond()
    stl = stationary_solve(net, {"v1": 3.0, "v2": 2.0})
    mesh = MeshSpec(20)
    lin = linearize_friction(net, stl)
    sys = assemble_output(lin, assemble_linear(lin, mesh), ["v1", "v2"])
    stat = stationary_solve(net, {"v1": 2.0, "v2": 2.0}, mesh)
    Z = noise_amplitude(net, sys, stat)
    ou = OUParams(np.full(2, 3.0), np.zeros(2), np.full(2, 0.2))
    basis = build_basis(sys, 29)
    full = build_filter_model(sys, ou, TAU, THETA, Z, 1e-4 * np.eye(2))
    red = build_reduced_filter_model(sys, basis, ou, TAU, THETA, Z, 1e-4 * np.eye(2))
    Phi_t, H_t, Q_t = cskf_matrices(full, augment_basis(basis, 2).Vx)
    n = basis.n
    assert red.dim == 31
    assert np.linalg.norm(red.Phi[:n, :n] - Phi_t[:n, :n]) > 1e-6
    np.testing.assert_allclose(H_t, red.H, atol=1e-12)
    np.testing.assert_allclose(Q_t, red.Q, atol=1e-15)


# ---- ensemble filter ------------------------------------------------------

def test_enkf_degenerate_ensemble(two_pipe_setup):
    _, sys, _, _, ou = two_pipe_setup
    _, meas, u, x0 = scenario(two_pipe_setup)
    quiet = OUParams(ou.kappa, ou.mu, np.zeros(2))
    model = build_filter_model(sys, quiet, TAU, THETA, np.zeros(sys.N), meas.R)
    est = run_enkf(model, 5, u, meas.y, x0, P0=np.zeros((model.dim, model.dim)), perturb=False)
    # a collapsed ensemble has zero spread, hence zero gain: pure prediction
    x, ref = x0, []
    for k in range(len(u)):
        x = model.predict_mean(x, u[k])
        ref.append(x)
    np.testing.assert_allclose(est.x, np.array(ref), atol=1e-12)
    assert est.gain_mode == "ensemble"


def test_enkf_reproducible_and_errors(two_pipe_setup):
    _, sys, _, Z, ou = two_pipe_setup
    _, meas, u, x0 = scenario(two_pipe_setup, K=10)
    model = build_filter_model(sys, ou, TAU, THETA, Z, meas.R)
    a = run_enkf(model, 20, u, meas.y, x0, seed=5)
    b = run_enkf(model, 20, u, meas.y, x0, seed=5)
    c = run_enkf(model, 20, u, meas.y, x0, seed=6)
    np.testing.assert_array_equal(a.x, b.x)
    assert not np.array_equal(a.x, c.x)
    with pytest.raises(FilterError, match="at least 2"):
        run_enkf(model, 1, u, meas.y, x0)


def test_enkf_converges_to_kf():
    model = DiscreteFilterModel.from_matrices([[0.95]], [[0.1]], [0.04], [[1.0]], [[0.25]])
    K = 50
    rng = np.random.default_rng(11)
    u = np.ones((K, 1))
    y = rng.standard_normal((K, 1))
    steps = (10, 30, 50)
    kf = run_kf(model, u, y, np.array([1.0]), P0=np.eye(1), keep_cov=steps)
    en = run_enkf(model, 50000, u, y, np.array([1.0]), P0=np.eye(1), seed=2, keep_cov=steps)
    for k in steps:
        assert en.covariances[k][0, 0] == pytest.approx(kf.covariances[k][0, 0], rel=0.05)
    sd = np.sqrt(kf.covariances[50][0, 0])
    np.testing.assert_allclose(en.x, kf.x, atol=0.05 * sd + 0.02)
