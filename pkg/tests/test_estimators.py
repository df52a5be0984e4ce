from collections import deque

import numpy as np
import pytest

from koopman_mhe import numerics
from koopman_mhe.centroidal_sim import (Channel, ContactSet, NoiseConfig, RobotParams, Trajectory,
                                        add_noise, build_gait_schedule, centroidal_derivative,
                                        integrate_step, simulate)
from koopman_mhe.dmdc import DIM_U, KoopmanModel, encode_input
from koopman_mhe.estimators import (BlockTridiagonal, EkfConfig, EkfState, MheConfig, MheWindow,
                                    build_qp, dynamics_jacobian, ekf_predict, ekf_update,
                                    kalman_oracle, kkt_residual, mhe_step, projected_gradient,
                                    run_estimator, solve_qp)

NX = 9


def spd(rng, scale=1.0):
    g = rng.standard_normal((NX, NX))
    return scale * (g @ g.T / NX + np.eye(NX))


def random_model(seed, radius=0.9):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((NX, NX))
    A *= radius / np.abs(np.linalg.eigvals(A)).max()
    return KoopmanModel(A, 0.1 * rng.standard_normal((NX, DIM_U)), 1e-3, 1e-8)


def random_config(seed, horizon=10, **kw):
    rng = np.random.default_rng(seed)
    return MheConfig(horizon, spd(rng), spd(rng), spd(rng), **kw)


def filled_window(model, n, seed):
    rng = np.random.default_rng(seed)
    w = MheWindow(model, rng.standard_normal(NX))
    for _ in range(n):
        w.buffer.append((rng.standard_normal(NX), rng.standard_normal(DIM_U)))
    return w


def random_contacts(rng):
    b = rng.integers(0, 2, 4)
    r = rng.normal(0, 0.3, (4, 3))
    f = rng.normal(0, 40, (4, 3)) * b[:, None]
    return ContactSet(b, r, f)


# ---------------------------------------------------------------- QP assembly

def test_qp_single_state_window():
    cfg = random_config(0)
    w = filled_window(random_model(0), 1, 1)
    qp = build_qp(w, cfg)
    y = w.buffer[0][0]
    np.testing.assert_allclose(qp.H.to_dense(), cfg.P_x + cfg.P_v, atol=1e-14)
    np.testing.assert_allclose(qp.g, -(cfg.P_x @ w.prior + cfg.P_v @ y), atol=1e-12)


def test_qp_block_bandwidth():
    H = build_qp(filled_window(random_model(1), 6, 2), random_config(1)).H.to_dense()
    for i in range(6):
        for j in range(6):
            if abs(i - j) >= 2:
                assert not H[9 * i:9 * i + 9, 9 * j:9 * j + 9].any()
    assert np.array_equal(H, H.T)
    assert np.linalg.eigvalsh(H).min() > 0


@pytest.mark.parametrize("seed", range(4))
def test_qp_matches_term_by_term_cost(seed):
    rng = np.random.default_rng(seed)
    model, cfg = random_model(seed), random_config(seed)
    w = filled_window(model, 7, seed)
    qp = build_qp(w, cfg)
    z = rng.standard_normal((7, NX))
    cost = 0.5 * (z[0] - w.prior) @ cfg.P_x @ (z[0] - w.prior)
    for k, (y, u) in enumerate(w.buffer):
        v = y - z[k]
        cost += 0.5 * v @ cfg.P_v @ v
        if k < 6:
            wk = z[k + 1] - model.A @ z[k] - model.B @ u
            cost += 0.5 * wk @ cfg.P_w @ wk
    assert abs(qp.objective(z.reshape(-1)) - cost) <= 1e-10 * max(1.0, abs(cost))


def test_build_qp_empty_window():
    with pytest.raises(ValueError):
        build_qp(MheWindow(random_model(0), np.zeros(NX)), random_config(0))


# ---------------------------------------------------------------- QP solve

def test_solve_qp_identity():
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(solve_qp(np.eye(3), -b), b, atol=1e-15)


def test_solve_qp_clipped_separable():
    z = solve_qp(np.eye(2), -np.array([2.0, 2.0]), upper=np.ones(2))
    assert np.array_equal(z, [1.0, 1.0])


def test_solve_qp_27_elimination_oracle():
    rng = np.random.default_rng(27)
    g = rng.standard_normal((27, 27))
    H = g @ g.T + 27 * np.eye(27)
    b = rng.standard_normal(27)
    np.testing.assert_allclose(solve_qp(H, -b), np.linalg.solve(H, b), atol=1e-9)
    # same size through the block-tridiagonal path, oracle on the dense form
    bt = build_qp(filled_window(random_model(2), 3, 3), random_config(2)).H
    assert bt.shape == (27, 27)
    np.testing.assert_allclose(solve_qp(bt, -b), numerics.solve_spd(bt.to_dense(), b), atol=1e-9)


def test_block_tridiagonal_matvec_matches_dense():
    rng = np.random.default_rng(4)
    H = build_qp(filled_window(random_model(4), 5, 4), random_config(4)).H
    z = rng.standard_normal(H.shape[0])
    np.testing.assert_allclose(H.matvec(z), H.to_dense() @ z, atol=1e-12)
    with pytest.raises(ValueError):
        BlockTridiagonal(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)))


@pytest.mark.parametrize("seed", range(3))
def test_bounded_qp_keeps_bounds_and_stationarity(seed):
    rng = np.random.default_rng(seed)
    lo, hi = -0.3 * np.ones(NX), 0.4 * np.ones(NX)
    cfg = random_config(seed, lower=lo, upper=hi)
    w = filled_window(random_model(seed), 8, seed + 20)
    qp = build_qp(w, cfg)
    z = solve_qp(qp.H, qp.g, qp.lower, qp.upper)
    assert np.all(z >= qp.lower) and np.all(z <= qp.upper)
    assert np.any(z == qp.lower) or np.any(z == qp.upper)
    assert np.linalg.norm(projected_gradient(qp.H, qp.g, z, qp.lower, qp.upper)) <= 1e-8 * (
        1.0 + np.abs(qp.g).max())
    # no feasible point does better than the returned one
    best = qp.objective(z)
    for _ in range(50):
        trial = np.clip(z + 0.05 * rng.standard_normal(z.size), qp.lower, qp.upper)
        assert qp.objective(trial) >= best - 1e-12


def test_bounded_mhe_step_respects_bounds():
    lo, hi = -0.5 * np.ones(NX), 0.5 * np.ones(NX)
    cfg = random_config(5, horizon=5, lower=lo, upper=hi)
    rng = np.random.default_rng(5)
    w = MheWindow(random_model(5), np.zeros(NX))
    for _ in range(12):
        x = mhe_step(w, cfg, rng.standard_normal(NX), rng.standard_normal(DIM_U))
        assert np.all(x >= lo) and np.all(x <= hi)
        assert np.all(w.solution >= lo) and np.all(w.solution <= hi)
        assert w.last_kkt <= 1e-8


def test_mhe_config_validation():
    with pytest.raises(ValueError):
        MheConfig(0, np.eye(NX), np.eye(NX), np.eye(NX))
    with pytest.raises(ValueError):
        MheConfig(5, -np.eye(NX), np.eye(NX), np.eye(NX))
    with pytest.raises(ValueError):
        MheConfig(5, np.eye(NX), np.eye(NX), np.eye(NX), np.ones(NX), np.zeros(NX))


# ---------------------------------------------------------------- MHE behaviour

def test_window_one_average():
    cfg = MheConfig(1, np.eye(NX), np.eye(NX), np.eye(NX))
    prior = np.arange(9.0)
    y = -np.ones(9)
    x = mhe_step(MheWindow(random_model(0), prior), cfg, y, np.zeros(DIM_U))
    np.testing.assert_allclose(x, (prior + y) / 2, atol=1e-14)


def test_window_one_hand_normal_equations():
    rng = np.random.default_rng(6)
    cfg = MheConfig(1, spd(rng), spd(rng), spd(rng))
    prior, y = rng.standard_normal(NX), rng.standard_normal(NX)
    x = mhe_step(MheWindow(random_model(0), prior), cfg, y, np.zeros(DIM_U))
    np.testing.assert_allclose(x, np.linalg.solve(cfg.P_x + cfg.P_v,
                                                  cfg.P_x @ prior + cfg.P_v @ y), atol=1e-12)


def test_window_slides_and_shifts_prior():
    model, cfg = random_model(7), random_config(7, horizon=4)
    rng = np.random.default_rng(7)
    w = MheWindow(model, np.zeros(NX))
    for k in range(4):
        mhe_step(w, cfg, rng.standard_normal(NX), rng.standard_normal(DIM_U))
    second = w.solution[1].copy()
    mhe_step(w, cfg, rng.standard_normal(NX), rng.standard_normal(DIM_U))
    assert len(w.buffer) == 4
    np.testing.assert_array_equal(w.prior, second)


@pytest.mark.parametrize("seed", range(3))
def test_model_consistent_measurements_are_reproduced(seed):
    model, cfg = random_model(seed), random_config(seed, horizon=6)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(NX)
    w = MheWindow(model, x)
    for _ in range(20):
        u = rng.standard_normal(DIM_U)
        est = mhe_step(w, cfg, x, u)
        np.testing.assert_allclose(est, x, atol=1e-8)
        x = model.A @ x + model.B @ u


@pytest.mark.parametrize("seed", range(3))
def test_full_information_matches_kalman_oracle(seed):
    rng = np.random.default_rng(seed)
    model = random_model(seed + 100, radius=1.0)
    Q, R, P0 = spd(rng, 0.01), spd(rng, 0.1), spd(rng)
    n = 120
    us = rng.standard_normal((n, DIM_U))
    x = rng.standard_normal(NX)
    ys = np.empty((n, NX))
    for k in range(n):
        ys[k] = x + rng.multivariate_normal(np.zeros(NX), R)
        x = model.A @ x + model.B @ us[k] + rng.multivariate_normal(np.zeros(NX), Q)
    x0 = rng.standard_normal(NX)
    kf = kalman_oracle(model.A, model.B, np.eye(NX), Q, R, P0, x0, ys, us)
    cfg = MheConfig(n, np.linalg.inv(P0), np.linalg.inv(Q), np.linalg.inv(R))
    w = MheWindow(model, x0)
    for k in range(n):
        est = mhe_step(w, cfg, ys[k], us[k])
        assert np.abs(est - kf[k]).max() <= 1e-6


def test_weight_scaling_invariance():
    cfg = random_config(8)
    w = filled_window(random_model(8), 9, 8)
    base = solve_qp(build_qp(w, cfg).H, build_qp(w, cfg).g)
    for alpha in (1e-3, 7.0, 1e4):
        sc = cfg.scaled(alpha)
        qp = build_qp(w, sc)
        z = solve_qp(qp.H, qp.g)
        np.testing.assert_allclose(z, base, atol=1e-9)
        assert kkt_residual(qp.H, qp.g, z) <= 1e-8


# ---------------------------------------------------------------- EKF

def test_ekf_static_case():
    params = RobotParams(mass=10.0, gravity=(0.0, 0.0, 0.0))
    rng = np.random.default_rng(0)
    x = rng.standard_normal(NX)
    x[3:6] = 0.0
    # momentum known to be zero, so the position/momentum coupling moves nothing
    P = spd(rng)
    P[3:6, :] = 0.0
    P[:, 3:6] = 0.0
    s = ekf_predict(EkfState(x, P, np.zeros((NX, NX)), np.eye(NX)),
                    ContactSet(np.zeros(4, int), np.zeros((4, 3)), np.zeros((4, 3))), params, 1e-3)
    np.testing.assert_array_equal(s.x, x)
    np.testing.assert_allclose(s.P, 0.5 * (P + P.T), atol=1e-15, rtol=0)


def test_jacobian_structure():
    flight = ContactSet(np.zeros(4, int), np.zeros((4, 3)), np.zeros((4, 3)))
    J = dynamics_jacobian(np.zeros(NX), flight, RobotParams(mass=10.0))
    expected = np.zeros((NX, NX))
    expected[0:3, 3:6] = 0.1 * np.eye(3)
    np.testing.assert_array_equal(J, expected)
    F = np.eye(NX) + 1e-3 * J
    np.testing.assert_array_equal(F[6:9], np.eye(NX)[6:9])
    f = np.zeros((4, 3))
    f[1] = [0, 0, 50]
    one = ContactSet(np.array([0, 1, 0, 0]), np.zeros((4, 3)), f)
    J = dynamics_jacobian(np.zeros(NX), one, RobotParams(mass=10.0))
    np.testing.assert_array_equal(J[6:9, 0:3], numerics.skew([0, 0, 50]))


@pytest.mark.parametrize("seed", range(100))
def test_jacobian_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = RobotParams()
    x = rng.standard_normal(NX)
    cs = random_contacts(rng)
    J = dynamics_jacobian(x, cs, params)
    h = 1e-6
    fd = np.empty((NX, NX))
    for j in range(NX):
        e = np.zeros(NX)
        e[j] = h
        fd[:, j] = (centroidal_derivative(x + e, cs, params)
                    - centroidal_derivative(x - e, cs, params)) / (2 * h)
    assert np.linalg.norm(J - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))
    # one-step map against F = I + dt J
    dt = 1e-3
    fd_step = np.empty((NX, NX))
    for j in range(NX):
        e = np.zeros(NX)
        e[j] = h
        fd_step[:, j] = (integrate_step(x + e, cs, params, dt)
                         - integrate_step(x - e, cs, params, dt)) / (2 * h)
    F = np.eye(NX) + dt * J
    assert np.linalg.norm(F - fd_step) <= 1e-5 * np.linalg.norm(fd_step)


def test_ekf_update_no_trust_limit():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(NX)
    s = ekf_update(EkfState(x, np.eye(NX), np.eye(NX), 1e12 * np.eye(NX)), x + 5.0)
    np.testing.assert_allclose(s.x, x, atol=1e-6)


def test_ekf_update_equal_covariances():
    x, y = np.zeros(NX), np.arange(9.0)
    s = ekf_update(EkfState(x, np.eye(NX), np.eye(NX), np.eye(NX)), y)
    np.testing.assert_allclose(s.x, y / 2, atol=1e-15)
    np.testing.assert_allclose(s.P, 0.5 * np.eye(NX), atol=1e-15)


def test_joseph_form_stays_psd():
    rng = np.random.default_rng(2)
    params = RobotParams()
    s = EkfState(np.zeros(NX), np.eye(NX), 1e-6 * np.eye(NX), np.diag(np.logspace(-8, 2, NX)))
    worst = np.inf
    for k in range(10_000):
        s = ekf_predict(s, random_contacts(rng), params, 1e-3)
        s = ekf_update(s, rng.standard_normal(NX))
        assert np.array_equal(s.P, s.P.T)
        if k % 50 == 0:
            worst = min(worst, float(numerics.eigenvalues(s.P).real.min()))
    assert worst >= -1e-10


# ---------------------------------------------------------------- Kalman oracle

def test_kalman_oracle_guard():
    with pytest.raises(ValueError):
        kalman_oracle(1, 0, 1, 0, 0, 1, 0, [1.0], [0.0])


def test_kalman_oracle_scalar_constant_converges_monotonically():
    est = kalman_oracle(1, 0, 1, 0, 1, 1, 0, np.full(50, 3.0), np.zeros(50))[:, 0]
    assert np.all(np.diff(est) > 0) and np.all(est < 3.0)
    assert abs(est[-1] - 3.0) < 0.1


def test_kalman_oracle_agrees_with_ekf_update():
    rng = np.random.default_rng(3)
    model = random_model(3)
    Q, R, P0 = spd(rng, 0.01), spd(rng, 0.1), spd(rng)
    n = 40
    ys, us = rng.standard_normal((n, NX)), rng.standard_normal((n, DIM_U))
    x0 = rng.standard_normal(NX)
    kf = kalman_oracle(model.A, model.B, np.eye(NX), Q, R, P0, x0, ys, us)
    s = EkfState(x0, P0, Q, R)
    for k in range(n):
        if k > 0:
            s = EkfState(model.A @ s.x + model.B @ us[k - 1], model.A @ s.P @ model.A.T + Q, Q, R)
        s = ekf_update(s, ys[k])
        np.testing.assert_allclose(s.x, kf[k], atol=1e-10)


# ---------------------------------------------------------------- runs

def model_consistent_trajectory(model, n, seed):
    rng = np.random.default_rng(seed)
    b = rng.integers(0, 2, (n, 4))
    r = rng.normal(0, 0.3, (n, 4, 3))
    f = rng.normal(0, 10, (n, 4, 3)) * b[:, :, None]
    x = np.empty((n, NX))
    x[0] = rng.standard_normal(NX)
    for k in range(n - 1):
        x[k + 1] = model.A @ x[k] + model.B @ encode_input(x[k], ContactSet(b[k], r[k], f[k]))
    ch = Channel(x, b, r, f)
    return Trajectory(1e-3, ch, ch, gait="trot")


def test_run_mhe_on_consistent_data():
    model = random_model(11)
    tr = model_consistent_trajectory(model, 300, 11)
    cfg = MheConfig(20, np.eye(NX), 1e4 * np.eye(NX), 1e2 * np.eye(NX))
    run = run_estimator("mhe", tr, model=model, mhe_config=cfg, timing=True)
    assert run.rmse.max() <= 1e-6
    assert run.kkt_max <= 1e-8
    assert run.solve_time_us.shape == (300,) and np.all(run.solve_time_us > 0)


def test_run_ekf_zero_noise_truth_init():
    params = RobotParams()
    tr = simulate(build_gait_schedule("trot", 0.5, 0.5, (0.3, 0.0)), params, 5.0, seed=1)
    tr = add_noise(tr, NoiseConfig((0.0, 0.0, 0.0), 0.0, 0.0, seed=0))
    cfg = EkfConfig(1e-10 * np.eye(NX), 1e-2 * np.eye(NX), 1e-6 * np.eye(NX), init="truth")
    run = run_estimator("ekf", tr, ekf_config=cfg, params=params)
    assert run.rmse[0:3].max() <= 1e-4
    assert run.solve_time_us is None


def test_run_estimator_errors():
    tr = model_consistent_trajectory(random_model(0), 10, 0)
    with pytest.raises(ValueError):
        run_estimator("mhe", tr)
    with pytest.raises(ValueError):
        run_estimator("ekf", tr)
    with pytest.raises(ValueError):
        run_estimator("ukf", tr)
    with pytest.raises(ValueError):
        EkfConfig(np.eye(NX), np.eye(NX), np.eye(NX), init="zero")
    bare = Trajectory(1e-3, tr.truth)
    with pytest.raises(ValueError):
        run_estimator("ekf", bare, ekf_config=EkfConfig(np.eye(NX), np.eye(NX), np.eye(NX)))


def test_buffer_is_a_deque():
    assert isinstance(MheWindow(random_model(0), np.zeros(NX)).buffer, deque)
