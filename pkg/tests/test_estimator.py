import math

import numpy as np
import pytest

from cropnav import _kernels
from cropnav.estimator import (
    CascadeEstimator,
    EkfState,
    MheConfig,
    MheWindow,
    ekf_correct,
    ekf_predict,
    mhe_residual,
    mhe_solve,
    rollout_window,
)
from cropnav.model import ControlInput, RobotState, TractionParams, step, wrap_angle
from cropnav.sim import GnssFix, ImuSample


def make_window(mu, nu, dtheta, n=20, dt=0.2, start=None, prior_params=None):
    """Noiseless window generated by the shared integrator."""
    truth = start or RobotState(0.0, 0.0, 0.2)
    params = TractionParams(mu, nu, dtheta)
    inputs = []
    states = [truth]
    for k in range(n):
        u = ControlInput(0.8 + 0.2 * math.sin(0.3 * k), 0.3 * math.cos(0.2 * k))
        inputs.append(u)
        states.append(step(states[-1], u, params, dt))
    meas = tuple(
        (s.x, s.y, wrap_angle(s.theta - dtheta), k * dt)
        for k, s in enumerate(states)
    )
    return MheWindow(
        measurements=meas,
        inputs=tuple(inputs),
        prior_state=truth,
        prior_params=prior_params or TractionParams(1.0, 1.0, 0.0),
    )


def test_config_validation():
    with pytest.raises(ValueError):
        MheConfig(horizon=1)
    with pytest.raises(ValueError):
        MheConfig(P_x=np.diag([1.0, 1.0, -1.0]))


def test_window_validation():
    s = RobotState(0, 0, 0)
    p = TractionParams(1, 1)
    with pytest.raises(ValueError):
        MheWindow(((0, 0, 0, 0.0), (0, 0, 0, 1.0)), (), s, p)
    with pytest.raises(ValueError):
        MheWindow(
            ((0, 0, 0, 1.0), (0, 0, 0, 1.0)), (ControlInput(0, 0),), s, p
        )


def test_rollout_matches_integrator():
    w = make_window(0.8, 0.9, 0.1)
    p = TractionParams(0.8, 0.9, 0.1)
    states = rollout_window(w, RobotState(0.0, 0.0, 0.2), p)
    assert len(states) == len(w.measurements)
    for st, m in zip(states, w.measurements):
        assert st.x == pytest.approx(m[0], abs=1e-9)
        assert st.y == pytest.approx(m[1], abs=1e-9)


def test_residual_zero_at_truth():
    p = TractionParams(0.8, 0.9, 0.1)
    w = make_window(0.8, 0.9, 0.1, prior_params=p)
    states = rollout_window(w, RobotState(0.0, 0.0, 0.2), p)
    r, cost = mhe_residual(w, states, p, MheConfig())
    assert cost == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(r)) < 1e-7


@pytest.mark.parametrize(
    "mu,nu,dth",
    [(1.0, 1.0, 0.0), (0.7, 0.9, 0.3), (0.3, 0.5, -1.0)],
)
def test_solver_recovers_parameters(mu, nu, dth):
    w = make_window(mu, nu, dth)
    sol = mhe_solve(w, MheConfig())
    assert sol.converged
    assert sol.params.mu == pytest.approx(mu, abs=1e-2)
    assert sol.params.nu == pytest.approx(nu, abs=1e-2)
    assert wrap_angle(sol.params.delta_theta - dth) == pytest.approx(0.0, abs=1e-2)


def test_solver_respects_traction_box():
    # Truth at the boundary: the solver must not leave [0, 1].
    w = make_window(1.0, 1.0, 0.0)
    sol = mhe_solve(w, MheConfig())
    assert 0.0 <= sol.params.mu <= 1.0
    assert 0.0 <= sol.params.nu <= 1.0
    assert sol.converged


def test_kernel_jacobian_matches_finite_differences():
    w = make_window(0.7, 0.9, 0.3)
    meas, dts, inputs = w.arrays()
    cfg = MheConfig()
    w_x = np.linalg.cholesky(cfg.P_x).T
    w_m = np.linalg.cholesky(cfg.P_m).T
    w_w = np.linalg.cholesky(cfg.P_w).T
    xp = w.prior_state.as_array()
    mp = w.prior_params.as_array()
    q0 = np.array([0.05, -0.03, 0.25, 0.6, 0.8, 0.1])

    def resid(q):
        r, _ = _kernels.mhe_residual_jac(q, inputs, dts, meas, xp, mp, w_x, w_m, w_w)
        return r

    _, J = _kernels.mhe_residual_jac(q0, inputs, dts, meas, xp, mp, w_x, w_m, w_w)
    eps = 1e-6
    for i in range(6):
        qp, qm = q0.copy(), q0.copy()
        qp[i] += eps
        qm[i] -= eps
        col = (resid(qp) - resid(qm)) / (2 * eps)
        denom = max(np.max(np.abs(col)), 1.0)
        assert np.max(np.abs(J[:, i] - col)) / denom < 1e-5


def test_ekf_predict_integrates_gyro():
    s = EkfState.initial(RobotState(0, 0, 0.0))
    imu = ImuSample(0.0, 0.0, 0.5, 0.0, 0.0, 9.81, 0.0, 0.02)
    out = ekf_predict(s, imu, 0.02)
    assert out.x[4] == pytest.approx(0.01)
    assert out.x[0] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        ekf_predict(s, imu, 0.0)


def test_ekf_correct_pulls_toward_measurement():
    s = EkfState.initial(RobotState(1.0, 2.0, 0.5))
    out = ekf_correct(s, (0.0, 0.0, 0.0), (0.0, 0.0))
    assert abs(out.x[0]) < 1.0
    assert abs(out.x[4]) < 0.5
    # Covariance stays symmetric positive definite.
    assert np.allclose(out.cov, out.cov.T)
    assert np.all(np.linalg.eigvalsh(out.cov) > 0)


def test_cascade_bootstrap_and_solution():
    start = RobotState(0.0, 0.0, 0.0)
    est = CascadeEstimator(start, MheConfig(horizon=5))
    dt = 0.2
    truth = start
    p = TractionParams(1.0, 1.0, 0.0)
    u = ControlInput(0.5, 0.0)
    for k in range(10):
        for _ in range(10):
            est.push_imu(
                ImuSample(0, 0, 0, 0, 0, 9.81, truth.theta, 0.0), 0.02
            )
        est.push_command(u)
        truth = step(truth, u, p, dt)
        sol = est.push_gnss(GnssFix(truth.x, truth.y, True, (k + 1) * dt))
        if k < 5:
            assert sol is None  # still bootstrapping
    assert est.solution is not None
    assert est.mhe_ready
    assert est.pose.x == pytest.approx(truth.x, abs=0.1)


def test_cascade_drops_stale_and_invalid_fixes():
    est = CascadeEstimator(RobotState(0, 0, 0), MheConfig(horizon=5))
    assert est.push_gnss(GnssFix(0.0, 0.0, False, 1.0)) is None
    est.push_gnss(GnssFix(0.0, 0.0, True, 1.0))
    before = est.stale_corrections
    est.push_gnss(GnssFix(0.0, 0.0, True, 0.5))
    assert est.stale_corrections == before + 1


def test_cascade_reset_clears_history():
    est = CascadeEstimator(RobotState(0, 0, 0), MheConfig(horizon=5))
    for k in range(8):
        est.push_command(ControlInput(0.5, 0.0))
        est.push_gnss(GnssFix(0.1 * k, 0.0, True, 0.2 * (k + 1)))
    est.reset(RobotState(5.0, 5.0, 1.0), t=10.0)
    assert est.solution is None
    assert est.pose.x == pytest.approx(5.0)
