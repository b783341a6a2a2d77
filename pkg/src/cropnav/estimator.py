"""Pose and traction estimation.

A moving-horizon estimator fuses GNSS fixes, compass headings, and the
commanded body velocities to recover the pose together with the traction
parameters (mu, nu) and the compass offset dtheta. The window is solved by
damped Gauss-Newton over just six decision variables (the oldest state and
the parameter vector); the trajectory inside the window is generated by
single shooting through the shared integrator, so the dynamics constraint
holds exactly by construction.

An EKF densifies the estimate at IMU rate and carries roll/pitch. It is
corrected whenever a fresh horizon solution is available.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import least_squares

from . import _kernels
from .model import ControlInput, RobotState, TractionParams, wrap_angle
from .sim import GnssFix, ImuSample


def _default_px():
    return np.diag([50.0, 50.0, 50.0])


def _default_pm():
    return np.diag([2.0, 2.0, 2.0])


def _default_pw():
    return np.diag([400.0, 400.0, 250.0])


@dataclass(frozen=True)
class MheConfig:
    horizon: int = 20
    P_x: np.ndarray = dc_field(default_factory=_default_px)
    P_m: np.ndarray = dc_field(default_factory=_default_pm)
    P_w: np.ndarray = dc_field(default_factory=_default_pw)
    solver_tol: float = 1e-8
    max_iters: int = 50

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        for name in ("P_x", "P_m", "P_w"):
            m = getattr(self, name)
            if np.any(np.linalg.eigvalsh(np.asarray(m, dtype=float)) <= 0):
                raise ValueError(f"{name} must be positive definite")


@dataclass(frozen=True)
class MheWindow:
    measurements: tuple[tuple[float, float, float, float], ...]  # z_x, z_y, z_th, t
    inputs: tuple[ControlInput, ...]  # one averaged command per interval
    prior_state: RobotState
    prior_params: TractionParams

    def __post_init__(self):
        if len(self.measurements) != len(self.inputs) + 1:
            raise ValueError("need exactly one more measurement than inputs")
        ts = [m[3] for m in self.measurements]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("measurement timestamps must be strictly increasing")

    def arrays(self):
        meas = np.array([[m[0], m[1], m[2]] for m in self.measurements])
        ts = np.array([m[3] for m in self.measurements])
        inputs = np.array([[u.v, u.omega] for u in self.inputs])
        return meas, np.diff(ts), inputs


@dataclass(frozen=True)
class MheSolution:
    states: tuple[RobotState, ...]
    params: TractionParams
    cost: float
    converged: bool
    timestamp: float = 0.0


def _sqrt_weight(P: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(np.asarray(P, dtype=float)).T


def rollout_window(
    window: MheWindow, x0: RobotState, params: TractionParams
) -> list[RobotState]:
    """Single-shooting trajectory over the window from its oldest state."""
    _, dts, inputs = window.arrays()
    states = [x0]
    sx, sy, sth = x0.x, x0.y, x0.theta
    for (v, om), dt in zip(inputs, dts):
        sx, sy, sth = _kernels.rk4_step(sx, sy, sth, v, om, params.mu, params.nu, dt)
        states.append(RobotState(sx, sy, sth))
    return states


def mhe_residual(
    window: MheWindow,
    states: list[RobotState],
    params: TractionParams,
    cfg: MheConfig,
) -> tuple[np.ndarray, float]:
    """Weighted residual stack and cost for a candidate trajectory.

    The heading residual is theta_i - (z_theta_i + dtheta), wrapped.
    """
    n = len(window.inputs)
    if len(states) != n + 1:
        raise ValueError(f"expected {n + 1} states, got {len(states)}")
    meas, _, _ = window.arrays()
    w_x = _sqrt_weight(cfg.P_x)
    w_m = _sqrt_weight(cfg.P_m)
    w_w = _sqrt_weight(cfg.P_w)

    parts = []
    x0 = states[0]
    parts.append(
        w_x
        @ np.array(
            [
                x0.x - window.prior_state.x,
                x0.y - window.prior_state.y,
                wrap_angle(x0.theta - window.prior_state.theta),
            ]
        )
    )
    pp = window.prior_params
    parts.append(
        w_m
        @ np.array(
            [
                params.mu - pp.mu,
                params.nu - pp.nu,
                wrap_angle(params.delta_theta - pp.delta_theta),
            ]
        )
    )
    for i, st in enumerate(states):
        parts.append(
            w_w
            @ np.array(
                [
                    st.x - meas[i, 0],
                    st.y - meas[i, 1],
                    wrap_angle(st.theta - (meas[i, 2] + params.delta_theta)),
                ]
            )
        )
    r = np.concatenate(parts)
    return r, float(r @ r)


def _project(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[2] = wrap_angle(out[2])
    out[3] = min(max(out[3], 0.0), 1.0)
    out[4] = min(max(out[4], 0.0), 1.0)
    out[5] = wrap_angle(out[5])
    return out


def mhe_solve(window: MheWindow, cfg: MheConfig) -> MheSolution:
    """Trust-region Gauss-Newton over q = [x0, y0, theta0, mu, nu, dtheta].

    The traction box [0, 1]^2 is handled natively by the solver; plain
    gradient-projection stalls when a parameter sits on its bound, so the
    bound-aware trust region is not optional here.
    """
    meas, dts, inputs = window.arrays()
    w_x = _sqrt_weight(cfg.P_x)
    w_m = _sqrt_weight(cfg.P_m)
    w_w = _sqrt_weight(cfg.P_w)
    x_prior = window.prior_state.as_array()
    m_prior = window.prior_params.as_array()

    cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def _eval(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        key = q.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = _kernels.mhe_residual_jac(
                q, inputs, dts, meas, x_prior, m_prior, w_x, w_m, w_w
            )
        return cache[key]

    lo = np.array([-np.inf, -np.inf, -np.inf, 0.0, 0.0, -np.inf])
    hi = np.array([np.inf, np.inf, np.inf, 1.0, 1.0, np.inf])
    q0 = np.clip(np.concatenate([x_prior, m_prior]), lo, hi)
    res = least_squares(
        lambda q: _eval(q)[0],
        q0,
        jac=lambda q: _eval(q)[1],
        bounds=(lo, hi),
        method="trf",
        xtol=cfg.solver_tol,
        ftol=cfg.solver_tol,
        gtol=cfg.solver_tol,
        max_nfev=cfg.max_iters,
    )
    q = _project(res.x)
    cost = float(2.0 * res.cost)
    converged = res.status > 0 and np.all(np.isfinite(q))

    params = TractionParams(q[3], q[4], q[5])
    states = rollout_window(window, RobotState(q[0], q[1], q[2]), params)
    return MheSolution(
        states=tuple(states),
        params=params,
        cost=cost,
        converged=converged,
        timestamp=window.measurements[-1][3],
    )


# --------------------------------------------------------------------------
# EKF over [p_x, p_y, alpha, beta, theta] with an internal planar velocity.


def _default_ekf_q():
    return np.diag([1e-4, 1e-4, 1e-5, 1e-5, 1e-5])


def _default_ekf_r():
    return np.diag([9e-4, 9e-4, 4e-4, 4e-4, 4e-4])


@dataclass(frozen=True)
class EkfConfig:
    process_noise: np.ndarray = dc_field(default_factory=_default_ekf_q)  # per second
    meas_noise: np.ndarray = dc_field(default_factory=_default_ekf_r)


@dataclass
class EkfState:
    x: np.ndarray  # [p_x, p_y, alpha, beta, theta]
    cov: np.ndarray  # 5x5
    vel: np.ndarray = dc_field(default_factory=lambda: np.zeros(2))  # world frame, aux
    floored: bool = False

    @classmethod
    def initial(cls, pose: RobotState, sigma: float = 0.5) -> "EkfState":
        x = np.array([pose.x, pose.y, 0.0, 0.0, pose.theta])
        return cls(x=x, cov=np.eye(5) * sigma**2)

    @property
    def pose(self) -> RobotState:
        return RobotState(self.x[0], self.x[1], self.x[4])


def ekf_predict(
    state: EkfState, imu: ImuSample, dt: float, cfg: EkfConfig = EkfConfig()
) -> EkfState:
    """Strapdown-style prediction on flat ground; height channel discarded.

    Orientation integrates the gyro rates through the small-angle Euler map;
    planar position advances with the internal world-frame velocity, itself
    integrated from the gravity-compensated accelerometer.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = state.x.copy()
    alpha, beta, theta = x[2], x[3], x[4]
    x[2] = alpha + imu.omega_x * dt
    x[3] = beta + imu.omega_y * dt
    x[4] = wrap_angle(theta + imu.omega_z * dt)
    c, s = math.cos(theta), math.sin(theta)
    # Gravity is carried by a_z on flat ground; the planar channels are
    # already free of it to first order in (alpha, beta).
    ax_w = c * imu.a_x - s * imu.a_y
    ay_w = s * imu.a_x + c * imu.a_y
    vel = state.vel + np.array([ax_w, ay_w]) * dt
    x[0] = x[0] + state.vel[0] * dt + 0.5 * ax_w * dt * dt
    x[1] = x[1] + state.vel[1] * dt + 0.5 * ay_w * dt * dt
    cov = state.cov + np.asarray(cfg.process_noise, dtype=float) * dt
    return EkfState(x=x, cov=cov, vel=vel)


def ekf_correct(
    state: EkfState,
    mhe_out: tuple[float, float, float],
    incl: tuple[float, float],
    cfg: EkfConfig = EkfConfig(),
) -> EkfState:
    """Full-state linear correction from the horizon output plus attitude."""
    z = np.array([mhe_out[0], mhe_out[1], incl[0], incl[1], mhe_out[2]])
    innov = state.x - z
    innov[2] = wrap_angle(innov[2])
    innov[3] = wrap_angle(innov[3])
    innov[4] = wrap_angle(innov[4])
    P = state.cov
    R = np.asarray(cfg.meas_noise, dtype=float)
    K = P @ np.linalg.inv(P + R)
    x = state.x - K @ innov
    x[4] = wrap_angle(x[4])
    ikh = np.eye(5) - K
    cov = ikh @ P @ ikh.T + K @ R @ K.T
    cov = 0.5 * (cov + cov.T)
    floored = False
    eigs = np.linalg.eigvalsh(cov)
    if eigs[0] < 0:
        cov = cov + (1e-12 - eigs[0]) * np.eye(5)
        floored = True
    return EkfState(x=x, cov=cov, vel=state.vel.copy(), floored=floored)


# --------------------------------------------------------------------------
# Cascade orchestration used by the closed-loop harness.


class CascadeEstimator:
    """MHE at GNSS rate feeding an EKF at IMU rate.

    Inputs are applied in timestamp order by the caller; corrections older
    than the last applied one are dropped (counted in `stale_corrections`).
    Invalid GNSS fixes stretch the current window interval instead of
    zero-filling it.
    """

    def __init__(
        self,
        initial_pose: RobotState,
        mhe_cfg: MheConfig = MheConfig(),
        ekf_cfg: EkfConfig = EkfConfig(),
    ):
        self.mhe_cfg = mhe_cfg
        self.ekf_cfg = ekf_cfg
        self.stale_corrections = 0
        self.reset(initial_pose, t=0.0)

    def reset(self, pose: RobotState, t: float) -> None:
        self.ekf = EkfState.initial(pose)
        self._fixes: deque = deque()  # (z_x, z_y, z_th, t)
        self._interval_inputs: deque = deque()  # averaged command per interval
        self._acc_v = 0.0
        self._acc_om = 0.0
        self._acc_n = 0
        self._last_u = ControlInput(0.0, 0.0)
        self._last_compass = 0.0
        self.solution: MheSolution | None = None
        self._prior_state = pose
        self._prior_params = TractionParams(1.0, 1.0, 0.0)
        self._last_correction_t = t

    @property
    def params(self) -> TractionParams:
        return self.solution.params if self.solution else self._prior_params

    @property
    def pose(self) -> RobotState:
        return self.ekf.pose

    @property
    def mhe_ready(self) -> bool:
        return self.solution is not None and self.solution.converged

    def push_command(self, u: ControlInput) -> None:
        """Record the wheel-level body command active until the next call."""
        self._acc_v += u.v
        self._acc_om += u.omega
        self._acc_n += 1
        self._last_u = u

    def push_imu(self, imu: ImuSample, dt: float) -> None:
        self._last_compass = imu.z_theta
        self.ekf = ekf_predict(self.ekf, imu, dt, self.ekf_cfg)

    def push_gnss(self, fix: GnssFix) -> MheSolution | None:
        if not fix.valid:
            return None
        if self._fixes and fix.timestamp <= self._fixes[-1][3]:
            self.stale_corrections += 1
            return None
        if self._fixes:
            if self._acc_n:
                u = ControlInput(self._acc_v / self._acc_n, self._acc_om / self._acc_n)
            else:
                u = self._last_u
            self._interval_inputs.append(u)
        self._acc_v = self._acc_om = 0.0
        self._acc_n = 0
        self._fixes.append((fix.z_x, fix.z_y, self._last_compass, fix.timestamp))

        n = self.mhe_cfg.horizon
        if len(self._fixes) <= n:
            self._bootstrap_correct(fix)
            return None
        window = MheWindow(
            measurements=tuple(self._fixes),
            inputs=tuple(self._interval_inputs),
            prior_state=self._prior_state,
            prior_params=self._prior_params,
        )
        sol = mhe_solve(window, self.mhe_cfg)
        self.solution = sol
        # Arrival priors always follow the shifted window; freezing them on a
        # failed solve makes every later window fight an ever-staler prior.
        self._prior_state = sol.states[1]
        self._prior_params = sol.params
        if sol.converged:
            latest = sol.states[-1]
            self._apply_correction((latest.x, latest.y, latest.theta), fix.timestamp)
        self._fixes.popleft()
        self._interval_inputs.popleft()
        return sol

    def _bootstrap_correct(self, fix: GnssFix) -> None:
        """Before the first full window, anchor the EKF to raw measurements."""
        theta = wrap_angle(self._last_compass + self._prior_params.delta_theta)
        self._apply_correction((fix.z_x, fix.z_y, theta), fix.timestamp)

    def _apply_correction(self, xyt: tuple[float, float, float], t: float) -> None:
        if t < self._last_correction_t:
            self.stale_corrections += 1
            return
        self._last_correction_t = t
        incl = (float(self.ekf.x[2]), float(self.ekf.x[3]))
        self.ekf = ekf_correct(self.ekf, xyt, incl, self.ekf_cfg)
        # Re-anchor the auxiliary velocity to the kinodynamic value so pure
        # accelerometer drift cannot accumulate across corrections.
        mu = self.params.mu
        th = self.ekf.x[4]
        v = mu * self._last_u.v
        self.ekf.vel = np.array([v * math.cos(th), v * math.sin(th)])
