"""Unified reference tracker.

One projected-gradient MPC follows every reference the supervisor produces:
waypoint legs, lane centrelines, and reversed recovery paths. The rollout
model is the traction-scaled unicycle with the current parameter estimates,
and the input box is the wheel-speed limit mapped through the skid-steer
wheel model at the estimated mu, so feasible solutions stay feasible on the
real wheels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import minimize as sp_minimize

from . import _kernels
from .model import (
    MU_FLOOR,
    ControlInput,
    RobotState,
    TractionParams,
    VehicleConfig,
    WheelCommand,
    wheel_commands,
    wrap_angle,
)
from .supervisor import ReferencePath


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 10
    dt: float = 0.1
    Q: np.ndarray = dc_field(default_factory=lambda: np.diag([10.0, 10.0, 1.0]))
    R: np.ndarray = dc_field(default_factory=lambda: np.diag([0.1, 0.05]))
    Q_N: np.ndarray = dc_field(
        default_factory=lambda: 5.0 * np.diag([10.0, 10.0, 1.0])
    )
    v_max: float = 1.5
    solver_tol: float = 1e-6
    max_iters: int = 80
    max_hold_ticks: int = 3
    min_ref_speed: float = 0.25  # floor for advancing the reference window
    max_ref_lead: float = 0.5  # stall-escape cap on the window anchor lead

    def __post_init__(self):
        if self.horizon < 1 or self.dt <= 0:
            raise ValueError("horizon must be >= 1 and dt positive")
        for name in ("Q", "R", "Q_N"):
            m = getattr(self, name)
            if np.any(np.linalg.eigvalsh(np.asarray(m)) < 0):
                raise ValueError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class MpcSolution:
    inputs: np.ndarray  # (N, 2) of (v, omega)
    states: np.ndarray  # (N+1, 3) predicted rollout
    cost: float
    converged: bool

    @property
    def first(self) -> ControlInput:
        return ControlInput(float(self.inputs[0, 0]), float(self.inputs[0, 1]))


def _pad_reference(
    ref: ReferencePath, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """First n+1 reference states and n feedforward inputs, held at the end."""
    m = ref.states.shape[0]
    xref = np.empty((n + 1, 3))
    uref = np.empty((n, 2))
    for i in range(n + 1):
        xref[i] = ref.states[min(i, m - 1)]
        if i < n:
            uref[i] = ref.feedforward[min(i, m - 1)] if i < m else (0.0, 0.0)
    return xref, uref


def _to_wheels(U: np.ndarray, mu_eff: float, L: float) -> np.ndarray:
    W = np.empty_like(U)
    W[:, 0] = U[:, 0] / mu_eff - L * U[:, 1] / 2.0
    W[:, 1] = U[:, 0] / mu_eff + L * U[:, 1] / 2.0
    return W


def _from_wheels(W: np.ndarray, mu_eff: float, L: float) -> np.ndarray:
    U = np.empty_like(W)
    U[:, 0] = mu_eff * (W[:, 0] + W[:, 1]) / 2.0
    U[:, 1] = (W[:, 1] - W[:, 0]) / L
    return U


def _project_inputs(
    U: np.ndarray, mu: float, vcfg: VehicleConfig, v_max: float
) -> np.ndarray:
    """Clamp each input onto the feasible wheel box at the estimated mu."""
    mu_eff = max(mu, MU_FLOOR)
    L = vcfg.track_width
    W = np.clip(_to_wheels(U, mu_eff, L), -v_max, v_max)
    return _from_wheels(W, mu_eff, L)


def mpc_cost(
    x0: RobotState,
    inputs: np.ndarray,
    ref: ReferencePath,
    params: TractionParams,
    cfg: MpcConfig,
) -> float:
    """Tracking cost of an input sequence against a reference."""
    U = np.asarray(inputs, dtype=float).reshape(-1, 2)
    xref, uref = _pad_reference(ref, U.shape[0])
    cost, _ = _kernels.mpc_cost_grad(
        np.array([x0.x, x0.y, x0.theta]),
        U,
        xref,
        uref,
        np.asarray(cfg.Q),
        np.asarray(cfg.R),
        np.asarray(cfg.Q_N),
        params.mu,
        params.nu,
        cfg.dt,
    )
    return float(cost)


def mpc_solve(
    x0: RobotState,
    ref: ReferencePath,
    params: TractionParams,
    cfg: MpcConfig,
    vcfg: VehicleConfig = VehicleConfig(),
    warm_start: np.ndarray | None = None,
    grid: tuple[np.ndarray, np.ndarray] | None = None,
) -> MpcSolution:
    """Minimise the tracking cost over the wheel-speed box.

    Bound-constrained quasi-Newton descent run in wheel coordinates, where
    the input set is an axis-aligned box (it is an oblique parallelogram in
    (v, omega) coordinates, which breaks naive projected gradient there).
    With `grid` given, the inputs are instead restricted to the cartesian
    product of the listed v and omega values and small instances are solved
    by exact enumeration.
    """
    if not (
        math.isfinite(x0.x) and math.isfinite(x0.y) and math.isfinite(x0.theta)
    ):
        raise ValueError("initial state must be finite")
    n = cfg.horizon
    xref, uref = _pad_reference(ref, n)
    x0a = np.array([x0.x, x0.y, x0.theta])
    Q = np.asarray(cfg.Q)
    R = np.asarray(cfg.R)
    QN = np.asarray(cfg.Q_N)
    mu, nu = params.mu, params.nu
    mu_eff = max(mu, MU_FLOOR)
    L = vcfg.track_width

    if grid is not None:
        return _solve_on_grid(x0a, xref, uref, grid, Q, R, QN, mu, nu, cfg)

    if warm_start is not None and warm_start.shape == (n, 2):
        U = warm_start.copy()
    else:
        U = uref.copy()
    W = np.clip(_to_wheels(U, mu_eff, L), -cfg.v_max, cfg.v_max)
    U = _from_wheels(W, mu_eff, L)

    def eval_at(w_flat):
        Uc = _from_wheels(w_flat.reshape(-1, 2), mu_eff, L)
        c, g = _kernels.mpc_cost_grad(x0a, Uc, xref, uref, Q, R, QN, mu, nu, cfg.dt)
        gw = np.empty_like(g)
        gw[:, 0] = g[:, 0] * mu_eff / 2.0 - g[:, 1] / L
        gw[:, 1] = g[:, 0] * mu_eff / 2.0 + g[:, 1] / L
        return float(c), gw.ravel()

    res = sp_minimize(
        eval_at,
        W.ravel(),
        jac=True,
        method="L-BFGS-B",
        bounds=[(-cfg.v_max, cfg.v_max)] * (2 * n),
        options={
            "maxiter": cfg.max_iters,
            "ftol": cfg.solver_tol,
            "gtol": 1e-8,
        },
    )
    W = np.clip(res.x.reshape(n, 2), -cfg.v_max, cfg.v_max)
    cost = float(res.fun)
    converged = bool(res.success) and np.all(np.isfinite(W))

    U = _from_wheels(W, mu_eff, L)
    xs = _kernels.mpc_rollout(x0a, U, mu, nu, cfg.dt)
    return MpcSolution(inputs=U, states=xs, cost=float(cost), converged=converged)


def _solve_on_grid(x0a, xref, uref, grid, Q, R, QN, mu, nu, cfg) -> MpcSolution:
    """Exact enumeration over a small discrete input set."""
    vs, oms = (np.asarray(g, dtype=float) for g in grid)
    combos = [(v, om) for v in vs for om in oms]
    n = cfg.horizon
    if len(combos) ** n > 200_000:
        raise ValueError("grid too large for exact enumeration")
    best_cost = math.inf
    best = None
    U = np.empty((n, 2))

    def rec(i):
        nonlocal best_cost, best
        if i == n:
            c, _ = _kernels.mpc_cost_grad(
                x0a, U, xref, uref, Q, R, QN, mu, nu, cfg.dt
            )
            if c < best_cost:
                best_cost = float(c)
                best = U.copy()
            return
        for v, om in combos:
            U[i, 0], U[i, 1] = v, om
            rec(i + 1)

    rec(0)
    xs = _kernels.mpc_rollout(x0a, best, mu, nu, cfg.dt)
    return MpcSolution(inputs=best, states=xs, cost=best_cost, converged=True)


def _window_reference(
    ref: ReferencePath, x0: RobotState, cfg: MpcConfig, lead: float = 0.0
) -> ReferencePath:
    """Re-window a reference so its first state is the point nearest x0.

    Samples are then spaced one MPC step of feedforward travel apart, which
    keeps the discrete reference consistent with the rollout timing.
    """
    states = ref.states
    ff = ref.feedforward
    m = states.shape[0]
    if m == 1 or ref.spacing <= 0:
        return ref
    d = np.hypot(states[:, 0] - x0.x, states[:, 1] - x0.y)
    i0 = int(np.argmin(d))
    # Continuous projection onto the neighbouring segment so the window
    # never starts behind the robot (a behind-anchor makes the first MPC
    # move point backwards and can pin the loop in place).
    pos = float(i0)
    if i0 < m - 1:
        tx = states[i0 + 1, 0] - states[i0, 0]
        ty = states[i0 + 1, 1] - states[i0, 1]
        seg2 = tx * tx + ty * ty
        if seg2 > 1e-12:
            frac = ((x0.x - states[i0, 0]) * tx + (x0.y - states[i0, 1]) * ty) / seg2
            pos = i0 + min(max(frac, 0.0), 1.0)
    pos += lead / ref.spacing

    def interp(p):
        i = min(int(p), m - 2)
        f = p - i
        a, b = states[i], states[i + 1]
        x = a[0] + f * (b[0] - a[0])
        y = a[1] + f * (b[1] - a[1])
        th = wrap_angle(a[2] + f * wrap_angle(b[2] - a[2]))
        u = ff[i] + f * (ff[i + 1] - ff[i])
        return (x, y, th), u

    n = cfg.horizon
    xref = np.empty((n + 1, 3))
    uref = np.empty((n + 1, 2))
    for k in range(n + 1):
        if pos >= m - 1:
            # Terminal hold: the robot should stop at the path end.
            xref[k] = states[-1]
            uref[k] = (0.0, 0.0)
            continue
        xref[k], uref[k] = interp(pos)
        # Advance at least at a floor speed so a near-zero feedforward at a
        # sharp corner cannot pin the window in place.
        speed = max(abs(float(uref[k][0])), cfg.min_ref_speed)
        pos += speed * cfg.dt / ref.spacing
    return ReferencePath(xref, uref, ref.frame, ref.spacing)


class Tracker:
    """Per-tick MPC wrapper with warm starting and failure holds."""

    def __init__(self, cfg: MpcConfig = MpcConfig(), vcfg: VehicleConfig = VehicleConfig()):
        self.cfg = cfg
        self.vcfg = vcfg
        self._warm: np.ndarray | None = None
        self._warm_frame: str | None = None
        self._hold: WheelCommand | None = None
        self._hold_ticks = 0
        self._lead = 0.0
        self._last_pose: RobotState | None = None
        self.alerts = 0

    def reset(self) -> None:
        self._warm = None
        self._warm_frame = None
        self._hold = None
        self._hold_ticks = 0
        self._lead = 0.0
        self._last_pose = None

    def _update_lead(self, pose: RobotState, frame: str) -> None:
        """Grow a bounded anchor lead while the robot is essentially still.

        Anchoring the window purely at the robot's projection admits a
        standstill fixed point at sharp corners (every re-plan defers motion
        by one step). A lead that only appears during a stall, is capped,
        and decays with travel breaks that fixed point without turning the
        reference into a carrot the robot chases at full speed.
        """
        if frame != "world" or self._last_pose is None:
            self._lead = 0.0
            self._last_pose = pose
            return
        ds = math.hypot(pose.x - self._last_pose.x, pose.y - self._last_pose.y)
        self._last_pose = pose
        schedule = self.cfg.min_ref_speed * self.cfg.dt
        if ds < 0.3 * schedule:
            self._lead = min(self._lead + schedule, self.cfg.max_ref_lead)
        else:
            self._lead = max(self._lead - ds, 0.0)

    def tick(
        self,
        pose: RobotState,
        ref: ReferencePath,
        params: TractionParams,
    ) -> tuple[WheelCommand, MpcSolution]:
        """One control step: returns the wheel command to emit."""
        if ref.frame == "robot":
            x0 = RobotState(0.0, 0.0, 0.0)
        else:
            x0 = pose
        self._update_lead(pose, ref.frame)
        win = _window_reference(ref, x0, self.cfg, self._lead)
        if self._warm_frame != ref.frame:
            self._warm = None
            self._warm_frame = ref.frame
        sol = mpc_solve(x0, win, params, self.cfg, self.vcfg, self._warm)

        if sol.converged and np.all(np.isfinite(sol.inputs)):
            self._warm = np.vstack((sol.inputs[1:], sol.inputs[-1:]))
            self._hold_ticks = 0
            cmd = wheel_commands(sol.first, params.mu, self.vcfg)
            self._hold = cmd
            return cmd, sol
        self._hold_ticks += 1
        if self._hold is not None and self._hold_ticks <= self.cfg.max_hold_ticks:
            return self._hold, sol
        # Give up: stop the wheels and raise an alert counter.
        self.alerts += 1
        self._warm = None
        return WheelCommand(0.0, 0.0), sol
