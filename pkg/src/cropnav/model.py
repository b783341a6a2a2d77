"""Kinodynamic vehicle model shared by simulator, estimator, and controller.

The planar model has traction coefficients mu (linear) and nu (angular) in
the control channel: with perfect traction the robot behaves as a unicycle,
with zero traction it stays put no matter what is commanded. A constant
compass offset dtheta rides along in the parameter vector; it never enters
the dynamics but the estimator solves for it jointly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

MU_FLOOR = 0.05
"""Divide-by-mu guard for the wheel map. Below this the traction supervisor
has long since declared failure, so clamping only affects commands that were
never going to be meaningful."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name} contains a non-finite value: {v!r}")


@dataclass(frozen=True)
class RobotState:
    """Planar pose in the world frame; heading kept wrapped to [-pi, pi)."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        _require_finite("RobotState", self.x, self.y, self.theta)
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class ControlInput:
    """Commanded forward speed [m/s] and yaw rate [rad/s]."""

    v: float
    omega: float

    def __post_init__(self):
        _require_finite("ControlInput", self.v, self.omega)


@dataclass(frozen=True)
class TractionParams:
    """Traction coefficients and compass offset, box-constrained."""

    mu: float
    nu: float
    delta_theta: float = 0.0

    def __post_init__(self):
        _require_finite("TractionParams", self.mu, self.nu, self.delta_theta)
        if not (0.0 <= self.mu <= 1.0 and 0.0 <= self.nu <= 1.0):
            raise ValueError(
                f"traction coefficients must lie in [0, 1], "
                f"got mu={self.mu}, nu={self.nu}"
            )
        object.__setattr__(self, "delta_theta", wrap_angle(self.delta_theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.mu, self.nu, self.delta_theta])


@dataclass(frozen=True)
class WheelCommand:
    """Left/right side wheel speeds for the skid-steer drive."""

    v_left: float
    v_right: float
    mu_clamped: bool = False


@dataclass(frozen=True)
class VehicleConfig:
    track_width: float = 0.4
    v_max: float = 1.5
    body_half_width: float = 0.15
    body_half_length: float = 0.25

    def __post_init__(self):
        for name in ("track_width", "v_max", "body_half_width", "body_half_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"VehicleConfig.{name} must be strictly positive")


def derivative(state: RobotState, u: ControlInput, params: TractionParams) -> np.ndarray:
    """Time derivative (dx, dy, dtheta) of the traction-scaled unicycle."""
    return np.array(
        [
            params.mu * u.v * math.cos(state.theta),
            params.mu * u.v * math.sin(state.theta),
            params.nu * u.omega,
        ]
    )


def step(state: RobotState, u: ControlInput, params: TractionParams, dt: float) -> RobotState:
    """Advance the state by dt with a fourth-order Runge-Kutta step."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x, y, th = _kernels.rk4_step(
        state.x, state.y, state.theta, u.v, u.omega, params.mu, params.nu, dt
    )
    return RobotState(x, y, th)


def step_with_jacobians(
    state: RobotState, u: ControlInput, params: TractionParams, dt: float
):
    """RK4 step plus exact Jacobians w.r.t. state, input, and parameters.

    Returns (next_state, A, Bu, Bm). Used by the horizon estimator and the
    predictive controller so all three consumers share one integrator.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x, y, th, A, Bu, Bm = _kernels.rk4_step_jac(
        state.x, state.y, state.theta, u.v, u.omega, params.mu, params.nu, dt
    )
    return RobotState(x, y, th), A, Bu, Bm


def wheel_commands(u: ControlInput, mu: float, cfg: VehicleConfig) -> WheelCommand:
    """Map a body command to side wheel speeds, compensating traction by 1/mu."""
    clamped = mu < MU_FLOOR
    mu_eff = max(mu, MU_FLOOR)
    half_spin = cfg.track_width * u.omega / 2.0
    return WheelCommand(
        v_left=u.v / mu_eff - half_spin,
        v_right=u.v / mu_eff + half_spin,
        mu_clamped=clamped,
    )


def inverse_wheel(w: WheelCommand, cfg: VehicleConfig) -> ControlInput:
    """Body-frame (v, omega) implied by wheel speeds at unit traction."""
    return ControlInput(
        v=(w.v_left + w.v_right) / 2.0,
        omega=(w.v_right - w.v_left) / cfg.track_width,
    )
