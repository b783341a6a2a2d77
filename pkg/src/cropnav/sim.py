"""Closed-loop plant: truth propagation, collisions, and sensor synthesis.

The simulator owns one logical clock. Stepping is strictly sequential;
sensor sampling reads the current state and its own named RNG stream, so
toggling one sensor's noise never shifts another's draws.

Collision semantics: contact with a stem freezes forward motion (the wheels
keep spinning but the robot is stuck), yaw authority drops to a configured
fraction, and the robot frees itself only when the commanded velocity has a
positive component along the contact normal, i.e. it backs away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .model import (
    ControlInput,
    RobotState,
    TractionParams,
    VehicleConfig,
    WheelCommand,
    inverse_wheel,
    step,
    wrap_angle,
)
from .world import FieldMap, _point_in_polygon, collision_query, terrain_at

GRAVITY = 9.81


@dataclass(frozen=True)
class GnssFix:
    z_x: float
    z_y: float
    valid: bool
    timestamp: float


@dataclass(frozen=True)
class ImuSample:
    omega_x: float
    omega_y: float
    omega_z: float
    a_x: float
    a_y: float
    a_z: float
    z_theta: float
    timestamp: float


@dataclass(frozen=True)
class PointCloud2D:
    points: np.ndarray  # (M, 2) in the sensor frame
    timestamp: float


@dataclass(frozen=True)
class LidarConfig:
    n_beams: int = 540
    fov: float = math.radians(270.0)
    max_range: float = 10.0
    range_sigma: float = 0.01
    outlier_rate: float = 0.0  # expected spurious points per scan

    def beam_angles(self) -> np.ndarray:
        half = self.fov / 2.0
        return np.linspace(-half, half, self.n_beams)


@dataclass(frozen=True)
class ImuNoise:
    gyro_sigma: float = 0.005
    accel_sigma: float = 0.05
    compass_sigma: float = 0.02


@dataclass(frozen=True)
class GnssBiasModel:
    """First-order Gauss-Markov wander applied on top of the canopy profile.

    A slowly varying bias is what actually breaks GNSS-only row navigation:
    white noise averages out, a persistent lateral offset does not.
    """

    sigma: float = 0.12
    tau: float = 45.0


@dataclass
class SimState:
    truth: RobotState
    clock: float = 0.0
    stuck: bool = False
    contact_normal: tuple[float, float] | None = None
    vel: tuple[float, float] = (0.0, 0.0)
    gnss_bias: tuple[float, float] = (0.0, 0.0)
    last_gnss_t: float | None = None
    stuck_yaw_factor: float = 0.3

    def snapshot(self) -> "SimState":
        return SimState(
            truth=self.truth,
            clock=self.clock,
            stuck=self.stuck,
            contact_normal=self.contact_normal,
            vel=self.vel,
            gnss_bias=self.gnss_bias,
            last_gnss_t=self.last_gnss_t,
            stuck_yaw_factor=self.stuck_yaw_factor,
        )


def in_canopy(field: FieldMap, p: tuple[float, float]) -> bool:
    return any(_point_in_polygon(poly, p[0], p[1]) for poly in field.canopy_polygons)


def sim_step(
    s: SimState,
    w: WheelCommand,
    field: FieldMap,
    cfg: VehicleConfig,
    dt: float,
) -> SimState:
    """Advance the truth by dt under a wheel command."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    u = inverse_wheel(w, cfg)
    mu_t, nu_t = terrain_at(field, (s.truth.x, s.truth.y))

    if s.stuck and s.contact_normal is not None:
        vx = u.v * math.cos(s.truth.theta)
        vy = u.v * math.sin(s.truth.theta)
        if vx * s.contact_normal[0] + vy * s.contact_normal[1] > 1e-9:
            s.stuck = False
            s.contact_normal = None

    if s.stuck:
        params = TractionParams(0.0, min(nu_t * s.stuck_yaw_factor, 1.0))
        new_truth = step(s.truth, u, params, dt)
        # Position frozen while stuck; only yaw changes.
        new_truth = RobotState(s.truth.x, s.truth.y, new_truth.theta)
    else:
        params = TractionParams(mu_t, nu_t)
        candidate = step(s.truth, u, params, dt)
        report = collision_query(field, candidate, cfg)
        if report.hit:
            s.stuck = True
            s.contact_normal = report.normal
            new_truth = s.truth  # motion arrested at contact
        else:
            new_truth = candidate

    s.vel = ((new_truth.x - s.truth.x) / dt, (new_truth.y - s.truth.y) / dt)
    s.truth = new_truth
    s.clock += dt
    return s


def sample_gnss(
    s: SimState,
    field: FieldMap,
    rng: np.random.Generator,
    bias_model: GnssBiasModel = GnssBiasModel(),
) -> GnssFix:
    """One GNSS fix at the current clock.

    The Gauss-Markov bias state evolves on the GNSS clock regardless of
    location but is only applied under canopy.
    """
    p = (s.truth.x, s.truth.y)
    q_open = field.gnss_open
    q_canopy = field.gnss_canopy
    canopy = in_canopy(field, p)
    q = q_canopy if canopy else q_open

    dt = 0.2 if s.last_gnss_t is None else max(s.clock - s.last_gnss_t, 1e-6)
    s.last_gnss_t = s.clock
    if bias_model.sigma > 0:
        a = math.exp(-dt / bias_model.tau)
        sd = bias_model.sigma * math.sqrt(max(1.0 - a * a, 0.0))
        bx = a * s.gnss_bias[0] + sd * rng.standard_normal()
        by = a * s.gnss_bias[1] + sd * rng.standard_normal()
        s.gnss_bias = (bx, by)

    wander = s.gnss_bias if canopy else (0.0, 0.0)
    noise = rng.standard_normal(2) * q.sigma
    valid = True
    if q.dropout_prob > 0 and rng.random() < q.dropout_prob:
        valid = False
    return GnssFix(
        z_x=s.truth.x + q.bias[0] + wander[0] + noise[0],
        z_y=s.truth.y + q.bias[1] + wander[1] + noise[1],
        valid=valid,
        timestamp=s.clock,
    )


def sample_imu(
    s: SimState,
    prev: SimState,
    true_delta_theta: float,
    rng: np.random.Generator,
    noise: ImuNoise = ImuNoise(),
) -> ImuSample:
    """IMU/compass sample from truth finite differences (flat ground)."""
    dt = s.clock - prev.clock
    if dt <= 0:
        omega_z = 0.0
        ax_w = ay_w = 0.0
    else:
        omega_z = wrap_angle(s.truth.theta - prev.truth.theta) / dt
        ax_w = (s.vel[0] - prev.vel[0]) / dt
        ay_w = (s.vel[1] - prev.vel[1]) / dt
    c, si = math.cos(s.truth.theta), math.sin(s.truth.theta)
    a_body_x = c * ax_w + si * ay_w
    a_body_y = -si * ax_w + c * ay_w
    g = rng.standard_normal(3) * noise.gyro_sigma
    a = rng.standard_normal(3) * noise.accel_sigma
    return ImuSample(
        omega_x=g[0],
        omega_y=g[1],
        omega_z=omega_z + g[2],
        a_x=a_body_x + a[0],
        a_y=a_body_y + a[1],
        a_z=GRAVITY + a[2],
        z_theta=wrap_angle(
            s.truth.theta - true_delta_theta
            + rng.standard_normal() * noise.compass_sigma
        ),
        timestamp=s.clock,
    )


def sample_lidar(
    s: SimState,
    field: FieldMap,
    cfg: LidarConfig,
    rng: np.random.Generator,
) -> PointCloud2D:
    """Planar scan: per-beam nearest ray-disc intersection over the stems."""
    px, py, th = s.truth.x, s.truth.y, s.truth.theta
    stems = field.stem_array
    if stems.shape[0]:
        near = (np.abs(stems[:, 0] - px) <= cfg.max_range + 0.1) & (
            np.abs(stems[:, 1] - py) <= cfg.max_range + 0.1
        )
        stems = np.ascontiguousarray(stems[near])
    angles = cfg.beam_angles()
    ranges = _kernels.raycast(px, py, th, angles, stems, cfg.max_range)
    hit = np.isfinite(ranges)
    r = ranges[hit]
    if cfg.range_sigma > 0 and r.size:
        r = r + rng.standard_normal(r.size) * cfg.range_sigma
    a = angles[hit]
    keep = (r > 0) & (r <= cfg.max_range)
    pts = np.column_stack((r[keep] * np.cos(a[keep]), r[keep] * np.sin(a[keep])))
    if cfg.outlier_rate > 0:
        n_out = rng.poisson(cfg.outlier_rate)
        if n_out:
            oa = rng.uniform(-cfg.fov / 2, cfg.fov / 2, n_out)
            orr = rng.uniform(0.1, cfg.max_range, n_out)
            pts = np.vstack((pts, np.column_stack((orr * np.cos(oa), orr * np.sin(oa)))))
    return PointCloud2D(points=pts, timestamp=s.clock)
