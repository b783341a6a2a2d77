"""LiDAR crop-row perception.

Pipeline per scan: rotate the cloud by the previous lane-heading estimate so
the rows run parallel to the x axis, pick the dominant histogram peak on
each side of the previous lane centre, clip a rectangular box around each
peak, fit a line per side, gate the fits, and form a lane measurement
(lateral offset, relative heading). A tiny 2-state EKF tracks the lane
between scans using the shared kinodynamic model expressed in lane
coordinates.

Sign conventions: d_lane > 0 means the robot sits left of the lane centre;
phi > 0 means the robot is yawed left of the lane direction (rows then
appear at angle -phi in the sensor frame).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .model import ControlInput, TractionParams, wrap_angle
from .sim import PointCloud2D


@dataclass(frozen=True)
class PerceptionConfig:
    lane_width: float = 0.76
    n_inrow: int = 50
    roi_forward: float = 1.0
    box_half_width: float = 0.25
    box_x_min: float = -0.5
    box_x_max: float = 4.0
    histogram_bin: float = 0.05
    min_points: int = 8
    min_span: float = 0.5
    max_angle_jump: float = math.radians(15.0)
    max_dist_jump: float = 0.15
    width_tol: float = 0.2  # fraction of nominal lane width
    single_side_inflation: float = 4.0
    debounce: int = 3
    max_misses: int = 10  # consecutive rejected scans before dropping lock
    meas_sigma_d: float = 0.02
    meas_sigma_phi: float = 0.02
    process_sigma_d: float = 0.02  # per sqrt(s)
    process_sigma_phi: float = 0.03

    def __post_init__(self):
        if min(self.lane_width, self.roi_forward, self.histogram_bin) <= 0:
            raise ValueError("geometric thresholds must be positive")


@dataclass(frozen=True)
class RowFit:
    slope: float
    intercept: float
    point_count: int
    span_length: float
    rms_residual: float


@dataclass
class LaneEstimate:
    d_lane: float = 0.0
    phi: float = 0.0
    cov: np.ndarray = dc_field(default_factory=lambda: np.diag([0.04, 0.04]))
    left_valid: bool = False
    right_valid: bool = False
    timestamp: float = 0.0


def _fit_side(pts: np.ndarray) -> RowFit | None:
    if pts.shape[0] < 2:
        return None
    x, y = pts[:, 0], pts[:, 1]
    span = float(x.max() - x.min())
    if span < 1e-6:
        return None
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    return RowFit(
        slope=float(a),
        intercept=float(b),
        point_count=int(pts.shape[0]),
        span_length=span,
        rms_residual=float(np.sqrt(np.mean(resid**2))),
    )


def _side_ok(fit: RowFit | None, expected_b: float, cfg: PerceptionConfig) -> bool:
    if fit is None:
        return False
    return (
        fit.point_count >= cfg.min_points
        and fit.span_length >= cfg.min_span
        and abs(math.atan(fit.slope)) <= cfg.max_angle_jump
        and abs(fit.intercept - expected_b) <= cfg.max_dist_jump
    )


def detect_rows(
    cloud: PointCloud2D, prev: LaneEstimate, cfg: PerceptionConfig
) -> tuple[RowFit | None, RowFit | None, tuple[float, float] | None]:
    """Extract the two row lines and a lane measurement from one scan.

    Returns (left fit, right fit, (d_meas, phi_meas)); fits are None when
    the corresponding side fails its gates, the measurement is None when
    neither side survives.
    """
    pts = np.asarray(cloud.points, dtype=float)
    if pts.size == 0:
        return None, None, None
    c, s = math.cos(prev.phi), math.sin(prev.phi)
    ax = c * pts[:, 0] - s * pts[:, 1]
    ay = s * pts[:, 0] + c * pts[:, 1]

    w = cfg.lane_width
    y_center = -prev.d_lane
    lo, hi = y_center - w, y_center + w
    sel = (ay >= lo) & (ay <= hi) & (ax >= cfg.box_x_min) & (ax <= cfg.box_x_max)
    if not np.any(sel):
        return None, None, None
    axs, ays = ax[sel], ay[sel]

    def peak(side: int) -> float | None:
        """Dominant histogram peak strictly on one side of the lane centre."""
        if side > 0:
            mask = ays > y_center + cfg.histogram_bin
            expected = y_center + w / 2.0
        else:
            mask = ays < y_center - cfg.histogram_bin
            expected = y_center - w / 2.0
        yy = ays[mask]
        if yy.size == 0:
            return None
        n_bins = max(int(round(w / cfg.histogram_bin)), 1)
        edges = np.linspace(y_center if side > 0 else y_center - w,
                            y_center + w if side > 0 else y_center, n_bins + 1)
        counts, _ = np.histogram(yy, bins=edges)
        centers = 0.5 * (edges[:-1] + edges[1:])
        best = counts.max()
        if best == 0:
            return None
        # Ties break toward the previously expected row position.
        tied = np.flatnonzero(counts == best)
        return float(centers[tied[np.argmin(np.abs(centers[tied] - expected))]])

    fits: list[RowFit | None] = []
    for side in (+1, -1):
        py = peak(side)
        fit = None
        if py is not None:
            in_box = np.abs(ays - py) <= cfg.box_half_width
            fit = _fit_side(np.column_stack((axs[in_box], ays[in_box])))
        fits.append(fit)
    left, right = fits

    exp_left = y_center + w / 2.0
    exp_right = y_center - w / 2.0
    left_ok = _side_ok(left, exp_left, cfg)
    right_ok = _side_ok(right, exp_right, cfg)
    if left_ok and right_ok:
        width = left.intercept - right.intercept
        if abs(width - w) > cfg.width_tol * w:
            left_ok = right_ok = False

    if left_ok and right_ok:
        d = -(left.intercept + right.intercept) / 2.0
        psi = (math.atan(left.slope) + math.atan(right.slope)) / 2.0
    elif left_ok:
        d = w / 2.0 - left.intercept
        psi = math.atan(left.slope)
    elif right_ok:
        d = -w / 2.0 - right.intercept
        psi = math.atan(right.slope)
    else:
        return left if left_ok else None, right if right_ok else None, None

    phi = wrap_angle(prev.phi - psi)
    return (left if left_ok else None, right if right_ok else None, (d, phi))


def lane_predict(
    est: LaneEstimate,
    u: ControlInput,
    params: TractionParams,
    dt: float,
    cfg: PerceptionConfig = PerceptionConfig(),
) -> LaneEstimate:
    """Propagate the lane state with the kinodynamic model in lane coords."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    d = est.d_lane + params.mu * u.v * math.sin(est.phi) * dt
    phi = wrap_angle(est.phi + params.nu * u.omega * dt)
    F = np.array([[1.0, params.mu * u.v * math.cos(est.phi) * dt], [0.0, 1.0]])
    Q = np.diag([cfg.process_sigma_d**2, cfg.process_sigma_phi**2]) * dt
    cov = F @ est.cov @ F.T + Q
    return LaneEstimate(
        d_lane=d,
        phi=phi,
        cov=cov,
        left_valid=est.left_valid,
        right_valid=est.right_valid,
        timestamp=est.timestamp,
    )


def lane_update(
    est: LaneEstimate, meas: tuple[float, float], meas_noise: np.ndarray
) -> LaneEstimate:
    """Standard 2-state correction with wrapped heading innovation."""
    z = np.array([meas[0], meas[1]])
    x = np.array([est.d_lane, est.phi])
    innov = z - x
    innov[1] = wrap_angle(innov[1])
    P = est.cov
    R = np.asarray(meas_noise, dtype=float)
    K = P @ np.linalg.inv(P + R)
    x = x + K @ innov
    ikh = np.eye(2) - K
    cov = ikh @ P @ ikh.T + K @ R @ K.T
    return LaneEstimate(
        d_lane=float(x[0]),
        phi=wrap_angle(float(x[1])),
        cov=0.5 * (cov + cov.T),
        left_valid=est.left_valid,
        right_valid=est.right_valid,
        timestamp=est.timestamp,
    )


def classify_in_row(cloud: PointCloud2D, cfg: PerceptionConfig) -> bool:
    """Is the robot under canopy? Counts returns in the forward window."""
    pts = np.asarray(cloud.points, dtype=float)
    if pts.size == 0:
        return False
    roi = (
        (pts[:, 0] >= 0.0)
        & (pts[:, 0] <= cfg.roi_forward)
        & (np.abs(pts[:, 1]) <= cfg.lane_width)
    )
    return int(np.count_nonzero(roi)) >= cfg.n_inrow


class DebouncedClassifier:
    """Reports a flip only after `debounce` consecutive agreeing scans."""

    def __init__(self, cfg: PerceptionConfig, initial: bool = False):
        self.cfg = cfg
        self.state = initial
        self._streak = 0
        self.flips = 0

    def update(self, raw: bool) -> bool:
        if raw == self.state:
            self._streak = 0
        else:
            self._streak += 1
            if self._streak >= self.cfg.debounce:
                self.state = raw
                self._streak = 0
                self.flips += 1
        return self.state


class LaneFilter:
    """Owns the lane estimate: prediction each tick, gated updates per scan."""

    def __init__(self, cfg: PerceptionConfig = PerceptionConfig()):
        self.cfg = cfg
        self.reset(t=0.0)

    def reset(self, t: float) -> None:
        # Startup convention: the lane heading initialises at zero.
        self.est = LaneEstimate(timestamp=t)
        self._initialized = False
        self._misses = 0

    @property
    def initialized(self) -> bool:
        return self._initialized

    def predict(self, u: ControlInput, params: TractionParams, dt: float) -> None:
        self.est = lane_predict(self.est, u, params, dt, self.cfg)

    def observe(self, cloud: PointCloud2D) -> tuple[float, float] | None:
        left, right, meas = detect_rows(cloud, self.est, self.cfg)
        if meas is None:
            self.est.left_valid = False
            self.est.right_valid = False
            self._misses += 1
            # A long run of rejected scans means the lock is on stale
            # geometry (e.g. carried through a headland turn): drop it.
            if self._initialized and self._misses >= self.cfg.max_misses:
                self.reset(cloud.timestamp)
            return None
        self._misses = 0
        if not self._initialized:
            # First valid detection seeds the state directly.
            self.est = LaneEstimate(
                d_lane=meas[0],
                phi=meas[1],
                cov=np.diag([self.cfg.meas_sigma_d**2, self.cfg.meas_sigma_phi**2]),
                left_valid=left is not None,
                right_valid=right is not None,
                timestamp=cloud.timestamp,
            )
            self._initialized = True
            return meas
        R = np.diag([self.cfg.meas_sigma_d**2, self.cfg.meas_sigma_phi**2])
        if left is None or right is None:
            R = R * self.cfg.single_side_inflation
        self.est = lane_update(self.est, meas, R)
        self.est.left_valid = left is not None
        self.est.right_valid = right is not None
        self.est.timestamp = cloud.timestamp
        return meas
