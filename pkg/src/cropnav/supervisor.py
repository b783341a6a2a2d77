"""High-level navigation supervision.

Three modes: InRow (follow the lane seen by the LiDAR), OutRow (track the
pre-recorded waypoint path), Recovery (retrace the recent estimated path in
reverse after a traction failure). Failure detection has absolute priority;
the in-row/out-row choice comes second and follows the debounced classifier.

Interventions are the simulation surrogate for a human walking over: they
fire when recoveries stop making progress, when the robot strays far from
its reference for too long, or when no plan progress happens at all.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field as dc_field
from enum import Enum

import numpy as np

from .model import RobotState, TractionParams, wrap_angle
from .perception import LaneEstimate, LaneFilter
from .world import WaypointPlan


class Mode(Enum):
    IN_ROW = "in_row"
    OUT_ROW = "out_row"
    RECOVERY = "recovery"


class StaleLaneEstimate(RuntimeError):
    """Raised when the lane estimate is too old to steer on."""


@dataclass(frozen=True)
class SupervisorConfig:
    mu_failure: float = 0.2
    mu_hysteresis: float = 0.1
    recovery_duration: float = 5.0
    recovery_distance: float = 2.5
    buffer_span: float = 15.0
    max_consecutive_recoveries: int = 3
    cruise_speed: float = 0.8
    reverse_speed: float = 0.5
    capture_radius: float = 0.5
    lane_lookahead: float = 3.0
    lane_stale_timeout: float = 1.0
    resample_spacing: float = 0.1
    reference_window: float = 6.0
    recovery_fallback_len: float = 0.5
    progress_reset_dist: float = 1.5
    corridor_dist: float = 1.0
    corridor_time: float = 5.0
    no_progress_time: float = 30.0
    no_progress_dist: float = 0.5
    failure_refractory: float = 4.0  # suppress re-detection for one MHE window

    def __post_init__(self):
        if not (0.0 < self.mu_failure < 1.0):
            raise ValueError("mu_failure must lie in (0, 1)")
        if self.max_consecutive_recoveries < 1:
            raise ValueError("max_consecutive_recoveries must be positive")


@dataclass(frozen=True)
class ReferencePath:
    """Uniformly spaced reference states with feedforward inputs."""

    states: np.ndarray  # (M, 3)
    feedforward: np.ndarray  # (M, 2)
    frame: str  # "world" or "robot"
    spacing: float

    def __post_init__(self):
        if self.states.shape[0] == 0:
            raise ValueError("reference path must be nonempty")
        if self.frame not in ("world", "robot"):
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.states.shape[0] > 1:
            d = np.hypot(
                np.diff(self.states[:, 0]), np.diff(self.states[:, 1])
            )
            if np.any(d > 1.0):
                raise ValueError("consecutive reference states too far apart")


def detect_failure(params: TractionParams, cfg: SupervisorConfig) -> bool:
    """Traction failure: estimated mu strictly below the threshold."""
    return params.mu < cfg.mu_failure


def update_mode(current: Mode, in_row: bool, failure: bool, recovery_done: bool) -> Mode:
    """Pure priority rule: failure first, then the classifier."""
    if failure:
        return Mode.RECOVERY
    if current is Mode.RECOVERY and not recovery_done:
        return Mode.RECOVERY
    return Mode.IN_ROW if in_row else Mode.OUT_ROW


class RecoveryBuffer:
    """Ring of recent (estimated state, timestamp) pairs spanning buffer_span."""

    def __init__(self, span: float):
        self.span = span
        self._items: deque = deque()

    def push(self, state: RobotState, t: float) -> None:
        if self._items and t <= self._items[-1][1]:
            return
        self._items.append((state, t))
        while self._items and t - self._items[0][1] > self.span:
            self._items.popleft()

    def clear(self) -> None:
        self._items.clear()

    @property
    def duration(self) -> float:
        if len(self._items) < 2:
            return 0.0
        return self._items[-1][1] - self._items[0][1]

    def tail(self, duration: float) -> list[tuple[RobotState, float]]:
        if not self._items:
            return []
        t_end = self._items[-1][1]
        return [it for it in self._items if t_end - it[1] <= duration]

    def tail_by_distance(self, dist: float) -> list[tuple[RobotState, float]]:
        """Newest suffix whose path length reaches `dist`.

        Stationary dwell (e.g. while stuck) contributes no length, so the
        suffix always covers real ground regardless of how long the robot
        sat still.
        """
        out: list[tuple[RobotState, float]] = []
        acc = 0.0
        prev: RobotState | None = None
        for st, ts in reversed(self._items):
            out.append((st, ts))
            if prev is not None:
                acc += math.hypot(st.x - prev.x, st.y - prev.y)
            prev = st
            if acc >= dist:
                break
        out.reverse()
        return out


def _resample_polyline(pts: np.ndarray, spacing: float) -> np.ndarray:
    """(M, 2) polyline resampled to uniform arclength spacing."""
    seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    keep = np.concatenate(([True], seg > 1e-9))
    pts = pts[keep]
    if pts.shape[0] < 2:
        return pts
    seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    s = np.concatenate(([0.0], np.cumsum(seg)))
    grid = np.arange(0.0, s[-1] + spacing / 2, spacing)
    return np.column_stack(
        (np.interp(grid, s, pts[:, 0]), np.interp(grid, s, pts[:, 1]))
    )


def _path_from_points(
    pts: np.ndarray,
    speed: float,
    spacing: float,
    frame: str,
    omega_max: float = 1.5,
) -> ReferencePath:
    """Tangent headings and curvature feedforward for a uniform polyline.

    The feedforward speed is scaled down wherever the turn rate at full
    speed would exceed omega_max, so tight headland corners are taken
    slowly instead of being cut.
    """
    n = pts.shape[0]
    if n == 1:
        states = np.array([[pts[0, 0], pts[0, 1], 0.0]])
        return ReferencePath(states, np.zeros((1, 2)), frame, spacing)
    dx = np.gradient(pts[:, 0])
    dy = np.gradient(pts[:, 1])
    heading = np.arctan2(dy, dx)
    if speed < 0:
        heading = np.array([wrap_angle(h + math.pi) for h in heading])
    dh = np.zeros(n)
    for i in range(1, n):
        dh[i] = wrap_angle(heading[i] - heading[i - 1])
    v = np.full(n, speed)
    omega = np.zeros(n)
    if spacing > 0:
        kappa = np.abs(dh) / spacing  # rad per metre
        # Smear the curvature a little so the slowdown starts before the
        # corner instead of exactly at it.
        win = max(int(round(0.5 / spacing)), 1)
        kernel = np.ones(2 * win + 1)
        kappa = np.convolve(np.pad(kappa, win, mode="edge"), kernel, "valid")
        with np.errstate(divide="ignore"):
            cap = np.where(kappa > 1e-9, omega_max / kappa, np.inf)
        v = np.sign(speed) * np.minimum(abs(speed), np.maximum(cap, 0.1))
        omega = dh / spacing * np.abs(v)
    states = np.column_stack((pts, heading))
    ff = np.column_stack((v, omega))
    return ReferencePath(states, ff, frame, spacing)


class WaypointTracker:
    """Monotone progress along the reference polyline built from waypoints."""

    def __init__(self, plan: WaypointPlan, cfg: SupervisorConfig):
        self.plan = plan
        self.cfg = cfg
        pts = _resample_polyline(plan.points(), cfg.resample_spacing)
        self.path = _path_from_points(
            pts, cfg.cruise_speed, cfg.resample_spacing, "world"
        )
        self._idx = 0
        # Waypoint consumption index, for diagnostics and completion.
        self._wp_idx = 0
        self._wp_points = plan.points()

    @property
    def progress_s(self) -> float:
        return self._idx * self.cfg.resample_spacing

    @property
    def total_s(self) -> float:
        return (self.path.states.shape[0] - 1) * self.cfg.resample_spacing

    @property
    def done(self) -> bool:
        return self._wp_idx >= self._wp_points.shape[0]

    def update(self, pose: RobotState) -> None:
        """Advance the progress index; it never moves backwards."""
        states = self.path.states
        horizon = int(8.0 / self.cfg.resample_spacing)
        hi = min(self._idx + horizon, states.shape[0])
        window = states[self._idx : hi]
        if window.shape[0] == 0:
            return
        d = np.hypot(window[:, 0] - pose.x, window[:, 1] - pose.y)
        self._idx += int(np.argmin(d))
        while self._wp_idx < self._wp_points.shape[0]:
            wp = self._wp_points[self._wp_idx]
            dist = math.hypot(pose.x - wp[0], pose.y - wp[1])
            # Captured directly, or plan progress has moved clearly beyond
            # the waypoint's arclength (perpendicular-plane consumption).
            passed = self.progress_s >= self._wp_s(self._wp_idx) + 0.5
            if dist <= self.cfg.capture_radius or passed:
                self._wp_idx += 1
            else:
                break

    def _wp_s(self, k: int) -> float:
        """Arclength of waypoint k along the resampled polyline."""
        pts = self._wp_points
        seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
        return float(np.sum(seg[:k]))

    def reference(self) -> ReferencePath:
        """Window of the plan starting at current progress; holds at the end."""
        states = self.path.states
        n_ahead = int(self.cfg.reference_window / self.cfg.resample_spacing)
        hi = min(self._idx + n_ahead, states.shape[0])
        if self._idx >= states.shape[0] - 1:
            last = states[-1:].copy()
            return ReferencePath(
                last, np.zeros((1, 2)), "world", self.cfg.resample_spacing
            )
        return ReferencePath(
            states[self._idx : hi],
            self.path.feedforward[self._idx : hi],
            "world",
            self.cfg.resample_spacing,
        )


def waypoint_reference(tracker: WaypointTracker, pose: RobotState) -> ReferencePath:
    tracker.update(pose)
    return tracker.reference()


def lane_reference(est: LaneEstimate, cfg: SupervisorConfig, now: float) -> ReferencePath:
    """Straight line down the lane centre, expressed in the robot frame."""
    if now - est.timestamp > cfg.lane_stale_timeout:
        raise StaleLaneEstimate(
            f"lane estimate stale at t={now:.2f} (last update {est.timestamp:.2f})"
        )
    d, phi = est.d_lane, est.phi
    u = np.array([math.cos(phi), -math.sin(phi)])
    origin = np.array([-d * math.sin(phi), -d * math.cos(phi)])
    s = np.arange(0.0, cfg.lane_lookahead, cfg.resample_spacing)
    pts = origin[None, :] + s[:, None] * u[None, :]
    states = np.column_stack((pts, np.full(s.shape[0], -phi)))
    ff = np.column_stack(
        (np.full(s.shape[0], cfg.cruise_speed), np.zeros(s.shape[0]))
    )
    return ReferencePath(states, ff, "robot", cfg.resample_spacing)


def recovery_reference(buf: RecoveryBuffer, cfg: SupervisorConfig) -> ReferencePath:
    """Retrace the recent estimated path backwards at reverse feedforward."""
    tail = buf.tail_by_distance(cfg.recovery_distance)
    if len(tail) < 2:
        # Not enough history: short straight reverse in the robot frame.
        s = np.arange(0.0, cfg.recovery_fallback_len + 1e-9, cfg.resample_spacing)
        states = np.column_stack((-s, np.zeros(s.size), np.zeros(s.size)))
        ff = np.column_stack((np.full(s.size, -cfg.reverse_speed), np.zeros(s.size)))
        return ReferencePath(states, ff, "robot", cfg.resample_spacing)
    pts = np.array([[st.x, st.y] for st, _ in reversed(tail)])
    pts = _resample_polyline(pts, cfg.resample_spacing)
    if pts.shape[0] < 2:
        s = np.arange(0.0, cfg.recovery_fallback_len + 1e-9, cfg.resample_spacing)
        states = np.column_stack((-s, np.zeros(s.size), np.zeros(s.size)))
        ff = np.column_stack((np.full(s.size, -cfg.reverse_speed), np.zeros(s.size)))
        return ReferencePath(states, ff, "robot", cfg.resample_spacing)
    return _path_from_points(
        pts, -cfg.reverse_speed, cfg.resample_spacing, "world"
    )


@dataclass
class Decision:
    mode: Mode
    reference: ReferencePath
    events: list[tuple[str, str]] = dc_field(default_factory=list)
    intervention: bool = False


class Supervisor:
    """Sequential decision loop run once per control tick."""

    def __init__(
        self,
        plan: WaypointPlan,
        cfg: SupervisorConfig = SupervisorConfig(),
        recovery_enabled: bool = True,
        perception_enabled: bool = True,
    ):
        self.cfg = cfg
        self.recovery_enabled = recovery_enabled
        self.perception_enabled = perception_enabled
        self.tracker = WaypointTracker(plan, cfg)
        self.buffer = RecoveryBuffer(cfg.buffer_span)
        self.mode = Mode.OUT_ROW
        self.recoveries = 0
        self.interventions = 0
        self._recovery_path: ReferencePath | None = None
        self._recovery_deadline = 0.0
        self._restored_since: float | None = None
        self._refractory_until = 0.0
        self._streak = 0
        self._streak_progress = -1e9
        self._corridor_since: float | None = None
        self._progress_mark = 0.0
        self._progress_mark_t = 0.0

    # -- intervention monitors ------------------------------------------

    def _monitor(self, t: float, corridor_dist: float) -> bool:
        cfg = self.cfg
        if corridor_dist > cfg.corridor_dist:
            if self._corridor_since is None:
                self._corridor_since = t
            elif t - self._corridor_since > cfg.corridor_time:
                return True
        else:
            self._corridor_since = None
        if self.tracker.progress_s > self._progress_mark + cfg.no_progress_dist:
            self._progress_mark = self.tracker.progress_s
            self._progress_mark_t = t
        elif t - self._progress_mark_t > cfg.no_progress_time:
            return True
        return False

    def reset_after_intervention(self, t: float) -> None:
        self.interventions += 1
        self.mode = Mode.OUT_ROW
        self.buffer.clear()
        self._recovery_path = None
        self._streak = 0
        self._corridor_since = None
        self._progress_mark = self.tracker.progress_s
        self._progress_mark_t = t
        self._refractory_until = t + self.cfg.failure_refractory

    # -- main decision --------------------------------------------------

    def step(
        self,
        t: float,
        pose_est: RobotState,
        params: TractionParams,
        mhe_ready: bool,
        in_row_raw: bool,
        lane: LaneFilter,
        corridor_dist: float = 0.0,
    ) -> Decision:
        cfg = self.cfg
        events: list[tuple[str, str]] = []
        self.buffer.push(pose_est, t)
        self.tracker.update(pose_est)
        in_row = self.perception_enabled and in_row_raw

        if self._monitor(t, corridor_dist):
            events.append(("intervention", "monitor"))
            return Decision(self.mode, self.tracker.reference(), events, True)

        failure = (
            mhe_ready
            and t >= self._refractory_until
            and self.mode is not Mode.RECOVERY
            and detect_failure(params, cfg)
        )
        if failure:
            events.append(("failure_detected", f"mu={params.mu:.3f}"))
            if not self.recovery_enabled:
                events.append(("intervention", "failure_no_recovery"))
                return Decision(self.mode, self.tracker.reference(), events, True)
            if self.tracker.progress_s - self._streak_progress < cfg.progress_reset_dist:
                self._streak += 1
            else:
                self._streak = 1
            self._streak_progress = self.tracker.progress_s
            if self._streak > cfg.max_consecutive_recoveries:
                events.append(("intervention", "repeated_recovery"))
                return Decision(self.mode, self.tracker.reference(), events, True)
            self.recoveries += 1
            self._recovery_path = recovery_reference(self.buffer, cfg)
            n = self._recovery_path.states.shape[0]
            replay_time = n * cfg.resample_spacing / cfg.reverse_speed
            self._recovery_deadline = t + replay_time + 2.0
            self._restored_since = None
            prev = self.mode
            self.mode = Mode.RECOVERY
            events.append(("recovery_start", f"from={prev.value}"))
            return Decision(self.mode, self._recovery_path, events)

        if self.mode is Mode.RECOVERY:
            restored = mhe_ready and params.mu > cfg.mu_failure + cfg.mu_hysteresis
            if restored:
                if self._restored_since is None:
                    self._restored_since = t
            else:
                self._restored_since = None
            done_by_mu = (
                self._restored_since is not None
                and t - self._restored_since >= cfg.failure_refractory
            )
            done_by_path = t >= self._recovery_deadline
            if done_by_mu or done_by_path:
                self._refractory_until = t + cfg.failure_refractory
                self._recovery_path = None
                self.mode = Mode.IN_ROW if in_row else Mode.OUT_ROW
                why = "mu_restored" if done_by_mu else "path_consumed"
                events.append(("recovery_end", why))
            else:
                return Decision(Mode.RECOVERY, self._recovery_path, events)

        want = Mode.IN_ROW if in_row else Mode.OUT_ROW
        if want is not self.mode:
            events.append(("mode_change", f"{self.mode.value}->{want.value}"))
            self.mode = want
        if self.mode is Mode.IN_ROW:
            try:
                if not lane.initialized:
                    raise StaleLaneEstimate("lane filter not initialized")
                ref = lane_reference(lane.est, cfg, t)
            except StaleLaneEstimate:
                events.append(("perception_stale", ""))
                ref = self.tracker.reference()
        else:
            ref = self.tracker.reference()
        return Decision(self.mode, ref, events)
