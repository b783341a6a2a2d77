"""Ground-truth field model.

Fields are built as parallel plant rows along the +x axis. A "lane" is the
drivable corridor between two adjacent rows; lanes bordering a deliberate
group break (open ground between row blocks) are not crop lanes and are
skipped by plans. All geometry queries are read-only; a FieldMap never
mutates after construction.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .model import RobotState, VehicleConfig


class ConfigurationError(ValueError):
    pass


def substream(seed: int, name: str) -> np.random.Generator:
    """Named child RNG stream.

    Each consumer (field builder, each sensor, terrain) gets its own stream
    derived from the master seed, so toggling one feature never shifts the
    draws of another. The name hash is stable across runs and platforms.
    """
    digest = hashlib.sha256(name.encode()).digest()
    tag = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, tag]))


@dataclass(frozen=True)
class GnssQuality:
    sigma: float
    bias: tuple[float, float] = (0.0, 0.0)
    dropout_prob: float = 0.0
    clamped: bool = False

    def __post_init__(self):
        if self.sigma < 0 or not (0.0 <= self.dropout_prob <= 1.0):
            raise ValueError("sigma must be >= 0 and dropout_prob in [0, 1]")


@dataclass(frozen=True)
class Row:
    start: tuple[float, float]
    end: tuple[float, float]
    stems: tuple[tuple[float, float, float], ...]  # (x, y, radius), gaps removed
    gap_mask: tuple[int, ...]  # indices of missing plants in the nominal grid


@dataclass(frozen=True)
class WaypointPlan:
    waypoints: tuple[tuple[tuple[float, float], str], ...]  # (point, tag)

    def __post_init__(self):
        tags = [t for _, t in self.waypoints]
        for i, t in enumerate(tags):
            expect = "row_entry" if i % 2 == 0 else "row_exit"
            if t != expect:
                raise ValueError("waypoint tags must alternate entry/exit")

    def points(self) -> np.ndarray:
        return np.array([p for p, _ in self.waypoints])


@dataclass(frozen=True)
class FieldConfig:
    n_rows: int = 7
    row_length: float = 90.0
    lane_width: float = 0.76  # 30-inch commodity corn spacing
    plant_spacing: float = 0.15
    stem_radius: float = 0.02
    gap_prob: float = 0.0
    headland_margin: float = 2.0
    stem_jitter: float = 0.008
    canopy_overhang: float = 1.5
    robot_body_width: float = 0.3
    group_break: tuple[int, float] | None = None  # rows >= index shifted by gap [m]
    gap_overrides: tuple[tuple[int, int, int], ...] = ()  # (row, first stem, count)
    friction_zones: tuple[tuple[tuple[tuple[float, float], ...], float, float], ...] = ()
    gnss_open: GnssQuality = dc_field(default_factory=lambda: GnssQuality(0.02))
    gnss_canopy: GnssQuality = dc_field(
        default_factory=lambda: GnssQuality(0.08, dropout_prob=0.05)
    )


@dataclass(frozen=True)
class FieldMap:
    rows: tuple[Row, ...]
    lane_width: float
    headland_margin: float
    friction_zones: tuple[tuple[np.ndarray, float, float], ...]
    canopy_polygons: tuple[np.ndarray, ...]
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    row_length: float
    lane_centers: tuple[float, ...]
    crop_lanes: tuple[int, ...]  # lane indices that lie between crop rows
    stem_array: np.ndarray  # (S, 3) of x, y, radius over all rows
    gnss_open: GnssQuality
    gnss_canopy: GnssQuality


@dataclass(frozen=True)
class CollisionReport:
    hit: bool
    normal: tuple[float, float] | None = None
    stem: tuple[float, float, float] | None = None


def _point_in_polygon(poly: np.ndarray, x: float, y: float) -> bool:
    """Even-odd test; the boundary counts as inside."""
    n = poly.shape[0]
    inside = False
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        # On-segment check keeps the boundary closed.
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        if abs(cross) < 1e-12:
            if min(x1, x2) - 1e-12 <= x <= max(x1, x2) + 1e-12 and min(
                y1, y2
            ) - 1e-12 <= y <= max(y1, y2) + 1e-12:
                return True
        if (y1 > y) != (y2 > y):
            x_at = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x_at > x:
                inside = not inside
    return inside


def build_field(cfg: FieldConfig, seed: int) -> FieldMap:
    """Deterministically build the field for (cfg, seed)."""
    if cfg.lane_width <= cfg.robot_body_width:
        raise ConfigurationError(
            f"lane width {cfg.lane_width} m does not clear the robot body "
            f"({cfg.robot_body_width} m)"
        )
    if cfg.n_rows < 1 or cfg.row_length <= 0 or cfg.plant_spacing <= 0:
        raise ConfigurationError("field dimensions must be positive")

    rng = substream(seed, "field")
    row_ys = []
    y = 0.0
    for i in range(cfg.n_rows):
        if cfg.group_break is not None and i == cfg.group_break[0]:
            y += cfg.group_break[1]
        row_ys.append(y)
        y += cfg.lane_width

    n_stems = int(math.floor(cfg.row_length / cfg.plant_spacing)) + 1
    overrides: set[tuple[int, int]] = set()
    for row_idx, first, count in cfg.gap_overrides:
        for k in range(count):
            overrides.add((row_idx, first + k))

    rows = []
    all_stems = []
    for i, ry in enumerate(row_ys):
        xs = np.arange(n_stems) * cfg.plant_spacing
        jx = rng.normal(0.0, cfg.stem_jitter, n_stems)
        jy = rng.normal(0.0, cfg.stem_jitter, n_stems)
        gaps = rng.random(n_stems) < cfg.gap_prob
        gap_idx = [k for k in range(n_stems) if gaps[k] or (i, k) in overrides]
        gap_set = set(gap_idx)
        stems = tuple(
            (float(xs[k] + jx[k]), float(ry + jy[k]), cfg.stem_radius)
            for k in range(n_stems)
            if k not in gap_set
        )
        rows.append(
            Row(start=(0.0, ry), end=(cfg.row_length, ry), stems=stems,
                gap_mask=tuple(gap_idx))
        )
        all_stems.extend(stems)

    lane_centers = []
    crop_lanes = []
    for j in range(len(row_ys) - 1):
        lane_centers.append((row_ys[j] + row_ys[j + 1]) / 2.0)
        if abs((row_ys[j + 1] - row_ys[j]) - cfg.lane_width) < 1e-9:
            crop_lanes.append(j)

    # One canopy rectangle per contiguous row group, with overhang past the
    # row ends so GNSS already degrades on the final approach to an entry.
    canopy = []
    group_start = 0
    for j in range(1, len(row_ys) + 1):
        if j == len(row_ys) or row_ys[j] - row_ys[j - 1] > cfg.lane_width + 1e-9:
            y0 = row_ys[group_start] - cfg.lane_width / 2.0
            y1 = row_ys[j - 1] + cfg.lane_width / 2.0
            canopy.append(
                np.array(
                    [
                        (-cfg.canopy_overhang, y0),
                        (cfg.row_length + cfg.canopy_overhang, y0),
                        (cfg.row_length + cfg.canopy_overhang, y1),
                        (-cfg.canopy_overhang, y1),
                    ]
                )
            )
            group_start = j

    margin = cfg.headland_margin + 6.0
    bounds = (
        -margin,
        row_ys[0] - margin,
        cfg.row_length + margin,
        row_ys[-1] + margin,
    )
    zones = tuple(
        (np.array(poly), mu, nu) for poly, mu, nu in cfg.friction_zones
    )
    stem_array = (
        np.array(all_stems) if all_stems else np.zeros((0, 3))
    )
    return FieldMap(
        rows=tuple(rows),
        lane_width=cfg.lane_width,
        headland_margin=cfg.headland_margin,
        friction_zones=zones,
        canopy_polygons=tuple(canopy),
        bounds=bounds,
        row_length=cfg.row_length,
        lane_centers=tuple(lane_centers),
        crop_lanes=tuple(crop_lanes),
        stem_array=stem_array,
        gnss_open=cfg.gnss_open,
        gnss_canopy=cfg.gnss_canopy,
    )


def serpentine_plan(field: FieldMap, lane_indices: list[int]) -> WaypointPlan:
    """Entry/exit waypoint pair per lane, alternating traversal direction."""
    if not lane_indices:
        raise ConfigurationError("lane list is empty")
    for j in lane_indices:
        if j < 0 or j >= len(field.lane_centers):
            raise ConfigurationError(f"lane index {j} not in field")

    waypoints = []
    forward = True
    m = field.headland_margin
    for j in lane_indices:
        yc = field.lane_centers[j]
        if forward:
            entry, exit_ = (-m, yc), (field.row_length + m, yc)
        else:
            entry, exit_ = (field.row_length + m, yc), (-m, yc)
        waypoints.append((entry, "row_entry"))
        waypoints.append((exit_, "row_exit"))
        forward = not forward
    return WaypointPlan(waypoints=tuple(waypoints))


def gnss_quality_at(field: FieldMap, p: tuple[float, float]) -> GnssQuality:
    """GNSS noise profile at a point: degraded inside canopy, open-sky outside."""
    x, y = p
    xmin, ymin, xmax, ymax = field.bounds
    clamped = not (xmin <= x <= xmax and ymin <= y <= ymax)
    if clamped:
        x = min(max(x, xmin), xmax)
        y = min(max(y, ymin), ymax)
    for poly in field.canopy_polygons:
        if _point_in_polygon(poly, x, y):
            q = field.gnss_canopy
            return GnssQuality(q.sigma, q.bias, q.dropout_prob, clamped)
    q = field.gnss_open
    return GnssQuality(q.sigma, q.bias, q.dropout_prob, clamped)


def terrain_at(field: FieldMap, p: tuple[float, float]) -> tuple[float, float]:
    """True (mu, nu) at a point; first matching friction zone wins."""
    for poly, mu, nu in field.friction_zones:
        if _point_in_polygon(poly, p[0], p[1]):
            return (mu, nu)
    return (1.0, 1.0)


def collision_query(
    field: FieldMap, state: RobotState, cfg: VehicleConfig
) -> CollisionReport:
    """Does the robot's rectangular footprint overlap any stem disc?"""
    idx = _kernels.footprint_hits_stem(
        state.x,
        state.y,
        state.theta,
        cfg.body_half_length,
        cfg.body_half_width,
        field.stem_array,
    )
    if idx < 0:
        return CollisionReport(hit=False)
    sx, sy, sr = field.stem_array[idx]
    dx = state.x - sx
    dy = state.y - sy
    norm = math.hypot(dx, dy)
    if norm < 1e-9:
        normal = (math.cos(state.theta + math.pi), math.sin(state.theta + math.pi))
    else:
        normal = (dx / norm, dy / norm)
    return CollisionReport(hit=True, normal=normal, stem=(float(sx), float(sy), float(sr)))
