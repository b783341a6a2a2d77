import math

import numpy as np
import pytest

from cropnav.model import (
    ControlInput,
    RobotState,
    TractionParams,
    VehicleConfig,
    step,
    wheel_commands,
)
from cropnav.sim import (
    GnssBiasModel,
    ImuNoise,
    LidarConfig,
    SimState,
    in_canopy,
    sample_gnss,
    sample_imu,
    sample_lidar,
    sim_step,
)
from cropnav.world import FieldConfig, GnssQuality, build_field, substream

VCFG = VehicleConfig()


def make_field(**kw):
    base = dict(n_rows=3, row_length=8.0, gap_prob=0.0, stem_jitter=0.0)
    base.update(kw)
    return build_field(FieldConfig(**base), seed=3)


def wheels(v, om, mu=1.0):
    return wheel_commands(ControlInput(v, om), mu, VCFG)


def test_free_motion_matches_model():
    f = make_field()
    start = RobotState(4.0, f.lane_centers[0], 0.0)
    s = SimState(truth=start)
    sim_step(s, wheels(0.5, 0.2), f, VCFG, 0.02)
    ref = step(start, ControlInput(0.5, 0.2), TractionParams(1.0, 1.0), 0.02)
    assert s.truth.x == pytest.approx(ref.x, abs=1e-12)
    assert s.truth.y == pytest.approx(ref.y, abs=1e-12)
    assert s.clock == pytest.approx(0.02)


def test_friction_zone_scales_motion():
    zone = (((0.0, -5.0), (20.0, -5.0), (20.0, 5.0), (0.0, 5.0)), 0.5, 1.0)
    f = make_field(friction_zones=(zone,))
    start = RobotState(4.0, f.lane_centers[0], 0.0)
    s = SimState(truth=start)
    sim_step(s, wheels(1.0, 0.0), f, VCFG, 0.02)
    assert s.truth.x - start.x == pytest.approx(0.5 * 1.0 * 0.02, abs=1e-9)


def _drive_into_row(f):
    # Approach a stem perpendicularly from the lane below so the contact
    # normal points back toward the robot (along the row it is ambiguous:
    # the footprint overlaps several stems at once).
    sx, sy, _ = f.rows[1].stems[20]
    s = SimState(truth=RobotState(sx, sy - 0.45, math.pi / 2.0))
    for _ in range(200):
        sim_step(s, wheels(1.0, 0.0), f, VCFG, 0.02)
        if s.stuck:
            break
    return s


def test_collision_arrests_motion_and_reverse_frees():
    f = make_field()
    s = _drive_into_row(f)
    assert s.stuck
    y_stuck = s.truth.y
    # Pushing forward stays frozen.
    sim_step(s, wheels(1.0, 0.0), f, VCFG, 0.02)
    assert s.stuck and s.truth.y == pytest.approx(y_stuck)
    # Backing away clears the contact and moves again.
    for _ in range(5):
        sim_step(s, wheels(-0.5, 0.0), f, VCFG, 0.02)
    assert not s.stuck
    assert s.truth.y < y_stuck


def test_stuck_yaw_authority_reduced():
    f = make_field()
    s = _drive_into_row(f)
    assert s.stuck
    th0 = s.truth.theta
    sim_step(s, wheels(1.0, 1.0), f, VCFG, 0.02)
    assert s.stuck
    dth = s.truth.theta - th0
    assert 0 < dth < 1.0 * 0.02  # less than free yaw authority
    assert dth == pytest.approx(s.stuck_yaw_factor * 0.02, rel=1e-6)


def test_gnss_open_sky_unbiased():
    f = make_field(gnss_open=GnssQuality(0.0))
    s = SimState(truth=RobotState(4.0, 30.0, 0.0))  # far from canopy
    rng = substream(1, "gnss")
    fix = sample_gnss(s, f, rng, GnssBiasModel(sigma=0.5, tau=10.0))
    assert fix.z_x == pytest.approx(4.0, abs=1e-12)
    assert fix.z_y == pytest.approx(30.0, abs=1e-12)
    assert fix.valid


def test_gnss_canopy_bias_applied_under_canopy_only():
    f = make_field()
    rng = substream(1, "gnss")
    s = SimState(truth=RobotState(4.0, f.lane_centers[0], 0.0))
    assert in_canopy(f, (4.0, f.lane_centers[0]))
    fixes = [sample_gnss(s, f, rng, GnssBiasModel(sigma=0.3, tau=5.0)) for _ in range(50)]
    err = np.array([[fx.z_x - 4.0, fx.z_y - f.lane_centers[0]] for fx in fixes])
    # Gauss-Markov wander dominates the white noise at this setting.
    assert np.abs(err).max() > 3 * f.gnss_canopy.sigma


def test_gnss_dropout():
    f = make_field(gnss_canopy=GnssQuality(0.05, dropout_prob=1.0))
    s = SimState(truth=RobotState(4.0, 0.38, 0.0))
    fix = sample_gnss(s, f, substream(0, "gnss"), GnssBiasModel(sigma=0.0))
    assert not fix.valid


def test_imu_compass_offset():
    s = SimState(truth=RobotState(0.0, 0.0, 0.5))
    prev = s.snapshot()
    s.clock = 0.02
    rng = substream(0, "imu")
    sample = sample_imu(s, prev, 0.1, rng, ImuNoise(0.0, 0.0, 0.0))
    assert sample.z_theta == pytest.approx(0.5 - 0.1, abs=1e-12)
    assert sample.a_z == pytest.approx(9.81)


def test_imu_gyro_from_truth_difference():
    prev = SimState(truth=RobotState(0.0, 0.0, 0.0))
    s = SimState(truth=RobotState(0.0, 0.0, 0.04), clock=0.02)
    sample = sample_imu(s, prev, 0.0, substream(0, "imu"), ImuNoise(0.0, 0.0, 0.0))
    assert sample.omega_z == pytest.approx(2.0, abs=1e-9)


def test_lidar_sees_adjacent_rows():
    f = make_field()
    y = f.lane_centers[0]
    s = SimState(truth=RobotState(4.0, y, 0.0))
    cloud = sample_lidar(s, f, LidarConfig(range_sigma=0.0), substream(0, "lidar"))
    assert cloud.points.shape[0] > 50
    # In the sensor frame the bounding rows sit near +-lane_width/2; the
    # scan also catches the next row over at 3*lane_width/2.
    ys = cloud.points[:, 1]
    half = f.lane_width / 2.0
    near_bounding = np.abs(np.abs(ys) - half) < 0.1
    near_next = np.abs(np.abs(ys) - 3.0 * half) < 0.1
    assert np.count_nonzero(near_bounding) > 0.5 * ys.size
    assert np.count_nonzero(near_bounding | near_next) > 0.9 * ys.size


def test_lidar_outliers_and_determinism():
    f = make_field()
    s = SimState(truth=RobotState(4.0, f.lane_centers[0], 0.0))
    cfg = LidarConfig(range_sigma=0.01, outlier_rate=5.0)
    a = sample_lidar(s, f, cfg, substream(9, "lidar"))
    b = sample_lidar(s, f, cfg, substream(9, "lidar"))
    assert np.array_equal(a.points, b.points)
    clean = sample_lidar(s, f, LidarConfig(range_sigma=0.01), substream(9, "lidar"))
    assert a.points.shape[0] >= clean.points.shape[0]


def test_sim_step_rejects_bad_dt():
    f = make_field()
    s = SimState(truth=RobotState(0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        sim_step(s, wheels(0.0, 0.0), f, VCFG, 0.0)
