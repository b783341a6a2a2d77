import math

import numpy as np
import pytest

from cropnav.model import ControlInput, TractionParams
from cropnav.perception import (
    DebouncedClassifier,
    LaneEstimate,
    LaneFilter,
    PerceptionConfig,
    classify_in_row,
    detect_rows,
    lane_predict,
    lane_update,
)
from cropnav.sim import PointCloud2D

CFG = PerceptionConfig()


def synthetic_scan(
    d, phi, w=0.76, sides=("left", "right"), spacing=0.02, jitter=0.0, rng=None
):
    """Stem returns from a robot at lateral offset d, heading phi in the lane.

    d > 0 puts the robot left of centre; the rows then appear shifted down
    in the sensor frame and tilted by -phi.
    """
    xs = np.arange(0.0, 3.0, spacing)
    pts = []
    c, s = math.cos(phi), math.sin(phi)
    for side, y_lane in (("left", w / 2.0), ("right", -w / 2.0)):
        if side not in sides:
            continue
        rel_y = y_lane - d
        for x in xs:
            px = c * x + s * rel_y
            py = -s * x + c * rel_y
            pts.append((px, py))
    pts = np.array(pts)
    if jitter and rng is not None:
        pts = pts + rng.normal(0.0, jitter, pts.shape)
    return PointCloud2D(points=pts, timestamp=0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        PerceptionConfig(lane_width=0.0)


def test_detect_centered_scan():
    cloud = synthetic_scan(0.0, 0.0)
    left, right, meas = detect_rows(cloud, LaneEstimate(), CFG)
    assert left is not None and right is not None
    assert meas[0] == pytest.approx(0.0, abs=5e-3)
    assert meas[1] == pytest.approx(0.0, abs=5e-3)


@pytest.mark.parametrize("d,phi", [(0.1, 0.0), (0.0, math.radians(5)), (-0.08, math.radians(-8))])
def test_detect_offset_and_heading(d, phi):
    cloud = synthetic_scan(d, phi)
    _, _, meas = detect_rows(cloud, LaneEstimate(), CFG)
    assert meas is not None
    assert meas[0] == pytest.approx(d, abs=0.02)
    assert meas[1] == pytest.approx(phi, abs=math.radians(1.5))


def test_detect_single_side():
    cloud = synthetic_scan(0.05, 0.0, sides=("left",))
    left, right, meas = detect_rows(cloud, LaneEstimate(), CFG)
    assert left is not None and right is None
    assert meas is not None
    assert meas[0] == pytest.approx(0.05, abs=0.02)


def test_detect_rejects_wrong_width():
    # Both lines present but at 1.5x the nominal width: gate rejects.
    cloud = synthetic_scan(0.0, 0.0, w=0.76 * 1.5)
    _, _, meas = detect_rows(cloud, LaneEstimate(), CFG)
    assert meas is None


def test_detect_empty_cloud():
    cloud = PointCloud2D(points=np.empty((0, 2)), timestamp=0.0)
    assert detect_rows(cloud, LaneEstimate(), CFG) == (None, None, None)


def test_classify_in_row_counts_forward_points():
    cloud = synthetic_scan(0.0, 0.0)
    assert classify_in_row(cloud, CFG)
    sparse = PointCloud2D(points=cloud.points[::30], timestamp=0.0)
    assert not classify_in_row(sparse, CFG)


def test_debounce_requires_streak():
    c = DebouncedClassifier(PerceptionConfig(debounce=3), initial=False)
    assert not c.update(True)
    assert not c.update(True)
    assert c.update(True)  # third agreeing scan flips
    assert c.flips == 1
    # An interrupted streak starts over.
    c.update(False)
    c.update(False)
    c.update(True)
    c.update(False)
    assert c.state is True
    assert c.flips == 1


def test_lane_predict_moves_with_model():
    est = LaneEstimate(d_lane=0.0, phi=0.1)
    out = lane_predict(est, ControlInput(1.0, 0.0), TractionParams(0.8, 1.0), 0.1)
    assert out.d_lane == pytest.approx(0.8 * math.sin(0.1) * 0.1)
    assert out.phi == pytest.approx(0.1)
    with pytest.raises(ValueError):
        lane_predict(est, ControlInput(0, 0), TractionParams(1, 1), 0.0)


def test_lane_update_pulls_toward_measurement():
    est = LaneEstimate(d_lane=0.2, phi=0.0, cov=np.diag([0.04, 0.04]))
    out = lane_update(est, (0.0, 0.0), np.diag([1e-4, 1e-4]))
    assert abs(out.d_lane) < 0.02
    assert np.allclose(out.cov, out.cov.T)


def test_lane_filter_seeds_on_first_detection():
    f = LaneFilter(CFG)
    assert not f.initialized
    meas = f.observe(synthetic_scan(0.1, 0.0))
    assert f.initialized
    assert meas is not None
    assert f.est.d_lane == pytest.approx(0.1, abs=0.02)
    assert f.est.left_valid and f.est.right_valid


def test_lane_filter_drops_lock_after_misses():
    f = LaneFilter(PerceptionConfig(max_misses=3))
    f.observe(synthetic_scan(0.0, 0.0))
    assert f.initialized
    empty = PointCloud2D(points=np.empty((0, 2)), timestamp=1.0)
    for _ in range(3):
        f.observe(empty)
    assert not f.initialized
