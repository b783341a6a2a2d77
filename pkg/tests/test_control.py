import itertools
import math

import numpy as np
import pytest

from cropnav.control import (
    MpcConfig,
    Tracker,
    _window_reference,
    mpc_cost,
    mpc_solve,
)
from cropnav.model import (
    ControlInput,
    RobotState,
    TractionParams,
    VehicleConfig,
    step,
)
from cropnav.supervisor import ReferencePath

VCFG = VehicleConfig()
UNIT = TractionParams(1.0, 1.0)


def straight_ref(n=80, spacing=0.1, speed=0.8, frame="world"):
    s = np.arange(n) * spacing
    states = np.column_stack((s, np.zeros(n), np.zeros(n)))
    ff = np.column_stack((np.full(n, speed), np.zeros(n)))
    return ReferencePath(states, ff, frame, spacing)


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(horizon=0)
    with pytest.raises(ValueError):
        MpcConfig(dt=0.0)
    with pytest.raises(ValueError):
        MpcConfig(Q=np.diag([1.0, 1.0, -1.0]))


def test_solve_rejects_nonfinite_state():
    bad = object.__new__(RobotState)
    object.__setattr__(bad, "x", float("inf"))
    object.__setattr__(bad, "y", 0.0)
    object.__setattr__(bad, "theta", 0.0)
    with pytest.raises(ValueError):
        mpc_solve(bad, straight_ref(), UNIT, MpcConfig())


def test_solver_moves_toward_reference():
    sol = mpc_solve(RobotState(0.0, 0.0, 0.0), straight_ref(), UNIT, MpcConfig())
    assert sol.converged
    assert sol.first.v > 0.1
    assert abs(sol.first.omega) < 0.2


def test_solver_steers_back_to_line():
    # Robot offset left of the line: needs a right turn (omega < 0).
    sol = mpc_solve(RobotState(0.0, 0.3, 0.0), straight_ref(), UNIT, MpcConfig())
    assert sol.converged
    assert sol.first.omega < 0.0


def test_inputs_respect_wheel_box():
    cfg = MpcConfig(v_max=1.0)
    # Low traction demands fast wheels; the box must still hold.
    mu = 0.3
    sol = mpc_solve(
        RobotState(0.0, 0.0, 0.0),
        straight_ref(speed=1.5),
        TractionParams(mu, 1.0),
        cfg,
    )
    L = VCFG.track_width
    for v, om in sol.inputs:
        wl = v / mu - L * om / 2.0
        wr = v / mu + L * om / 2.0
        assert abs(wl) <= cfg.v_max + 1e-9
        assert abs(wr) <= cfg.v_max + 1e-9


def test_grid_solution_is_exact_minimum():
    cfg = MpcConfig(horizon=3)
    grid = (np.array([0.0, 0.5, 1.0]), np.array([-0.5, 0.0, 0.5]))
    x0 = RobotState(0.0, 0.1, 0.1)
    ref = straight_ref()
    sol = mpc_solve(x0, ref, UNIT, cfg, grid=grid)
    assert sol.converged
    combos = list(itertools.product(grid[0], grid[1]))
    best = min(
        mpc_cost(x0, np.array(seq), ref, UNIT, cfg)
        for seq in itertools.product(combos, repeat=cfg.horizon)
    )
    assert sol.cost <= best + 1e-9


def test_continuous_beats_grid():
    cfg = MpcConfig(horizon=3)
    grid = (np.array([0.0, 0.4, 0.8]), np.array([-0.4, 0.0, 0.4]))
    x0 = RobotState(0.0, 0.15, 0.0)
    ref = straight_ref()
    cont = mpc_solve(x0, ref, UNIT, cfg)
    disc = mpc_solve(x0, ref, UNIT, cfg, grid=grid)
    assert cont.cost <= disc.cost + 1e-6


def test_window_reference_anchors_at_projection():
    ref = straight_ref()
    cfg = MpcConfig()
    win = _window_reference(ref, RobotState(2.03, 0.5, 0.0), cfg)
    # First window state sits at the along-track projection, not behind it.
    assert win.states[0, 0] == pytest.approx(2.03, abs=1e-6)
    assert win.states.shape[0] == cfg.horizon + 1


def test_window_reference_terminal_hold():
    ref = straight_ref(n=5)
    cfg = MpcConfig()
    win = _window_reference(ref, RobotState(0.35, 0.0, 0.0), cfg)
    # Beyond the path end the window holds the last state at zero speed.
    assert win.states[-1, 0] == pytest.approx(ref.states[-1, 0])
    assert win.feedforward[-1, 0] == pytest.approx(0.0)


def test_tracker_closed_loop_converges_to_line():
    cfg = MpcConfig()
    tracker = Tracker(cfg, VCFG)
    ref = straight_ref(n=200, speed=0.8)
    state = RobotState(0.0, 0.25, 0.0)
    for _ in range(80):
        cmd, sol = tracker.tick(state, ref, UNIT)
        assert sol.converged
        u = ControlInput(
            (cmd.v_left + cmd.v_right) / 2.0,
            (cmd.v_right - cmd.v_left) / VCFG.track_width,
        )
        state = step(state, u, UNIT, cfg.dt)
    assert abs(state.y) < 1e-3
    assert state.x > 3.0


def test_tracker_stall_lead_resets_on_frame_change():
    tracker = Tracker(MpcConfig(), VCFG)
    robot_ref = straight_ref(frame="robot")
    pose = RobotState(4.0, 4.0, 1.0)
    tracker.tick(pose, robot_ref, UNIT)
    assert tracker._lead == 0.0
