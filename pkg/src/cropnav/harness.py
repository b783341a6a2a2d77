"""Scenario runner and experiment plumbing.

One logical clock per run. The base loop steps the plant at 50 Hz; the IMU
samples every base tick, control runs at 10 Hz, the LiDAR at 10 Hz, and
GNSS at 5 Hz. All randomness flows through named sub-streams of the master
seed, so rerunning a (scenario, seed) pair is byte-identical and toggling
one sensor never shifts another's draws.
"""

from __future__ import annotations

import configparser
import json
import math
import time
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from .control import MpcConfig, Tracker
from .estimator import CascadeEstimator, MheConfig
from .model import (
    ControlInput,
    RobotState,
    VehicleConfig,
    WheelCommand,
    inverse_wheel,
    wrap_angle,
)
from .perception import (
    DebouncedClassifier,
    LaneFilter,
    PerceptionConfig,
    classify_in_row,
)
from .sim import (
    GnssBiasModel,
    ImuNoise,
    LidarConfig,
    SimState,
    sample_gnss,
    sample_imu,
    sample_lidar,
    sim_step,
)
from .supervisor import Mode, Supervisor, SupervisorConfig
from .world import (
    ConfigurationError,
    FieldConfig,
    GnssQuality,
    build_field,
    serpentine_plan,
    substream,
)

BASE_DT = 0.02  # 50 Hz plant clock
CONTROL_DIV = 5  # 10 Hz
LIDAR_DIV = 5  # 10 Hz
GNSS_DIV = 10  # 5 Hz

TRAJ_COLUMNS = (
    "t,truth_x,truth_y,truth_theta,est_x,est_y,est_theta,"
    "mu_hat,nu_hat,dtheta_hat,d_lane,phi,mode,v_left,v_right"
)
EVENT_COLUMNS = "t,event,x,y,detail"


@dataclass(frozen=True)
class NoiseProfile:
    gnss_open_sigma_m: float = 0.02
    gnss_canopy_sigma_m: float = 0.08
    gnss_canopy_bias_m: float = 0.12
    gnss_bias_tau_s: float = 45.0
    compass_sigma_rad: float = 0.02
    lidar_sigma_m: float = 0.01
    lidar_outlier_rate: float = 2.0


@dataclass(frozen=True)
class Scenario:
    name: str
    field: FieldConfig
    lanes: tuple[int, ...]
    noise: NoiseProfile = NoiseProfile()
    recovery_enabled: bool = True
    perception_enabled: bool = True
    mu_failure: float = 0.2
    n_inrow: int = 50
    seed: int = 0
    duration_limit_s: float = 1200.0
    intervention_cap: int | None = None
    compass_offset: float = 0.04
    cruise_speed: float = 1.0
    mpc_horizon: int = 10
    mpc_dt: float = 0.1
    mpc_v_max: float = 1.5
    mhe_horizon: int = 20
    mhe_max_iters: int = 50

    def __post_init__(self):
        if not self.lanes:
            raise ConfigurationError("scenario needs at least one lane")
        if self.duration_limit_s <= 0:
            raise ConfigurationError("duration limit must be positive")


@dataclass(frozen=True)
class RunMetrics:
    distance_m: float
    recoveries: int
    interventions: int
    meters_per_intervention: float | None
    completion: bool
    wall_time: float


@dataclass
class RunResult:
    metrics: RunMetrics
    trajectory: list[str]  # formatted CSV rows
    events: list[str]
    scenario: Scenario
    seed: int


def builtin_scenarios() -> dict[str, Scenario]:
    # Staged lane gaps (both bounding rows missing over ~4.5 m) force the
    # stack to bridge short stretches on degraded GNSS mid-row, which is
    # where collisions and recoveries actually happen.
    staged_gaps = (
        (0, 133, 30), (1, 133, 30),
        (1, 333, 30), (2, 333, 30),
        (2, 467, 30), (3, 467, 30),
        (3, 200, 30), (4, 200, 30),
        (4, 400, 30), (5, 400, 30),
        (5, 267, 30), (6, 267, 30),
    )
    base_field = FieldConfig(
        n_rows=7,
        row_length=90.0,
        headland_margin=3.0,
        gap_prob=0.02,
        gap_overrides=staged_gaps,
        gnss_open=GnssQuality(0.02),
        gnss_canopy=GnssQuality(0.08, dropout_prob=0.05),
    )
    recovery = Scenario(
        name="cropnav_recovery",
        field=base_field,
        lanes=tuple(range(6)),
        noise=NoiseProfile(gnss_canopy_bias_m=0.18),
    )
    norecovery = replace(recovery, name="cropnav_norecovery", recovery_enabled=False)
    gnss_only = replace(
        recovery,
        name="gnss_only",
        perception_enabled=False,
        recovery_enabled=True,
        intervention_cap=5,
    )
    # The endurance scenario keeps natural random gaps but not the staged
    # double-sided ones; those exist to drive the failure-rate comparison.
    long_field = replace(
        base_field,
        n_rows=16,
        row_length=80.0,
        group_break=(13, 10.0),
        gap_overrides=(),
    )
    long_path = Scenario(
        name="long_path",
        field=long_field,
        lanes=tuple(range(12)) + (13, 14),
        duration_limit_s=2400.0,
    )
    return {s.name: s for s in (recovery, norecovery, gnss_only, long_path)}


# --------------------------------------------------------------------------
# Scenario file round-trip (INI sections [field] / [noise] / [stack] / [run]).


def scenario_to_ini(sc: Scenario) -> str:
    cp = configparser.ConfigParser()
    cp["field"] = {
        "rows": str(sc.field.n_rows),
        "row_length_m": repr(sc.field.row_length),
        "lane_width_m": repr(sc.field.lane_width),
        "plant_spacing_m": repr(sc.field.plant_spacing),
        "stem_radius_m": repr(sc.field.stem_radius),
        "gap_prob": repr(sc.field.gap_prob),
        "headland_margin_m": repr(sc.field.headland_margin),
        "lanes": ",".join(str(i) for i in sc.lanes),
    }
    if sc.field.group_break is not None:
        cp["field"]["group_break"] = (
            f"{sc.field.group_break[0]},{sc.field.group_break[1]!r}"
        )
    if sc.field.gap_overrides:
        cp["field"]["gap_overrides"] = ";".join(
            f"{r}:{first}:{count}" for r, first, count in sc.field.gap_overrides
        )
    n = sc.noise
    cp["noise"] = {
        "gnss_open_sigma_m": repr(n.gnss_open_sigma_m),
        "gnss_canopy_sigma_m": repr(n.gnss_canopy_sigma_m),
        "gnss_canopy_bias_m": repr(n.gnss_canopy_bias_m),
        "gnss_bias_tau_s": repr(n.gnss_bias_tau_s),
        "compass_sigma_rad": repr(n.compass_sigma_rad),
        "lidar_sigma_m": repr(n.lidar_sigma_m),
        "lidar_outlier_rate": repr(n.lidar_outlier_rate),
    }
    cp["stack"] = {
        "recovery_enabled": str(sc.recovery_enabled).lower(),
        "perception_enabled": str(sc.perception_enabled).lower(),
        "mu_failure": repr(sc.mu_failure),
        "n_inrow": str(sc.n_inrow),
        "cruise_speed": repr(sc.cruise_speed),
        "compass_offset": repr(sc.compass_offset),
        "mpc_horizon": str(sc.mpc_horizon),
        "mpc_dt": repr(sc.mpc_dt),
        "mpc_v_max": repr(sc.mpc_v_max),
        "mhe_horizon": str(sc.mhe_horizon),
        "mhe_max_iters": str(sc.mhe_max_iters),
    }
    cp["run"] = {
        "name": sc.name,
        "seed": str(sc.seed),
        "duration_limit_s": repr(sc.duration_limit_s),
    }
    if sc.intervention_cap is not None:
        cp["run"]["intervention_cap"] = str(sc.intervention_cap)
    import io

    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def scenario_from_ini(text: str) -> Scenario:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    f = cp["field"]
    group_break = None
    if "group_break" in f:
        idx, gap = f["group_break"].split(",")
        group_break = (int(idx), float(gap))
    gap_overrides = tuple(
        tuple(int(p) for p in item.split(":"))
        for item in f.get("gap_overrides", "").split(";")
        if item.strip()
    )
    nz = cp["noise"] if cp.has_section("noise") else {}
    noise = NoiseProfile(
        gnss_open_sigma_m=float(nz.get("gnss_open_sigma_m", 0.02)),
        gnss_canopy_sigma_m=float(nz.get("gnss_canopy_sigma_m", 0.08)),
        gnss_canopy_bias_m=float(nz.get("gnss_canopy_bias_m", 0.12)),
        gnss_bias_tau_s=float(nz.get("gnss_bias_tau_s", 45.0)),
        compass_sigma_rad=float(nz.get("compass_sigma_rad", 0.02)),
        lidar_sigma_m=float(nz.get("lidar_sigma_m", 0.01)),
        lidar_outlier_rate=float(nz.get("lidar_outlier_rate", 2.0)),
    )
    field = FieldConfig(
        n_rows=int(f["rows"]),
        row_length=float(f["row_length_m"]),
        lane_width=float(f.get("lane_width_m", 0.76)),
        plant_spacing=float(f.get("plant_spacing_m", 0.15)),
        stem_radius=float(f.get("stem_radius_m", 0.02)),
        gap_prob=float(f.get("gap_prob", 0.0)),
        headland_margin=float(f.get("headland_margin_m", 3.0)),
        group_break=group_break,
        gap_overrides=gap_overrides,
        gnss_open=GnssQuality(noise.gnss_open_sigma_m),
        gnss_canopy=GnssQuality(noise.gnss_canopy_sigma_m, dropout_prob=0.05),
    )
    st = cp["stack"] if cp.has_section("stack") else {}
    run = cp["run"]
    lanes = tuple(
        int(tok) for tok in f.get("lanes", "").split(",") if tok.strip()
    ) or tuple(range(max(field.n_rows - 1, 1)))
    cap = run.get("intervention_cap")
    return Scenario(
        name=run.get("name", "custom"),
        field=field,
        lanes=lanes,
        noise=noise,
        recovery_enabled=st.get("recovery_enabled", "true") == "true",
        perception_enabled=st.get("perception_enabled", "true") == "true",
        mu_failure=float(st.get("mu_failure", 0.2)),
        n_inrow=int(st.get("n_inrow", 50)),
        seed=int(run.get("seed", 0)),
        duration_limit_s=float(run.get("duration_limit_s", 1200.0)),
        intervention_cap=int(cap) if cap is not None else None,
        compass_offset=float(st.get("compass_offset", 0.04)),
        cruise_speed=float(st.get("cruise_speed", 1.0)),
        mpc_horizon=int(st.get("mpc_horizon", 10)),
        mpc_dt=float(st.get("mpc_dt", 0.1)),
        mpc_v_max=float(st.get("mpc_v_max", 1.5)),
        mhe_horizon=int(st.get("mhe_horizon", 20)),
        mhe_max_iters=int(st.get("mhe_max_iters", 50)),
    )


def load_scenario(spec: str) -> Scenario:
    """Resolve a scenario by built-in name or file path."""
    builtins = builtin_scenarios()
    if spec in builtins:
        return builtins[spec]
    path = Path(spec)
    if path.exists():
        return scenario_from_ini(path.read_text())
    raise ConfigurationError(
        f"unknown scenario {spec!r}; built-ins: {sorted(builtins)}"
    )


# --------------------------------------------------------------------------
# The run loop.


def _nearest_on_path(states: np.ndarray, x: float, y: float, i0: int, span: int):
    lo = max(i0 - span, 0)
    hi = min(i0 + span, states.shape[0])
    seg = states[lo:hi]
    d = np.hypot(seg[:, 0] - x, seg[:, 1] - y)
    j = int(np.argmin(d))
    return lo + j, float(d[j])


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def run_scenario(sc: Scenario, seed: int | None = None) -> RunResult:
    """Execute one scenario to completion, limit, or intervention cap."""
    if not sc.perception_enabled and not sc.recovery_enabled:
        raise ConfigurationError(
            "GNSS-only mode requires recovery or an intervention cap"
        )
    run_seed = sc.seed if seed is None else seed
    t_wall = time.perf_counter()

    field = build_field(sc.field, run_seed)
    plan = serpentine_plan(field, list(sc.lanes))
    pts = plan.points()
    heading0 = math.atan2(pts[1][1] - pts[0][1], pts[1][0] - pts[0][0])
    start = RobotState(pts[0][0], pts[0][1], heading0)

    vcfg = VehicleConfig(v_max=sc.mpc_v_max)
    sim = SimState(truth=start)
    est = CascadeEstimator(
        start, MheConfig(horizon=sc.mhe_horizon, max_iters=sc.mhe_max_iters)
    )
    pcfg = PerceptionConfig(lane_width=field.lane_width, n_inrow=sc.n_inrow)
    lane = LaneFilter(pcfg)
    classifier = DebouncedClassifier(pcfg)
    sup_cfg = SupervisorConfig(
        mu_failure=sc.mu_failure, cruise_speed=sc.cruise_speed
    )
    sup = Supervisor(plan, sup_cfg, sc.recovery_enabled, sc.perception_enabled)
    tracker = Tracker(
        MpcConfig(horizon=sc.mpc_horizon, dt=sc.mpc_dt, v_max=sc.mpc_v_max), vcfg
    )

    rng_gnss = substream(run_seed, "gnss")
    rng_imu = substream(run_seed, "imu")
    rng_lidar = substream(run_seed, "lidar")
    lidar_cfg = LidarConfig(
        range_sigma=sc.noise.lidar_sigma_m, outlier_rate=sc.noise.lidar_outlier_rate
    )
    imu_noise = ImuNoise(compass_sigma=sc.noise.compass_sigma_rad)
    bias_model = GnssBiasModel(sc.noise.gnss_canopy_bias_m, sc.noise.gnss_bias_tau_s)

    traj: list[str] = []
    events: list[str] = []
    cmd = WheelCommand(0.0, 0.0)
    distance = 0.0
    completion = False
    tick = 0
    control_dt = BASE_DT * CONTROL_DIV

    def log_event(t, name, detail):
        events.append(
            f"{t:.2f},{name},{_fmt(sim.truth.x)},{_fmt(sim.truth.y)},{detail}"
        )

    while True:
        t = tick * BASE_DT
        if t >= sc.duration_limit_s:
            log_event(t, "duration_limit", "")
            break

        if tick % GNSS_DIV == 0:
            est.push_gnss(sample_gnss(sim, field, rng_gnss, bias_model))

        if sc.perception_enabled and tick % LIDAR_DIV == 0:
            cloud = sample_lidar(sim, field, lidar_cfg, rng_lidar)
            was_in = classifier.state
            in_row = classifier.update(classify_in_row(cloud, pcfg))
            if was_in and not in_row:
                # Left the row: drop the lock so the approach to the next
                # lane re-acquires from scratch.
                lane.reset(cloud.timestamp)
            # The filter observes continuously; OutRow mode simply ignores
            # it for control. Locking on during the entry approach lets
            # in-row control cancel GNSS bias from the first tick.
            lane.observe(cloud)

        if tick % CONTROL_DIV == 0:
            path = sup.tracker.path.states
            _, corridor = _nearest_on_path(
                path, sim.truth.x, sim.truth.y, sup.tracker._idx, 120
            )
            dec = sup.step(
                t, est.pose, est.params, est.mhe_ready,
                classifier.state, lane, corridor,
            )
            for name, detail in dec.events:
                log_event(t, name, detail)
            if dec.intervention:
                _reset_after_intervention(sup, sim, est, lane, tracker, t)
                log_event(t, "reset", f"interventions={sup.interventions}")
                cmd = WheelCommand(0.0, 0.0)
                if (
                    sc.intervention_cap is not None
                    and sup.interventions >= sc.intervention_cap
                ):
                    log_event(t, "intervention_cap", "")
                    break
            else:
                cmd, _sol = tracker.tick(est.pose, dec.reference, est.params)
            u_body = inverse_wheel(cmd, vcfg)
            est.push_command(u_body)
            if sc.perception_enabled and lane.initialized:
                lane.predict(u_body, est.params, control_dt)
            traj.append(
                ",".join(
                    (
                        f"{t:.2f}",
                        _fmt(sim.truth.x),
                        _fmt(sim.truth.y),
                        _fmt(sim.truth.theta),
                        _fmt(est.pose.x),
                        _fmt(est.pose.y),
                        _fmt(est.pose.theta),
                        _fmt(est.params.mu),
                        _fmt(est.params.nu),
                        _fmt(est.params.delta_theta),
                        _fmt(lane.est.d_lane),
                        _fmt(lane.est.phi),
                        dec.mode.value,
                        _fmt(cmd.v_left),
                        _fmt(cmd.v_right),
                    )
                )
            )
            if sup.tracker.done:
                completion = True
                log_event(t, "plan_complete", "")
                break

        prev = sim.snapshot()
        sim_step(sim, cmd, field, vcfg, BASE_DT)
        distance += math.hypot(sim.truth.x - prev.truth.x, sim.truth.y - prev.truth.y)
        est.push_imu(
            sample_imu(sim, prev, sc.compass_offset, rng_imu, imu_noise), BASE_DT
        )
        tick += 1

    metrics = RunMetrics(
        distance_m=distance,
        recoveries=sup.recoveries,
        interventions=sup.interventions,
        meters_per_intervention=(
            distance / sup.interventions if sup.interventions else None
        ),
        completion=completion,
        wall_time=time.perf_counter() - t_wall,
    )
    return RunResult(metrics, traj, events, sc, run_seed)


def _reset_after_intervention(sup, sim, est, lane, tracker, t):
    """Place the robot back on the plan, as a human operator would."""
    states = sup.tracker.path.states
    i, _ = _nearest_on_path(states, sim.truth.x, sim.truth.y, sup.tracker._idx, 120)
    pose = RobotState(states[i, 0], states[i, 1], states[i, 2])
    sim.truth = pose
    sim.stuck = False
    sim.contact_normal = None
    sim.vel = (0.0, 0.0)
    est.reset(pose, t)
    lane.reset(t)
    tracker.reset()
    sup.reset_after_intervention(t)


# --------------------------------------------------------------------------
# Artifacts.


def write_run(result: RunResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trajectory.csv").write_text(
        TRAJ_COLUMNS + "\n" + "\n".join(result.trajectory) + "\n"
    )
    (out / "events.csv").write_text(
        EVENT_COLUMNS + "\n" + "\n".join(result.events) + "\n"
    )
    (out / "scenario.ini").write_text(
        scenario_to_ini(replace(result.scenario, seed=result.seed))
    )
    m = result.metrics
    (out / "metrics.json").write_text(
        json.dumps(
            {
                "scenario": result.scenario.name,
                "seed": result.seed,
                "distance_m": round(m.distance_m, 3),
                "recoveries": m.recoveries,
                "interventions": m.interventions,
                "meters_per_intervention": (
                    round(m.meters_per_intervention, 1)
                    if m.meters_per_intervention is not None
                    else None
                ),
                "completion": m.completion,
                "wall_time_s": round(m.wall_time, 2),
            },
            indent=2,
        )
        + "\n"
    )
    return out


def run_ablation(
    scenarios: list[Scenario], seeds: list[int]
) -> tuple[list[dict], list[dict]]:
    """Per-run rows plus one total row per scenario."""
    if len(scenarios) < 2:
        raise ConfigurationError("ablation needs at least two scenarios")
    rows = []
    totals = []
    for sc in scenarios:
        dist_sum = 0.0
        rec_sum = 0
        int_sum = 0
        for seed in seeds:
            m = run_scenario(sc, seed=seed).metrics
            dist_sum += m.distance_m
            rec_sum += m.recoveries
            int_sum += m.interventions
            rows.append(
                {
                    "scenario": sc.name,
                    "seed": seed,
                    "distance_m": round(m.distance_m, 1),
                    "recoveries": m.recoveries,
                    "interventions": m.interventions,
                    "m_per_intervention": (
                        round(m.meters_per_intervention, 1)
                        if m.meters_per_intervention is not None
                        else "-"
                    ),
                    "completion": m.completion,
                }
            )
        totals.append(
            {
                "scenario": sc.name,
                "seed": "total",
                "distance_m": round(dist_sum, 1),
                "recoveries": rec_sum,
                "interventions": int_sum,
                "m_per_intervention": (
                    round(dist_sum / int_sum, 1) if int_sum else "-"
                ),
                "completion": "",
            }
        )
    return rows, totals


def format_ablation(rows: list[dict], totals: list[dict]) -> str:
    cols = (
        "scenario", "seed", "distance_m", "recoveries",
        "interventions", "m_per_intervention",
    )
    widths = {
        c: max(len(c), *(len(str(r[c])) for r in rows + totals)) for c in cols
    }
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines.append("  ".join("-" * widths[c] for c in cols))
    for r in rows + totals:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    return "\n".join(lines) + "\n"


def write_ablation(rows: list[dict], totals: list[dict], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = (
        "scenario", "seed", "distance_m", "recoveries",
        "interventions", "m_per_intervention", "completion",
    )
    lines = [",".join(cols)]
    for r in rows + totals:
        lines.append(",".join(str(r[c]) for c in cols))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    (out / "ablation.txt").write_text(format_ablation(rows, totals))
    return out
