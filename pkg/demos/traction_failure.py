"""Watch the traction estimate collapse when the robot hits a stem.

Drives straight at a crop row with the full sensing cascade running
(GNSS + compass + commands into the horizon estimator, IMU into the EKF)
and prints the estimated mu before and after contact. The supervisor's
failure threshold is mu < 0.2.
"""

import math

from cropnav.estimator import CascadeEstimator
from cropnav.model import ControlInput, RobotState, VehicleConfig, inverse_wheel, wheel_commands
from cropnav.sim import GnssBiasModel, ImuNoise, SimState, sample_gnss, sample_imu, sim_step
from cropnav.world import FieldConfig, GnssQuality, build_field, substream

DT = 0.02
vcfg = VehicleConfig()

field = build_field(
    FieldConfig(
        n_rows=2,
        row_length=20.0,
        gap_prob=0.0,
        stem_jitter=0.0,
        gnss_open=GnssQuality(0.02),
        gnss_canopy=GnssQuality(0.08),
    ),
    seed=11,
)
sx, sy, _ = field.rows[0].stems[60]
start = RobotState(sx, sy - 3.5, math.pi / 2.0)

sim = SimState(truth=start)
est = CascadeEstimator(start)
rng_gnss = substream(1, "gnss")
rng_imu = substream(1, "imu")
cmd = wheel_commands(ControlInput(0.5, 0.0), 1.0, vcfg)

contact_t = None
for tick in range(int(16.0 / DT)):
    t = tick * DT
    if tick % 10 == 0:
        est.push_gnss(sample_gnss(sim, field, rng_gnss, GnssBiasModel()))
    if tick % 5 == 0:
        est.push_command(inverse_wheel(cmd, vcfg))
        if est.mhe_ready and tick % 50 == 0:
            flag = " <- failure threshold" if est.params.mu < 0.2 else ""
            print(f"t={t:5.1f}s  mu_hat={est.params.mu:.3f}  stuck={sim.stuck}{flag}")
    prev = sim.snapshot()
    sim_step(sim, cmd, field, vcfg, DT)
    if sim.stuck and contact_t is None:
        contact_t = t
        print(f"t={t:5.1f}s  contact with stem at ({sx:.2f}, {sy:.2f})")
    est.push_imu(sample_imu(sim, prev, 0.0, rng_imu, ImuNoise()), DT)

print(f"\ncontact at t={contact_t:.1f}s, final mu_hat={est.params.mu:.3f}")
