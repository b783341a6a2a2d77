"""Run one small scenario end to end and render it.

Builds a 3-row field, drives the serpentine with the full stack, prints the
headline metrics, and writes the run artifacts (CSV logs, scenario file,
metrics, SVG) next to this script.
"""

from pathlib import Path

from cropnav.harness import Scenario, run_scenario, write_run
from cropnav.plots import plot_run
from cropnav.world import FieldConfig, GnssQuality

OUT = Path(__file__).parent / "out" / "quickstart"

scenario = Scenario(
    name="quickstart",
    field=FieldConfig(
        n_rows=3,
        row_length=20.0,
        headland_margin=2.5,
        gap_prob=0.02,
        gnss_open=GnssQuality(0.02),
        gnss_canopy=GnssQuality(0.08, dropout_prob=0.05),
    ),
    lanes=(0, 1),
    duration_limit_s=300.0,
)

result = run_scenario(scenario, seed=1)
m = result.metrics

print(f"scenario       {scenario.name} (seed {result.seed})")
print(f"distance       {m.distance_m:.1f} m")
print(f"recoveries     {m.recoveries}")
print(f"interventions  {m.interventions}")
print(f"completed      {m.completion}")
print(f"wall time      {m.wall_time:.1f} s")

run_dir = write_run(result, OUT)
svg = plot_run(run_dir)
print(f"artifacts in   {run_dir}")
print(f"rendered       {svg}")
