"""Top-down run rendering.

One SVG per run: stem bands, the truth path, the estimated path, and
markers where recoveries and interventions happened. Field geometry is
rebuilt from the scenario file when plotting from a run directory.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import scenario_from_ini
from .world import FieldMap, build_field

_RECOVERY_EVENTS = ("recovery_start",)
_INTERVENTION_EVENTS = ("intervention",)


def _parse_rows(rows: list[str]) -> tuple[list[float], ...]:
    tx, ty, ex, ey = [], [], [], []
    for row in rows:
        parts = row.split(",")
        tx.append(float(parts[1]))
        ty.append(float(parts[2]))
        ex.append(float(parts[4]))
        ey.append(float(parts[5]))
    return tx, ty, ex, ey


def _event_points(events: list[str], names: tuple[str, ...]):
    xs, ys = [], []
    for row in events:
        parts = row.split(",")
        if len(parts) >= 4 and parts[1] in names:
            xs.append(float(parts[2]))
            ys.append(float(parts[3]))
    return xs, ys


def emit_plots(
    trajectory: list[str],
    field: FieldMap,
    events: list[str],
    out_path: str | Path,
) -> Path:
    """Render one run to an SVG file and return its path."""
    if not trajectory:
        raise ValueError("trajectory log is empty")
    tx, ty, ex, ey = _parse_rows(trajectory)

    plt.rcParams["svg.hashsalt"] = "cropnav"
    fig, ax = plt.subplots(figsize=(11.0, 6.0))
    stems = field.stem_array
    ax.scatter(stems[:, 0], stems[:, 1], s=1.0, c="#2e7d32", linewidths=0,
               label="crop stems", rasterized=False)
    ax.plot(tx, ty, color="#1565c0", lw=1.2, label="truth")
    ax.plot(ex, ey, color="#ef6c00", lw=0.9, ls="--", label="estimate")

    rx, ry = _event_points(events, _RECOVERY_EVENTS)
    if rx:
        ax.scatter(rx, ry, marker="^", s=45, c="#fbc02d", edgecolors="black",
                   linewidths=0.6, zorder=5, label="recovery")
    ix, iy = _event_points(events, _INTERVENTION_EVENTS)
    if ix:
        ax.scatter(ix, iy, marker="x", s=60, c="#c62828", linewidths=1.8,
                   zorder=6, label="intervention")

    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="upper right", fontsize=8, framealpha=0.9)
    ax.grid(True, lw=0.3, alpha=0.4)

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return out


def plot_run(run_dir: str | Path, out_path: str | Path | None = None) -> Path:
    """Plot a previously written run directory (trajectory + events + ini)."""
    run = Path(run_dir)
    traj = run.joinpath("trajectory.csv").read_text().strip().splitlines()[1:]
    events = run.joinpath("events.csv").read_text().strip().splitlines()[1:]
    sc = scenario_from_ini(run.joinpath("scenario.ini").read_text())
    field = build_field(sc.field, sc.seed)
    target = Path(out_path) if out_path is not None else run / "run.svg"
    return emit_plots(traj, field, events, target)
