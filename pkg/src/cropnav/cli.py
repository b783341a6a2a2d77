"""Command-line entry points: run one scenario, run an ablation, plot a run."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import (
    format_ablation,
    load_scenario,
    run_ablation,
    run_scenario,
    write_ablation,
    write_run,
)
from .plots import plot_run


def _parse_seeds(spec: str) -> list[int]:
    """Either a single integer or an inclusive range like `1..10`."""
    if ".." in spec:
        a, b = spec.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {spec!r}")
        return list(range(lo, hi + 1))
    return [int(spec)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cropnav", description="Row-crop navigation scenario runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("--scenario", required=True,
                       help="built-in name or scenario file path")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", required=True, help="output directory")

    p_abl = sub.add_parser("ablation", help="run a scenario comparison")
    p_abl.add_argument("--scenarios", required=True,
                       help="comma-separated names or file paths")
    p_abl.add_argument("--seeds", required=True, type=_parse_seeds,
                       help="seed or inclusive range a..b")
    p_abl.add_argument("--out", required=True, help="output directory")

    p_plot = sub.add_parser("plot", help="render a finished run directory")
    p_plot.add_argument("--run", required=True, help="run directory to plot")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "run":
        sc = load_scenario(args.scenario)
        result = run_scenario(sc, seed=args.seed)
        out = write_run(result, args.out)
        m = result.metrics
        mpi = (
            f"{m.meters_per_intervention:.1f}"
            if m.meters_per_intervention is not None
            else "-"
        )
        print(
            f"{sc.name} seed {result.seed}: {m.distance_m:.1f} m, "
            f"{m.recoveries} recoveries, {m.interventions} interventions "
            f"({mpi} m/intervention), completed={m.completion}"
        )
        print(f"artifacts in {out}")
        return 0

    if args.command == "ablation":
        scenarios = [
            load_scenario(tok.strip())
            for tok in args.scenarios.split(",")
            if tok.strip()
        ]
        rows, totals = run_ablation(scenarios, args.seeds)
        write_ablation(rows, totals, args.out)
        sys.stdout.write(format_ablation(rows, totals))
        print(f"artifacts in {Path(args.out)}")
        return 0

    svg = plot_run(args.run)
    print(f"wrote {svg}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
