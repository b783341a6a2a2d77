"""Small-scale version of the navigation ablation.

Compares the full stack, the stack without recovery, and GNSS-only waypoint
tracking on a shortened serpentine over two seeds. The full 10-seed 580 m
study lives behind `cropnav ablation --scenarios
cropnav_recovery,cropnav_norecovery,gnss_only --seeds 1..10 --out <dir>`;
this script finishes in about a minute.
"""

from dataclasses import replace

from cropnav.harness import builtin_scenarios, format_ablation, run_ablation

scs = builtin_scenarios()
short = []
for name in ("cropnav_recovery", "cropnav_norecovery", "gnss_only"):
    sc = scs[name]
    field = replace(sc.field, n_rows=4, row_length=45.0, gap_overrides=((0, 67, 30), (1, 67, 30), (2, 167, 30), (3, 167, 30)))
    short.append(replace(sc, name=name + "_short", field=field, lanes=(0, 1, 2)))

rows, totals = run_ablation(short, seeds=[1, 2])
print(format_ablation(rows, totals))
print("meters per intervention ('-' means the stack never needed one):")
for t in totals:
    print(f"  {t['scenario']:28s} {t['m_per_intervention']}")
