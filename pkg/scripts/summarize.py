"""Print markdown tables from per-seed experiment summaries.

    python scripts/summarize.py results/acceptance
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from vladistill.trainer import ABLATION_ROWS


def main(root: Path) -> None:
    runs = [json.loads(p.read_text()) for p in sorted(root.glob("seed*/summary.json"))]
    if not runs:
        sys.exit(f"no summaries under {root}")
    names = [n for n, _ in ABLATION_ROWS]
    seeds = [r["seed"] for r in runs]

    print("| row | " + " | ".join(f"seed {s}" for s in seeds) + " | mean |")
    print("|---" * (len(seeds) + 2) + "|")
    for n in names + ["teacher"]:
        vals = [r["teacher"]["l2_avg"] if n == "teacher" else r["ablation"][n]["l2_avg"] for r in runs]
        print(f"| {n} | " + " | ".join(f"{v:.3f}" for v in vals) + f" | {np.mean(vals):.3f} |")

    print()
    print("| seed | median CE coarse | median CE fine | mean min-CE before MC | after MC | teacher min | full-distill student min |")
    print("|---|---|---|---|---|---|---|")
    for r in runs:
        a, c = r["analysis"], r["seconds"]
        print(
            f"| {r['seed']} | {a['median_pre_refine']:.4f} | {a['median_post_refine']:.4f} | {a['mean_before_mc']:.4f} "
            f"| {a['mean_after_mc']:.4f} | {c['teacher'] / 60:.1f} | {c['student_visual_kd'] / 60:.1f} |"
        )


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("results/acceptance"))
