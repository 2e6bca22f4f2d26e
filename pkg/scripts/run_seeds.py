"""Run the per-seed experiment (pretrain, teacher, analyses, ablation).

    python scripts/run_seeds.py --seeds 0 1 2 --out results/acceptance

Results land in ``<out>/seed<k>/``; the acceptance tests reuse them when the
config and package sources are unchanged.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from vladistill import pipeline as P
from vladistill.config import TrainConfig, load_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=Path("results/acceptance"))
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    base = load_config(args.config) if args.config else TrainConfig()
    for seed in args.seeds:
        summary = P.seed_experiment(base.with_overrides(seed=seed), args.out / f"seed{seed}", args.threads)
        abl = {k: round(v["l2_avg"], 4) for k, v in summary["ablation"].items()}
        print(json.dumps({"seed": seed, "teacher_l2_avg": summary["teacher"]["l2_avg"], "ablation": abl}), flush=True)


if __name__ == "__main__":
    main()
