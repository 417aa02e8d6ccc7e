"""Held-out error per retraining round of the fine-tuning campaign.

    python3 scripts/finetune_rounds.py --out runs/finetune --seeds 0 1 2
"""

import argparse
import csv
import logging
from pathlib import Path

from fedfabric.bench.scenarios import run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/finetune")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        app = run_scenario("finetune", {"run": {"seed": seed}}, out / f"seed-{seed}")["app"]
        rows += [(seed, rnd, n_new, rms) for rnd, n_new, rms in app["rounds"]]
        print(f"seed {seed}: rms before {app['pre_rms']:.4f}, best after {app['best_rms']:.4f} "
              f"({app['new_structures']} new labels)")
    with open(out / "rounds.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("seed", "round", "new_labels", "rms"))
        w.writerows(rows)


if __name__ == "__main__":
    main()
