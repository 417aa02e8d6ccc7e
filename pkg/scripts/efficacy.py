"""Equal-budget comparison of UCB steering against random ordering.

Writes ``curves.csv`` (strategy, seed, node-seconds used, found) and prints the
per-seed totals.

    python3 scripts/efficacy.py --out runs/efficacy --seeds 0 1 2
"""

import argparse
import csv
import logging
from pathlib import Path

import numpy as np

from fedfabric.bench.scenarios import efficacy_overrides, run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/efficacy")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--strategies", nargs="+", default=["ucb", "random"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    out = Path(args.out)
    found: dict[str, list[int]] = {s: [] for s in args.strategies}
    rows = []
    for seed in args.seeds:
        for strategy in args.strategies:
            app = run_scenario("moldesign", efficacy_overrides(strategy, seed), out / f"{strategy}-{seed}")["app"]
            found[strategy].append(app["found"])
            rows += [(strategy, seed, used, k) for used, k in app["curve"]]
            print(f"seed {seed} {strategy:>6}: {app['found']} of {app['counted_simulations']} "
                  f"simulations above {app['threshold']:.3f}")
    with open(out / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("strategy", "seed", "used_s", "found"))
        w.writerows(rows)
    means = {s: float(np.mean(v)) for s, v in found.items()}
    print("mean found:", ", ".join(f"{s}={m:.1f}" for s, m in means.items()))
    if "ucb" in means and means.get("random"):
        print(f"ucb / random = {means['ucb'] / means['random']:.2f}")


if __name__ == "__main__":
    main()
