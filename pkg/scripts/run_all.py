"""Run every benchmark scenario once and print its checks.

    python3 scripts/run_all.py --out runs/all [--only noop_tiering backend_sweep]
"""

import argparse
import logging
from pathlib import Path

from fedfabric.bench.scenarios import SCENARIOS, run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/all")
    ap.add_argument("--only", nargs="*", choices=sorted(SCENARIOS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    failed = 0
    for name in args.only or list(SCENARIOS):
        m = run_scenario(name, None, Path(args.out) / name)
        print(f"== {name} ({m['wall_s']:.0f} s)")
        for a in m["assertions"]:
            print(f"  [{'PASS' if a['passed'] else 'FAIL'}] {a['name']}: {a['detail']}")
        failed += not m["passed"]
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
