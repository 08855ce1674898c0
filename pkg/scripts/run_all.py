"""Run every toleranced scenario at default settings and print a PASS/FAIL table.

    python3 scripts/run_all.py [--out runs] [--seed 0] [--workers 4]
"""

import argparse
import sys

from noisereg import harness as H

RUNS = [
    ("scaling", {}),
    ("sde", {}),
    ("counterexample", {}),
    ("moments", {}),
    ("moments", {"field": "zero", "tolerance": 1e-3, "out_suffix": "heat"}),
    ("demo", {"demo": "ex1-regularization"}),
    ("demo", {"demo": "ex2-concentration"}),
    ("duality", {}),
    ("demo", {"demo": "apriori-stability"}),
    ("demo", {"demo": "renormalization"}),
    ("demo", {"demo": "uniqueness"}),
    ("flow", {}),
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)
    failed = 0
    for kind, extra in RUNS:
        extra = dict(extra)
        name = extra.pop("out_suffix", None) or extra.get("demo") or kind
        cfg = H.ScenarioConfig(kind=kind, seed=args.seed, workers=args.workers,
                               out=f"{args.out}/{name}", **extra)
        rep = H.run_scenario(cfg)
        failed += not rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'}  {name:<20} {rep.wall_clock:7.1f}s  {rep.config_hash[:12]}")
        for m in rep.metrics:
            if m["comparator"] != "info":
                print(f"      {m['name']}: {m['value']} {m['comparator']} {m['tolerance']}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
