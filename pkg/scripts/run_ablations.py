"""Train every fixture ablation and print the directional comparisons.

    python3 scripts/run_ablations.py [--seed 1] [--steps 300] [--out results.json]
"""

import argparse
import json

from splatocc.experiments import ABLATIONS, directional_checks, fixture_config, run_ablations


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--only", nargs="*", choices=sorted(ABLATIONS))
    ap.add_argument("--out")
    args = ap.parse_args()
    results = run_ablations(fixture_config(args.seed, args.steps), args.only, log=print)
    if not args.only:
        for name, (ok, detail) in directional_checks(results).items():
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({k: v.to_dict() for k, v in results.items()}, fh, indent=2)


if __name__ == "__main__":
    main()
