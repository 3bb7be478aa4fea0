"""Coarse loss-weight grid on the tuning seeds.

Reference loss weights tuned for large natural images do not transfer to
16x16 toy images (the feature losses alone differ by several orders of
magnitude at initialization), so every method gets a small grid over its
weight(s) -- and, for feature methods, the pooling grid -- and keeps its
best point. Tuning seeds
(100-102) are disjoint from the evaluation seeds (0-4) used by the
acceptance comparisons.

    python demos/tune_grid.py [--out tuning.json] [--methods kd wkd-l ...]
"""

import argparse
import json
import time

from wkd.harness.protocol import GRID, Study, tune


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="tuning.json")
    ap.add_argument("--methods", nargs="*", default=list(GRID))
    args = ap.parse_args()

    t0 = time.perf_counter()
    study = Study()
    print(f"teacher test accuracy {study.teacher_record.final_test_acc:.4f} "
          f"({time.perf_counter() - t0:.0f} s)")
    result = tune(study, args.methods)
    print("\nbest grid point per method:")
    for method, (best, _) in result.items():
        print(f"  {method:12s} {best}")
    with open(args.out, "w") as fh:
        json.dump({m: {"best": b, "grid": [{"point": p, "mean_test_acc": a} for p, a in s]}
                   for m, (b, s) in result.items()}, fh, indent=2)
    print(f"\nwrote {args.out} after {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
