"""Compare distillation methods on the default synthetic setup.

Trains the teacher once, then every method (with its tuned loss weights
from ``wkd.harness.protocol.TUNED``) on the evaluation seeds, and prints
mean and per-seed test accuracy. Takes roughly ten minutes on one core.

    python demos/compare_methods.py [--methods ce kd wkd-l ...] [--self-kd]
"""

import argparse
import time

import numpy as np

from wkd.harness.protocol import EVAL_SEEDS, TUNED, Study, self_kd_accuracies


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--methods", nargs="*", default=list(TUNED))
    ap.add_argument("--self-kd", action="store_true", help="also run S0 -> S1 self distillation")
    args = ap.parse_args()

    t0 = time.perf_counter()
    study = Study()
    print(f"teacher test accuracy {100 * study.teacher_record.final_test_acc:.2f}%")
    for method in args.methods:
        acc = study.accuracies(method, TUNED[method], EVAL_SEEDS)
        print(f"{method:12s} {100 * acc.mean():6.2f}%  seeds {' '.join(f'{100 * a:.1f}' for a in acc)}"
              f"  {TUNED[method]}", flush=True)
    if args.self_kd:
        s0, s1 = self_kd_accuracies(study, TUNED["wkd-l"], EVAL_SEEDS)
        print(f"{'self-kd S0':12s} {100 * np.mean(s0):6.2f}%")
        print(f"{'self-kd S1':12s} {100 * np.mean(s1):6.2f}%")
    print(f"{time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
