#!/usr/bin/env python3
"""Run the amalgamation-vs-ablation generalization comparison.

Trains per-task teachers on one center, then for each seed trains the full
student and an ablated twin (no expert fusion, align/reg off) and evaluates
both on the training center (InVal) and a held-out center (ExVal). Writes
benchmark.json and a formatted table to --out.

Example:
    python scripts/run_desk_benchmark.py --out runs/benchmark --seeds 0 1 2
"""

import argparse
import sys
import time

import torch

from amalgseg.benchmark import format_benchmark_table, run_desk_benchmark


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", required=True)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--tasks", type=int, default=3)
    parser.add_argument("--shape", type=int, nargs=3, default=[32, 32, 32])
    parser.add_argument("--train-per-center", type=int, default=4)
    parser.add_argument("--eval-per-center", type=int, default=2)
    parser.add_argument("--suite-seed", type=int, default=701)
    parser.add_argument("--expert-epochs", type=int, default=50)
    parser.add_argument("--student-epochs", type=int, default=40)
    parser.add_argument("--threads", type=int, default=0,
                        help="torch thread cap (0 = leave default)")
    args = parser.parse_args()

    if args.threads:
        torch.set_num_threads(args.threads)
    t0 = time.time()
    result = run_desk_benchmark(
        seeds=tuple(args.seeds),
        n_tasks=args.tasks,
        shape=tuple(args.shape),
        train_per_center=args.train_per_center,
        eval_per_center=args.eval_per_center,
        suite_seed=args.suite_seed,
        expert_epochs=args.expert_epochs,
        student_epochs=args.student_epochs,
        out_dir=args.out,
        verbose=True,
    )
    print()
    print(format_benchmark_table(result))
    gap = result["mean_exval"]["amalgamated"] - result["mean_exval"]["ablated"]
    print(f"\nmean ExVal gap (amalgamated - ablated): {100 * gap:+.2f} dice points")
    print(f"wrote {args.out}/benchmark.json ({time.time() - t0:.0f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
