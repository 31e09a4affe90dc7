"""Condition numbers of optimised direction subsets against random subsets.

For each model and subset size, prints the optimised condition number, the
best of N random subsets, and the median random subset.

    python3 scripts/design_search.py --candidates 90 --random 10000
"""
import argparse
import time

import numpy as np

from dmribench.design import (
    condition_number,
    parse_model,
    random_subset_baseline,
    select_subset,
)
from dmribench.errors import RankDeficient
from dmribench.phantom import multishell_scheme
from dmribench.sphere import icosphere


def median_random(cands, k, model, n, seed):
    design = parse_model(model).design(cands)
    rng = np.random.default_rng(seed)
    conds = []
    for _ in range(n):
        try:
            conds.append(condition_number(design[rng.choice(len(cands), k, replace=False)]))
        except RankDeficient:
            conds.append(np.inf)
    return float(np.median(conds))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--candidates", default="90",
                    help="'icosphere' (642 points) or a direction count for an HCP-like shell")
    ap.add_argument("--random", type=int, default=10000, help="random subsets for the baseline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cases", nargs="+", default=["dti:6", "dti:12", "sh4:15", "sh4:20",
                                                   "sh6:28"],
                    help="model:k pairs")
    args = ap.parse_args()

    if args.candidates == "icosphere":
        cands = icosphere(3)[0]
    else:
        s = multishell_scheme((1000,), int(args.candidates), 0)
        cands = s.bvecs
    print(f"{len(cands)} candidate directions")
    print(f"{'model':6s} {'k':>3s} {'optimised':>10s} {'best rand':>10s} {'median':>10s} "
          f"{'time s':>7s}")
    for case in args.cases:
        model, k = case.split(":")
        k = int(k)
        t0 = time.perf_counter()
        sel = select_subset(cands, k, model, seed=args.seed)
        dt = time.perf_counter() - t0
        _, best = random_subset_baseline(cands, k, model, seed=args.seed + 1, n=args.random)
        med = median_random(cands, k, model, args.random, args.seed + 2)
        print(f"{model:6s} {k:3d} {sel.condition_number:10.4f} {best:10.4f} {med:10.4f} "
              f"{dt:7.1f}")


if __name__ == "__main__":
    main()
