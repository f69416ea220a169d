"""Full model vs the lambda1 = 0 ablation on a MovieLens-100K-sized block graph.

    python scripts/desk_experiment.py --seeds 5 --lambda1 1e-7 --lambda1 1e-2

Prints one line per seed and a median summary per lambda1 value.
"""

import argparse
from dataclasses import replace

import numpy as np

from lightgcl.experiments import DeskSetup, desk_benefit
from lightgcl.trainer import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--lambda1", type=float, action="append", help="repeatable; default 1e-7")
    p.add_argument("--users", type=int, default=DeskSetup.n_users)
    p.add_argument("--items", type=int, default=DeskSetup.n_items)
    p.add_argument("--mean-degree", type=int, default=DeskSetup.mean_degree)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    args = p.parse_args()

    setup = DeskSetup(n_users=args.users, n_items=args.items, mean_degree=args.mean_degree)
    base = replace(TrainConfig(), epochs=args.epochs, lr=args.lr)
    for lam in args.lambda1 or [1e-7]:
        print(f"# lambda1={lam:g}")
        pairs = desk_benefit(range(args.seeds), lam, setup, base, log=print)
        full = np.array([a.recall20 for a, _ in pairs])
        abl = np.array([b.recall20 for _, b in pairs])
        print(f"# lambda1={lam:g}: median recall@20 {np.median(full):.5f} vs ablation {np.median(abl):.5f}, "
              f"median gap {np.median(full - abl):+.5f}, wins {int(np.sum(full > abl))}/{len(pairs)}")


if __name__ == "__main__":
    main()
