"""Uncertainty-greedy exploration against a random walk.

For each scene seed both agents start from the same pose.  The greedy agent renders
its field's uncertainty in three directions and heads for the largest; the random
walker picks forward, left or right uniformly.  Coverage is the fraction of free
cells passed within half a cell.

    python demos/exploration.py --seeds 5 --steps 400
"""

import argparse

import numpy as np

from uncnav import evaluation as E
from uncnav import experiments as X


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=400)
    args = ap.parse_args()

    settings = E.AgentSettings(width=32, n_samples=16, train_steps=2, ray_batch=128)
    pairs = []
    print("seed  greedy  random")
    for seed in range(args.seeds):
        pair = X.exploration_pair(seed, settings, steps=args.steps)
        pairs.append(pair)
        print(f"{seed:4d}  {pair.greedy:.3f}   {pair.random:.3f}")
    greedy = np.mean([p.greedy for p in pairs])
    rand = np.mean([p.random for p in pairs])
    wins = np.mean([p.greedy > p.random for p in pairs])
    print(f"mean coverage greedy {greedy:.3f}, random {rand:.3f}, ratio {greedy / rand:.2f}, greedy ahead in {wins:.0%}")


if __name__ == "__main__":
    main()
