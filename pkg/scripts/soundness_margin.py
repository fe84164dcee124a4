"""Tightness of the reach over-approximation against sampled eps-solutions.

For a benchmark, computes the reach grid of the initial set and samples
disturbed trajectories from it. Reports the number of sampled states
outside the grid (must be zero), how many occupied cells the samples
visit, and the largest distance from an occupied cell center to the
nearest sampled state: an upper estimate of how much the grid
over-approximates what sampling can reach.

    python3 scripts/soundness_margin.py --bench spiral2d --horizon 5
"""

import argparse

import numpy as np
from scipy.spatial import cKDTree

from robustcert.benchmarks import get_benchmark
from robustcert.certificate import default_shape, sample_in_cells
from robustcert.flow import lipschitz_estimate, sample_disturbed_batch
from robustcert.grid import ReachParams, rasterize, reach_interval


def margin(name: str, eps: float, horizon: float, trials: int, seed: int) -> dict:
    p = get_benchmark(name).problem
    shape = default_shape(p.dim)
    rng = np.random.default_rng(seed)
    I = rasterize(p, p.init, shape)
    R = reach_interval(I, p, ReachParams(eps, 0.5 / 8, lipschitz_estimate(p)), horizon)
    b = sample_disturbed_batch(p, sample_in_cells(I, trials, rng), horizon, eps, rng)
    states = b.states.reshape(-1, p.dim)
    visited = np.zeros(R.shape, bool)
    visited[tuple(R.cell_index(states).T)] = True
    gap, _ = cKDTree(states).query(R.occupied_centers())
    return {
        "outside": int((~R.contains(states)).sum()),
        "occupied_cells": R.count,
        "visited_cells": int((visited & R.occ).sum()),
        "max_gap": float(gap.max()),
        "mean_gap": float(gap.mean()),
        "cell": float(np.max(R.cell)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--bench", default="lin1d-stable")
    ap.add_argument("--eps", type=float, default=0.1)
    ap.add_argument("--horizon", type=float, default=5.0)
    ap.add_argument("--trials", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    m = margin(args.bench, args.eps, args.horizon, args.trials, args.seed)
    print(f"{args.bench}: {m['outside']} sampled states outside the grid")
    print(f"visited {m['visited_cells']} of {m['occupied_cells']} occupied cells "
          f"({m['visited_cells'] / m['occupied_cells']:.1%})")
    print(f"distance from occupied cells to nearest sample: max {m['max_gap']:.4f}, "
          f"mean {m['mean_gap']:.4f} (cell width {m['cell']:.4f})")


if __name__ == "__main__":
    main()
