"""Iteration count against fixed rho_bar on the theta-scaled family, next to the
scalar policy's pick.  This is the sweep the acceptance check compares against.

    python3 scripts/rho_sweep.py --instances 5
"""

import argparse
import math
from importlib import resources

import numpy as np

from rlqp.policy import FixedPolicy, ScalarNetPolicy, featurize_scalar
from rlqp.problems import ProblemSampler, scaled_theta
from rlqp.rl import QpEnv
from rlqp.solver import SolverSettings, solve


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--instances", type=int, default=5)
    ap.add_argument("--offset", type=int, default=2 * 10**7)
    ap.add_argument("--weights", default=str(resources.files("rlqp") / "data" / "weights"
                                             / "scalar_scaled.bin"))
    args = ap.parse_args()
    policy = ScalarNetPolicy.from_file(args.weights)
    sampler = ProblemSampler(("scaled",), (20, 20), seed_offset=args.offset)
    grid = np.logspace(-6, 6, 25)
    settings = SolverSettings(max_iter=4000)
    for i in range(args.instances):
        spec = sampler.spec(i)
        prob = sampler(i)
        its = np.array([solve(prob, settings, FixedPolicy(rb)).iterations for rb in grid])
        chosen = policy.rho_bar_from_obs(featurize_scalar(QpEnv(prob, "scalar").state))
        got = solve(prob, settings, FixedPolicy(chosen)).iterations
        thr = np.sort(its)[math.ceil(len(grid) / 4) - 1]
        print(f"seed {spec.seed}  theta {scaled_theta(spec.seed):9.3g}  "
              f"best rho_bar {grid[np.argmin(its)]:8.2g} ({its.min()} it)  "
              f"policy {chosen:8.2g} ({got} it)  quartile cut {thr}")
        print("   " + " ".join(f"{v:d}" for v in its))


if __name__ == "__main__":
    main()
