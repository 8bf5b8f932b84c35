"""Train the two bundled policies and write them to src/rlqp/data/weights.

  vector_random.bin   vector policy, RandomQp dims 10..50, desk preset
  scalar_scaled.bin   scalar policy, the theta-scaled random family (n=20)

Training problems use seed offset 0, per-epoch test problems 10**7; the
acceptance checks evaluate on offset 2*10**7, so the three sets never overlap.

    python3 scripts/train_policies.py [--which vector|scalar|both] [--epochs-vector 15]
"""

import argparse
import logging
import time
from pathlib import Path

from rlqp.problems import ProblemSampler
from rlqp.rl import preset, train

WEIGHTS = Path(__file__).resolve().parents[1] / "src" / "rlqp" / "data" / "weights"
TRAIN_OFFSET, TEST_OFFSET, HELDOUT_OFFSET = 0, 10**7, 2 * 10**7


def train_vector(epochs, out, log=None, seed=0):
    gen = ProblemSampler(("random",), (10, 50), seed_offset=TRAIN_OFFSET)
    test = ProblemSampler(("random",), (10, 50), seed_offset=TEST_OFFSET)
    cfg = preset("desk", test_episodes=20)
    return train("vector", gen, cfg, epochs, seed=seed, test_generator=test,
                 log_path=log, weights_path=out)


def train_scalar(epochs, out, log=None, seed=0):
    gen = ProblemSampler(("scaled",), (20, 20), seed_offset=TRAIN_OFFSET)
    test = ProblemSampler(("scaled",), (20, 20), seed_offset=TEST_OFFSET)
    cfg = preset("desk", test_episodes=20, steps_per_epoch=1000)
    return train("scalar", gen, cfg, epochs, seed=seed, test_generator=test,
                 log_path=log, weights_path=out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--which", choices=("vector", "scalar", "both"), default="both")
    ap.add_argument("--epochs-vector", type=int, default=15)
    ap.add_argument("--epochs-scalar", type=int, default=10)
    ap.add_argument("--out-dir", default=str(WEIGHTS))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.which in ("vector", "both"):
        t = time.time()
        res = train_vector(args.epochs_vector, out / "vector_random.bin",
                           out / "vector_random.log.jsonl", args.seed)
        print(f"vector: best epoch {res.best_epoch}, {time.time() - t:.0f} s")
    if args.which in ("scalar", "both"):
        t = time.time()
        res = train_scalar(args.epochs_scalar, out / "scalar_scaled.bin",
                           out / "scalar_scaled.log.jsonl", args.seed)
        print(f"scalar: best epoch {res.best_epoch}, {time.time() - t:.0f} s")


if __name__ == "__main__":
    main()
