"""Command line: generate, solve, train, bench, convert."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, problems, qps, rl
from .policy import FixedPolicy, HeuristicPolicy, ScalarNetPolicy, VectorNetPolicy
from .solver import SolverSettings, Status, solve

EXIT_OK, EXIT_USAGE, EXIT_UNSOLVED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_seed() -> int:
    try:
        return int(os.environ.get("RLQP_SEED", "0"))
    except ValueError:
        return 0


def parse_policy(text: str):
    """fixed | heuristic | scalar:<weights> | vector:<weights>"""
    kind, _, path = text.partition(":")
    if kind == "fixed" and not path:
        return FixedPolicy()
    if kind == "heuristic" and not path:
        return HeuristicPolicy()
    if kind in ("scalar", "vector") and path:
        cls = ScalarNetPolicy if kind == "scalar" else VectorNetPolicy
        try:
            return cls.from_file(path, name=text)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot load policy {text!r}: {exc}") from None
    raise UsageError(f"unknown policy {text!r}")


def parse_dims(text: str):
    """``lo..hi`` range or comma list."""
    if ".." in text:
        lo, hi = (int(t) for t in text.split(".."))
        if lo > hi:
            raise UsageError(f"empty dimension range {text!r}")
        return lo, hi
    vals = [int(t) for t in text.split(",")]
    return min(vals), max(vals)


def _load_problem(args):
    if args.gen:
        return problems.generate(problems.GeneratorSpec.parse(args.gen))
    return qps.read_qps(args.file)


def _load_warm_start(path, problem):
    path = Path(path)
    if path.suffix == ".npz":
        data = np.load(path)
        x, y = data["x"], data["y"]
    else:
        data = json.loads(path.read_text())
        x, y = np.asarray(data["x"], float), np.asarray(data["y"], float)
    if x.shape != (problem.n,) or y.shape != (problem.m,):
        raise UsageError("warm start dimensions do not match the problem")
    return x, y


def cmd_solve(args) -> int:
    if bool(args.file) == bool(args.gen):
        raise UsageError("give exactly one of a QPS file or --gen class:dim:seed")
    problem = _load_problem(args)
    policy = parse_policy(args.policy)
    settings = SolverSettings(eps_abs=args.eps, eps_rel=args.eps, max_iter=args.max_iter,
                              adapt_interval=args.adapt_interval, time_limit=args.time_limit)
    warm = _load_warm_start(args.warm_start, problem) if args.warm_start else None
    res = solve(problem, settings, policy, warm_start=warm)
    print(f"problem     {problem.name} (n={problem.n}, m={problem.m}, nnz={problem.nnz})")
    print(f"policy      {args.policy}")
    print(f"status      {res.status}")
    print(f"iterations  {res.iterations}")
    print(f"adaptations {res.adapt_count}")
    print(f"time        {res.solve_time:.4f} s")
    print(f"objective   {res.objective:.10g}")
    if res.message:
        print(f"message     {res.message}")
    if args.out:
        Path(args.out).write_text(json.dumps(dict(x=res.x.tolist(), y=res.y.tolist(),
                                                  status=str(res.status),
                                                  iterations=res.iterations)))
    return EXIT_OK if res.status is Status.SOLVED else EXIT_UNSOLVED


def cmd_train(args) -> int:
    lo, hi = parse_dims(args.dims)
    seed = args.seed
    config = rl.preset(args.preset)
    overrides = {}
    if args.steps_per_epoch:
        overrides["steps_per_epoch"] = args.steps_per_epoch
    if args.initial_steps is not None:
        overrides["initial_random_steps"] = args.initial_steps
    if args.update_every:
        overrides["update_every"] = args.update_every
    if args.batch_size:
        overrides["batch_size"] = args.batch_size
    if args.test_episodes is not None:
        overrides["test_episodes"] = args.test_episodes
    if overrides:
        config = rl.preset(args.preset, **overrides)
    classes = [c.strip() for c in args.cls.split(",")]
    train_gen = problems.ProblemSampler(classes, (lo, hi), seed_offset=seed * 10**7)
    test_gen = problems.ProblemSampler(classes, (lo, hi), seed_offset=seed * 10**7 + 5 * 10**6)
    res = rl.train(args.mode, train_gen, config, args.epochs, seed=seed,
                   test_generator=test_gen, rollout_workers=args.rollout_workers,
                   log_path=args.log, weights_path=args.out)
    print(f"trained {args.mode} policy for {args.epochs} epochs; best epoch {res.best_epoch}")
    print(f"weights written to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    pols = {}
    for text in args.policies.split(","):
        p = parse_policy(text)
        pols[text] = p
    if args.dims == "schedule":
        dims_for = problems.schedule_default
    else:
        vals = [int(t) for t in args.dims.split(",")]
        dims_for = lambda cls: vals  # noqa: E731
    seed = args.seed
    specs = [problems.GeneratorSpec(cls, d, seed=seed + 1000 * k)
             for cls in args.classes.split(",") for k, d in enumerate(dims_for(cls))]
    settings = SolverSettings(max_iter=args.max_iter, time_limit=args.time_limit,
                              adapt_interval=args.adapt_interval)
    records = bench.run_grid(specs, pols, settings, repeats=args.repeats, jobs=args.jobs)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            bench.write_csv(records, fh, with_time=args.with_time)
    summary = bench.summarize(records)
    if args.summary:
        Path(args.summary).write_text(summary.to_json() + "\n")
    for name, info in summary.policies.items():
        sgm = info["sgm_iterations"]
        sgm_text = f"{sgm:.1f}" if sgm is not None else "-"
        print(f"{name:24s} solved {info['solved']}/{info['runs']}  sgm iterations {sgm_text}")
    return EXIT_OK


def cmd_convert(args) -> int:
    if args.check:
        try:
            problem = qps.read_qps(args.check)
        except (qps.QpsError, ValueError) as exc:
            print(f"invalid: {exc}", file=sys.stderr)
            return EXIT_UNSOLVED
        print(f"{problem.name}: n={problem.n} m={problem.m} nnz={problem.nnz}")
        return EXIT_OK
    if not (args.gen and args.out):
        raise UsageError("convert needs --gen and --out, or --check")
    problem = problems.generate(problems.GeneratorSpec.parse(args.gen))
    Path(args.out).write_text(qps.write_qps(problem))
    print(f"wrote {args.out} (n={problem.n}, m={problem.m})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rlqp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="solve one QP")
    p.add_argument("file", nargs="?")
    p.add_argument("--gen", help="class:dim:seed")
    p.add_argument("--policy", default="heuristic")
    p.add_argument("--warm-start", help="JSON or .npz with x and y")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--max-iter", type=int, default=200000)
    p.add_argument("--adapt-interval", type=int, default=100)
    p.add_argument("--time-limit", type=float, default=None)
    p.add_argument("--out", help="write the solution as JSON")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train a rho policy with TD3")
    p.add_argument("--mode", choices=("scalar", "vector"), required=True)
    p.add_argument("--class", dest="cls", default="random")
    p.add_argument("--dims", default="10..50")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--preset", choices=tuple(rl.PRESETS), default="desk")
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--initial-steps", type=int)
    p.add_argument("--update-every", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--test-episodes", type=int)
    p.add_argument("--rollout-workers", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="run a policy x problem grid")
    p.add_argument("--classes", default="random,eq")
    p.add_argument("--policies", default="fixed,heuristic")
    p.add_argument("--dims", default="10,20,30,40,50", help="comma list or 'schedule'")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--max-iter", type=int, default=200000)
    p.add_argument("--time-limit", type=float, default=bench.DEFAULT_TIME_LIMIT)
    p.add_argument("--adapt-interval", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--summary")
    p.add_argument("--with-time", action="store_true", help="add wall-clock column to the CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("convert", help="write generated problems as QPS, or check a QPS file")
    p.add_argument("--gen", help="class:dim:seed")
    p.add_argument("--out")
    p.add_argument("--check", metavar="FILE")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, NotImplementedError, FileNotFoundError) as exc:
        print(f"rlqp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
