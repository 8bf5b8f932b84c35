"""Benchmark grids, shifted geometric means and mutual-solve speedup ratios."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from .problems import GeneratorSpec, generate
from .solver import QpProblem, SolverSettings, Status, solve

FORMAT_VERSION = 1
DEFAULT_SHIFT = 10.0
DEFAULT_TIME_LIMIT = 300.0


def shifted_geomean(values: Iterable[float], shift: float = DEFAULT_SHIFT) -> float:
    """exp(mean(log(max(1, v + shift)))) - shift."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("shifted_geomean of an empty sequence")
    return float(np.exp(np.mean(np.log(np.maximum(1.0, v + shift)))) - shift)


@dataclasses.dataclass
class BenchRecord:
    problem: str
    cls: str
    n: int
    m: int
    nonzeros: int
    policy: str
    repeat: int
    seed: int
    status: str
    iterations: int
    solve_time: float
    adapt_count: int

    @property
    def solved(self) -> bool:
        return self.status == Status.SOLVED.value


CSV_COLUMNS = ["version", "problem", "class", "n", "m", "nonzeros", "policy", "repeat", "seed",
               "status", "iterations", "adapt_count"]


def _run_cell(args):
    prob_entry, repeat, pname, policy, settings = args
    if isinstance(prob_entry, GeneratorSpec):
        spec = dataclasses.replace(prob_entry, seed=prob_entry.seed + repeat)
        problem, cls, seed = generate(spec), spec.cls, spec.seed
    else:
        problem, cls, seed = prob_entry, "file", 0
    res = solve(problem, settings, policy)
    return BenchRecord(problem.name, cls, problem.n, problem.m, problem.nnz, pname, repeat, seed,
                       res.status.value, res.iterations, res.solve_time, res.adapt_count)


def run_grid(problems: Sequence[Union[QpProblem, GeneratorSpec]], policies: Mapping[str, object],
             settings: Optional[SolverSettings] = None, repeats: int = 1,
             jobs: int = 1) -> List[BenchRecord]:
    """Solve every (problem, repeat, policy) cell.

    A :class:`GeneratorSpec` is regenerated with ``seed + repeat`` for each
    repeat; a concrete problem is re-solved as is.  Records come back ordered
    by (problem, repeat, policy) regardless of ``jobs``.
    """
    if settings is None:
        settings = SolverSettings(time_limit=DEFAULT_TIME_LIMIT)
    cells = [(p, r, name, pol, settings) for p in problems for r in range(repeats)
             for name, pol in policies.items()]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_run_cell, cells))
    return [_run_cell(c) for c in cells]


def write_csv(records: Sequence[BenchRecord], fh=None, with_time: bool = False) -> str:
    """CSV of the records; wall-clock time only on request since it is not reproducible."""
    cols = CSV_COLUMNS + (["solve_time"] if with_time else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        row = [FORMAT_VERSION, r.problem, r.cls, r.n, r.m, r.nonzeros, r.policy, r.repeat, r.seed,
               r.status, r.iterations, r.adapt_count]
        if with_time:
            row.append(repr(r.solve_time))
        w.writerow(row)
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def read_csv(fh) -> List[BenchRecord]:
    out = []
    for row in csv.DictReader(fh):
        out.append(BenchRecord(row["problem"], row["class"], int(row["n"]), int(row["m"]),
                               int(row["nonzeros"]), row["policy"], int(row["repeat"]),
                               int(row["seed"]), row["status"], int(row["iterations"]),
                               float(row.get("solve_time") or "nan"), int(row["adapt_count"])))
    return out


@dataclasses.dataclass
class BenchSummary:
    policies: Dict[str, dict]
    ratios_iterations: Dict[str, Dict[str, Optional[float]]]
    ratios_time: Dict[str, Dict[str, Optional[float]]]
    shift: float = DEFAULT_SHIFT

    def to_json(self) -> str:
        return json.dumps(dict(version=FORMAT_VERSION, shift=self.shift, policies=self.policies,
                               ratios_iterations=self.ratios_iterations,
                               ratios_time=self.ratios_time), indent=2, sort_keys=True)


def _cell_key(r: BenchRecord):
    return (r.problem, r.cls, r.repeat, r.seed)


def summarize(records: Sequence[BenchRecord], shift: float = DEFAULT_SHIFT) -> BenchSummary:
    """Per-policy shifted geomeans and pairwise ratios over mutually solved cells.

    ``ratios[a][b]`` is geomean(a) / geomean(b) on cells both a and b solved,
    so a value above 1 means b needed less.
    """
    by_policy: Dict[str, Dict[tuple, BenchRecord]] = {}
    for r in records:
        by_policy.setdefault(r.policy, {})[_cell_key(r)] = r
    policies = {}
    for name, cells in by_policy.items():
        solved = [r for r in cells.values() if r.solved]
        policies[name] = dict(
            runs=len(cells), solved=len(solved),
            sgm_iterations=shifted_geomean([r.iterations for r in solved], shift) if solved else None,
            sgm_time=shifted_geomean([r.solve_time for r in solved], shift)
            if solved and not any(math.isnan(r.solve_time) for r in solved) else None)
    ratios_it: Dict[str, Dict[str, Optional[float]]] = {}
    ratios_t: Dict[str, Dict[str, Optional[float]]] = {}
    names = list(by_policy)
    for a in names:
        ratios_it[a], ratios_t[a] = {}, {}
        for b in names:
            keys = [k for k, r in by_policy[a].items()
                    if r.solved and k in by_policy[b] and by_policy[b][k].solved]
            if not keys:
                ratios_it[a][b] = ratios_t[a][b] = None
                continue
            ga = shifted_geomean([by_policy[a][k].iterations for k in keys], shift)
            gb = shifted_geomean([by_policy[b][k].iterations for k in keys], shift)
            ratios_it[a][b] = ga / gb if gb > 0 else None
            ta = [by_policy[a][k].solve_time for k in keys]
            tb = [by_policy[b][k].solve_time for k in keys]
            if any(math.isnan(t) for t in ta + tb):
                ratios_t[a][b] = None
            else:
                gtb = shifted_geomean(tb, shift)
                ratios_t[a][b] = shifted_geomean(ta, shift) / gtb if gtb > 0 else None
    return BenchSummary(policies, ratios_it, ratios_t, shift)
