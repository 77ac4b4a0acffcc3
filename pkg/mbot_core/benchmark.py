# mbot_core/benchmark.py - Wall-clock comparison of minibatch and full solvers
import logging
import time
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from mbot_core.core_ot import SinkhornParams, sinkhorn, solve_exact_assignment
from mbot_core.distributions import CostSpec, generate_cloud
from mbot_core.minibatch import MinibatchConfig, u_stat_subsampled

logger = logging.getLogger(__name__)

SOLVERS = ("minibatch_exact", "minibatch_sinkhorn", "sinkhorn", "exact")
FULL_SOLVERS = ("sinkhorn", "exact")
TIMING_COLUMNS = ["solver", "n", "rep", "seconds", "value", "skipped"]


def _run_solver(solver, a, b, cost, cfg, p):
    # cost matrices are built inside each call and so are timed
    if solver == "minibatch_exact":
        return u_stat_subsampled(a, b, cost, cfg.with_(loss="W")).value
    if solver == "minibatch_sinkhorn":
        return u_stat_subsampled(a, b, cost, cfg.with_(loss="W_eps", sinkhorn=p)).value
    if solver == "sinkhorn":
        return sinkhorn(a, b, cost, p).value
    return solve_exact_assignment(a, b, cost, tie_break_cap=0)[0]


def run_benchmark(solvers: Sequence[str], n_list: Sequence[int], reps: int = 3,
                  cfg: Optional[MinibatchConfig] = None, p: Optional[SinkhornParams] = None,
                  cost: Optional[CostSpec] = None, dim: int = 2, seed: int = 20200217,
                  full_cap: int = 10000) -> pd.DataFrame:
    """Time every solver on uniform clouds of each size

    Full solvers above ``full_cap`` points are recorded as skipped.
    """
    for solver in solvers:
        if solver not in SOLVERS:
            raise ValueError(f"Unknown solver '{solver}', expected one of {SOLVERS}")
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    cfg = cfg or MinibatchConfig(m=100, k=10)
    p = p or SinkhornParams(epsilon=0.1, tol=1e-6, max_iters=1000)
    cost = cost or CostSpec("sq_euclidean")

    rows = []
    for n in sorted(n_list):
        rng = np.random.default_rng([seed, n])
        a = generate_cloud("uniform", n, dim, rng)
        b = generate_cloud("uniform", n, dim, rng)
        for solver in solvers:
            if solver in FULL_SOLVERS and n > full_cap:
                logger.info(f"Skipping {solver} at n={n} (above the cap of {full_cap})")
                rows.append({"solver": solver, "n": n, "rep": 0, "seconds": float("nan"),
                             "value": float("nan"), "skipped": True})
                continue
            if solver.startswith("minibatch") and cfg.m > n:
                raise ValueError(f"Batch size m={cfg.m} exceeds n={n}")
            for rep in range(reps):
                start = time.perf_counter()
                value = _run_solver(solver, a, b, cost, cfg.with_(seed=seed + rep), p)
                elapsed = time.perf_counter() - start
                rows.append({"solver": solver, "n": n, "rep": rep, "seconds": elapsed,
                             "value": float(value), "skipped": False})
            logger.info(f"{solver} n={n}: median {np.median([r['seconds'] for r in rows[-reps:]]):.4f}s")
    return pd.DataFrame(rows, columns=TIMING_COLUMNS)


def median_timings(frame: pd.DataFrame) -> pd.DataFrame:
    """Median seconds per (solver, n) over non-skipped repetitions"""
    done = frame[~frame["skipped"]]
    return done.groupby(["solver", "n"])["seconds"].median().reset_index()
