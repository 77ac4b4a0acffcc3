# cli/commands/rate_command.py - Deviation and marginal-error sweeps
import itertools
import logging

import numpy as np
import pandas as pd

from cli.context import RunContext, add_cost_argument, int_list, read_cloud, resolve_cost
from mbot_core.bounds import (
    RECORD_COLUMNS,
    DeviationSettings,
    coverage_by_point,
    loglog_slope,
    run_deviation_experiment,
    run_marginal_experiment,
    write_records_csv,
)
from mbot_core.distributions import GENERATORS, GeneratorSpec
from mbot_core.minibatch import LOSSES

logger = logging.getLogger(__name__)

NAME = "rate"
REFERENCE_COLUMNS = ["n", "m", "k", "rep", "reference_feasible", "reference_kind"]


def register(subparsers):
    parser = subparsers.add_parser(NAME, help="Empirical convergence rates against the bounds")
    parser.add_argument("--experiment", choices=["deviation", "marginal"], default="deviation")
    parser.add_argument("--source-gen", choices=sorted(GENERATORS), default="uniform")
    parser.add_argument("--target-gen", choices=sorted(GENERATORS), default="uniform")
    parser.add_argument("--dim", type=int, default=1)
    parser.add_argument("--n", type=int_list, default=[20], help="Comma-separated cloud sizes")
    parser.add_argument("--m", type=int_list, default=[5], help="Comma-separated batch sizes")
    parser.add_argument("--k", type=int_list, default=[10, 100, 1000], help="Comma-separated draw counts")
    parser.add_argument("--reps", type=int, default=None)
    parser.add_argument("--delta", type=float, default=None)
    parser.add_argument("--loss", choices=LOSSES, default="W")
    parser.add_argument("--eps", type=float, default=None)
    parser.add_argument("--k-ref-min", type=int, default=None)
    parser.add_argument("--k-ref-factor", type=int, default=None)
    parser.add_argument("--max-reference-draws", type=int, default=None,
                        help="Mark surrogate references needing more draws as infeasible")
    parser.add_argument("--source", default=None, help="Source cloud for the marginal experiment")
    parser.add_argument("--target", default=None, help="Target cloud for the marginal experiment")
    add_cost_argument(parser)
    parser.set_defaults(func=run)


def run(args, ctx: RunContext) -> dict:
    config = ctx.config
    reps = args.reps if args.reps is not None else config.get_int("BOUNDS", "reps")
    delta = args.delta if args.delta is not None else config.get_float("BOUNDS", "delta")
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    if args.experiment == "marginal":
        return _marginal(args, ctx, reps, delta)
    return _deviation(args, ctx, reps, delta)


def _deviation(args, ctx: RunContext, reps: int, delta: float) -> dict:
    config = ctx.config
    spec = GeneratorSpec(args.source_gen, args.target_gen, args.dim)
    settings = DeviationSettings(
        cost=resolve_cost(args, args.dim),
        loss=args.loss,
        sinkhorn=config.sinkhorn_params(epsilon=args.eps),
        k_ref_min=args.k_ref_min if args.k_ref_min is not None else config.get_int("BOUNDS", "k_ref_min"),
        k_ref_factor=(args.k_ref_factor if args.k_ref_factor is not None
                      else config.get_int("BOUNDS", "k_ref_factor")),
        enumeration_cap=config.get_int("MINIBATCH", "enumeration_cap"),
        max_reference_draws=args.max_reference_draws,
        block_size=config.get_int("MINIBATCH", "block_size"),
        jobs=ctx.jobs,
    )
    grid = list(itertools.product(args.n, args.m, args.k))
    records = run_deviation_experiment(spec, grid, delta=delta, reps=reps, seed=ctx.seed, settings=settings)
    ctx.records.extend(records)

    frame = pd.DataFrame([r.to_row() for r in records])
    if ctx.fmt == "csv":
        write_records_csv(records, ctx.path("records.csv"))
        ctx.add_output(ctx.path("records.csv"))
    else:
        ctx.write_table(frame[RECORD_COLUMNS], "records")
    ctx.write_table(frame[REFERENCE_COLUMNS], "references")
    summary = coverage_by_point(records)
    ctx.write_table(summary, "summary")

    slopes = {}
    for (n, m), group in summary.groupby(["n", "m"]):
        group = group[group["mean_abs_error"] > 0]
        if len(group) >= 2:
            slopes[f"n={n},m={m}"] = loglog_slope(group["k"], group["mean_abs_error"])
    ctx.write_json({"experiment": "deviation", "x": "k", "y": "mean_abs_error", "slopes": slopes},
                   "slopes.json")

    feasible = [r for r in records if r.reference_feasible]
    coverage = float(np.mean([r.within_bound for r in feasible])) if feasible else float("nan")
    ctx.extra["coverage"] = coverage
    ctx.extra["infeasible_references"] = len(records) - len(feasible)
    return {
        "experiment": "deviation",
        "records": len(records),
        "delta": delta,
        "coverage": coverage,
        "slopes": slopes,
    }


def _marginal(args, ctx: RunContext, reps: int, delta: float) -> dict:
    if args.source and args.target:
        a = read_cloud(args.source)
        b = read_cloud(args.target)
    else:
        n = max(args.n)
        rng = np.random.default_rng([ctx.seed, n])
        a, b = GeneratorSpec(args.source_gen, args.target_gen, args.dim).draw(n, rng)
    cost = resolve_cost(args, a.dim)
    result = run_marginal_experiment(a, b, cost, args.m, args.k, reps, ctx.seed, delta=delta,
                                     jobs=ctx.jobs, block_size=ctx.config.get_int("MINIBATCH", "block_size"))
    ctx.write_table(result.rows, "records")
    ctx.write_table(result.summary, "summary")
    slopes = {f"m={m}": slope for m, slope in result.slopes.items()}
    ctx.write_json({"experiment": "marginal", "x": "k", "y": "mean_l1", "slopes": slopes}, "slopes.json")
    coverage = float(result.rows["rows_within_bound"].mean())
    ctx.extra["coverage"] = coverage
    return {
        "experiment": "marginal",
        "n": a.n,
        "records": len(result.rows),
        "delta": delta,
        "coverage": coverage,
        "slopes": slopes,
    }
