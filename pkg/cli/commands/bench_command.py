# cli/commands/bench_command.py - Solver timings over a sweep of cloud sizes
import logging

from cli.context import RunContext, add_cost_argument, int_list
from mbot_core.benchmark import SOLVERS, median_timings, run_benchmark
from mbot_core.bounds import loglog_slope
from mbot_core.distributions import CostSpec

logger = logging.getLogger(__name__)

NAME = "bench"


def _solver_list(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def register(subparsers):
    parser = subparsers.add_parser(NAME, help="Time minibatch and full OT solvers")
    parser.add_argument("--solvers", type=_solver_list, default=list(SOLVERS),
                        help=f"Comma-separated subset of {','.join(SOLVERS)}")
    parser.add_argument("--n", type=int_list, default=[1000, 2000, 4000])
    parser.add_argument("--reps", type=int, default=3)
    parser.add_argument("--m", type=int, default=100)
    parser.add_argument("--k", type=int, default=10)
    parser.add_argument("--eps", type=float, default=None)
    parser.add_argument("--dim", type=int, default=2)
    parser.add_argument("--full-cap", type=int, default=10000, help="Skip full solvers above this many points")
    add_cost_argument(parser)
    parser.set_defaults(func=run)


def run(args, ctx: RunContext) -> dict:
    p = ctx.config.sinkhorn_params(epsilon=args.eps, tol=1e-6, max_iters=1000)
    cfg = ctx.config.minibatch_config(m=args.m, k=args.k, seed=ctx.seed, jobs=ctx.jobs, sinkhorn=p)
    cost = CostSpec(args.cost or ("abs" if args.dim == 1 else "sq_euclidean"))
    timings = run_benchmark(args.solvers, args.n, reps=args.reps, cfg=cfg, p=p, cost=cost,
                            dim=args.dim, seed=ctx.seed, full_cap=args.full_cap)
    ctx.write_table(timings, "timings")

    medians = median_timings(timings)
    slopes = {}
    for solver, group in medians.groupby("solver"):
        if len(group) >= 2 and (group["seconds"] > 0).all():
            slopes[solver] = loglog_slope(group["n"], group["seconds"])
    return {
        "solvers": list(args.solvers),
        "n": sorted(args.n),
        "reps": args.reps,
        "median_seconds": medians.to_dict(orient="records"),
        "loglog_slopes": slopes,
    }
