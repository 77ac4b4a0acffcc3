# cli/commands/eval_command.py - Evaluate W / W_eps / S_eps, full or minibatch
import logging

from cli.context import (
    RunContext,
    add_cost_argument,
    add_minibatch_arguments,
    minibatch_config,
    read_cloud,
    resolve_cost,
)
from mbot_core.minibatch import batch_loss, u_stat_exact, u_stat_subsampled

logger = logging.getLogger(__name__)

NAME = "eval"


def register(subparsers):
    parser = subparsers.add_parser(
        NAME, help="Evaluate an OT loss between two clouds (full clouds unless --m is given)")
    parser.add_argument("source", help="Source cloud (headerless CSV, or PNG/PPM image)")
    parser.add_argument("target", help="Target cloud (headerless CSV, or PNG/PPM image)")
    add_minibatch_arguments(parser, default_loss="W")
    add_cost_argument(parser)
    parser.add_argument("--exact", action="store_true",
                        help="With --m, enumerate every batch pair instead of sampling k of them")
    parser.set_defaults(func=run)


def run(args, ctx: RunContext) -> dict:
    a = read_cloud(args.source)
    b = read_cloud(args.target)
    if a.dim != b.dim:
        raise ValueError(f"Dimension mismatch: source d={a.dim}, target d={b.dim}")
    cost = resolve_cost(args, a.dim)

    if args.m is None:
        if a.n != b.n:
            raise ValueError(f"Size mismatch: source has {a.n} points, target has {b.n}")
        cfg = minibatch_config(args, ctx, m=a.n, k=1)
        value, plan = batch_loss(a.points, b.points, cost, cfg)
        stats = {"pairs": 1, "marginal_residual": plan.marginal_residual()}
        m, k = a.n, None
    elif args.exact:
        cfg = minibatch_config(args, ctx)
        value = u_stat_exact(a, b, cost, cfg)
        stats = {"enumerated": True}
        m, k = cfg.m, None
    else:
        cfg = minibatch_config(args, ctx)
        estimate = u_stat_subsampled(a, b, cost, cfg)
        value = estimate.value
        stats = estimate.solver_stats()
        ctx.note_nonconverged(estimate.nonconverged)
        m, k = cfg.m, cfg.k

    logger.info(f"{cfg.loss} between {args.source} and {args.target}: {value:.12g}")
    return {
        "value": float(value),
        "loss": cfg.loss,
        "cost": cost.kind,
        "n": a.n,
        "m": m,
        "k": k,
        "seed": ctx.seed,
        "solver_stats": stats,
    }
