# cli/commands/flow_command.py - Minibatch gradient flow between two clouds
import logging
import os

import numpy as np

from cli.context import RunContext, add_cost_argument, read_cloud, resolve_cost
from mbot_core.distributions import GENERATORS, GeneratorSpec
from mbot_core.gradients import SMOOTH_LOSSES, FlowDivergenceError, gradient_flow, write_trajectory

logger = logging.getLogger(__name__)

NAME = "flow"
TRAJECTORY_DIR = "trajectory"


def register(subparsers):
    parser = subparsers.add_parser(NAME, help="Move a source cloud along the minibatch gradient flow")
    parser.add_argument("--source", default=None, help="Moving cloud (headerless CSV)")
    parser.add_argument("--target", default=None, help="Fixed target cloud (headerless CSV)")
    parser.add_argument("--source-gen", choices=sorted(GENERATORS), default="disc")
    parser.add_argument("--target-gen", choices=sorted(GENERATORS), default="curved_tail")
    parser.add_argument("--n", type=int, default=1000, help="Points per generated cloud")
    parser.add_argument("--loss", choices=SMOOTH_LOSSES, default="S_eps")
    parser.add_argument("--eps", type=float, default=None)
    parser.add_argument("--m", type=int, default=None)
    parser.add_argument("--k", type=int, default=None)
    parser.add_argument("--step-size", type=float, default=None)
    parser.add_argument("--iters", type=int, default=None)
    parser.add_argument("--record-every", type=int, default=None)
    parser.add_argument("--max-loss-ratio", type=float, default=None)
    parser.add_argument("--no-scale", action="store_true", help="Do not multiply the step by m")
    add_cost_argument(parser)
    parser.set_defaults(func=run)


def run(args, ctx: RunContext) -> dict:
    if bool(args.source) != bool(args.target):
        raise ValueError("--source and --target must be given together")
    if args.source:
        b0 = read_cloud(args.source)
        a = read_cloud(args.target)
    else:
        rng = np.random.default_rng([ctx.seed, args.n])
        b0, a = GeneratorSpec(args.source_gen, args.target_gen, 2).draw(args.n, rng)
    cost = resolve_cost(args, a.dim)

    sinkhorn = ctx.config.sinkhorn_params(epsilon=args.eps)
    cfg = ctx.config.minibatch_config(
        sinkhorn=sinkhorn, loss=args.loss, m=args.m, k=args.k if args.k is not None else 10,
        seed=ctx.seed, jobs=ctx.jobs,
    )
    fc = ctx.config.flow_config(
        cfg=cfg, step_size=args.step_size, iters=args.iters, record_every=args.record_every,
        max_loss_ratio=args.max_loss_ratio, scale_by_batch_size=False if args.no_scale else None,
    )

    out_dir = os.path.join(ctx.out_dir, TRAJECTORY_DIR)
    try:
        traj = gradient_flow(b0, a, cost, fc)
    except FlowDivergenceError as e:
        for path in write_trajectory(e.trajectory, out_dir):
            ctx.add_output(path)
        ctx.extra["diverged_at"] = len(e.trajectory.loss_trace) - 1
        raise

    for path in write_trajectory(traj, out_dir):
        ctx.add_output(path)
    ctx.extra["stale_steps"] = traj.stale_steps
    ctx.extra["descent_fraction"] = traj.descent_fraction()
    return {
        "n_source": b0.n,
        "n_target": a.n,
        "loss": cfg.loss,
        "m": cfg.m,
        "k": cfg.k,
        "step_size": fc.step_size,
        "iters": fc.iters,
        "initial_loss": traj.loss_trace[0],
        "final_loss": traj.loss_trace[-1],
        "snapshots": traj.steps,
        "stale_steps": traj.stale_steps,
        "descent_fraction": traj.descent_fraction(),
    }
