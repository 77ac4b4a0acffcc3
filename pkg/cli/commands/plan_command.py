# cli/commands/plan_command.py - Averaged minibatch plans and their marginal report
import logging

import numpy as np
import pandas as pd

from cli.context import (
    RunContext,
    add_cost_argument,
    add_minibatch_arguments,
    minibatch_config,
    read_cloud,
    resolve_cost,
)
from mbot_core.bounds import marginal_bound
from mbot_core.minibatch import (
    SparsePlan,
    closed_form_1d,
    plan_averaged_exact,
    plan_entropic,
    plan_quadratic,
    plan_subsampled,
    validate_plan,
)
from mbot_core.plan_io import write_plan_binary, write_plan_csv

logger = logging.getLogger(__name__)

NAME = "plan"
FIGURE_FAMILY_N = 20
FIGURE_FAMILY_M = (1, 5, 10, 15)


def register(subparsers):
    parser = subparsers.add_parser(NAME, help="Build an averaged minibatch transport plan")
    mode = parser.add_mutually_exclusive_group(required=True)
    mode.add_argument("--enumerate", action="store_true", help="Average over every pair of m-subsets")
    mode.add_argument("--subsample", action="store_true", help="Average over k sampled batch pairs")
    mode.add_argument("--closed-form-1d", action="store_true", help="Rank-indexed 1D closed form")
    mode.add_argument("--entropic", action="store_true", help="Full Sinkhorn plan between the clouds")
    mode.add_argument("--quadratic", action="store_true", help="Full quadratically regularised plan")
    mode.add_argument("--figure-family", action="store_true",
                      help=f"Closed forms for n={FIGURE_FAMILY_N}, m in {FIGURE_FAMILY_M}")
    parser.add_argument("source", nargs="?", help="Source cloud (not needed for closed forms)")
    parser.add_argument("target", nargs="?", help="Target cloud (not needed for closed forms)")
    parser.add_argument("--n", type=int, default=None, help="Cloud size for --closed-form-1d")
    parser.add_argument("--gamma", type=float, default=None, help="Quadratic regularisation for --quadratic")
    add_minibatch_arguments(parser)
    add_cost_argument(parser)
    parser.add_argument("--delta", type=float, default=None, help="Confidence level of the marginal bound")
    parser.add_argument("--binary", action="store_true", help="Also write the dense binary layout")
    parser.set_defaults(func=run)


def _write_dense(ctx: RunContext, matrix: np.ndarray, stem: str, binary: bool, subsampled: bool = False):
    path = ctx.path(f"{stem}.csv")
    pd.DataFrame(matrix).to_csv(path, header=False, index=False, float_format="%.17g")
    ctx.add_output(path)
    if binary:
        bin_path = ctx.path(f"{stem}.bin")
        write_plan_binary(matrix, bin_path, subsampled)
        ctx.add_output(bin_path)


def _closed_forms(args, ctx: RunContext) -> dict:
    if args.figure_family:
        sizes = [(FIGURE_FAMILY_N, m) for m in FIGURE_FAMILY_M]
    else:
        if args.n is None or args.m is None:
            raise ValueError("--closed-form-1d needs both --n and --m")
        sizes = [(args.n, args.m)]
    reports = []
    for n, m in sizes:
        matrix = closed_form_1d(n, m)
        _write_dense(ctx, matrix, f"closed_form_n{n}_m{m}", args.binary)
        report = validate_plan(matrix)
        report.update({"n": n, "m": m})
        reports.append(report)
    return {"mode": "figure_family" if args.figure_family else "closed_form_1d", "plans": reports}


def run(args, ctx: RunContext) -> dict:
    if args.closed_form_1d or args.figure_family:
        return _closed_forms(args, ctx)

    if not args.source or not args.target:
        raise ValueError("This plan mode needs source and target clouds")
    a = read_cloud(args.source)
    b = read_cloud(args.target)
    cost = resolve_cost(args, a.dim)
    delta = args.delta if args.delta is not None else ctx.config.get_float("BOUNDS", "delta")

    if args.entropic:
        p = ctx.config.sinkhorn_params(epsilon=args.eps)
        plan = plan_entropic(a, b, cost, p)
        _write_dense(ctx, plan.matrix, "plan", args.binary)
        report = validate_plan(plan, tol=max(p.tol, 1e-9) * 10)
        report.update({"mode": "entropic", "n": a.n, "epsilon": p.epsilon, "value": plan.value})
        return report

    if args.quadratic:
        q = ctx.config.quadratic_params(gamma=args.gamma)
        plan = plan_quadratic(a, b, cost, q)
        _write_dense(ctx, plan.matrix, "plan", args.binary)
        report = validate_plan(plan, tol=q.tol * 10)
        report.update({"mode": "quadratic", "n": a.n, "gamma": q.gamma, "value": plan.value,
                       "zeros": int((plan.matrix == 0).sum())})
        return report

    cfg = minibatch_config(args, ctx)
    if args.enumerate:
        sparse_plan = plan_averaged_exact(a, b, cost, cfg)
    else:
        sparse_plan = plan_subsampled(a, b, cost, cfg)

    write_plan_csv(sparse_plan, ctx.path("plan.csv"))
    ctx.add_output(ctx.path("plan.csv"))
    if args.binary:
        if a.n != b.n:
            raise ValueError("The binary plan layout needs equal-size clouds")
        matrix = sparse_plan.to_dense(ctx.config.get_int("MINIBATCH", "dense_cap"))
        bin_path = ctx.path("plan.bin")
        write_plan_binary(matrix, bin_path, subsampled=sparse_plan.subsampled)
        ctx.add_output(bin_path)

    return _marginal_report(sparse_plan, cfg, delta, a, b, cost)


def _marginal_report(plan: SparsePlan, cfg, delta: float, a, b, cost) -> dict:
    report = validate_plan(plan, require_marginals=not plan.subsampled)
    row_l1, col_l1 = plan.marginal_l1_error()
    report.update({
        "mode": "subsample" if plan.subsampled else "enumerate",
        "n_source": plan.n_source,
        "n_target": plan.n_target,
        "m": cfg.m,
        "loss": cfg.loss,
        "row_l1_error": row_l1,
        "col_l1_error": col_l1,
        "inner_cost": plan.inner_cost(a.points, b.points, cost),
        "nonzeros": int(plan.matrix.nnz),
    })
    if plan.subsampled:
        bound = marginal_bound(cfg.k, delta)
        row_dev = np.abs(plan.row_sums() - 1.0 / plan.n_source)
        report.update({
            "k": cfg.k,
            "delta": delta,
            "marginal_bound": bound,
            "rows_within_bound": float(np.mean(row_dev <= bound)),
        })
    return report
