# cli/app.py - Argument parsing and dispatch
import argparse
import logging
import time
from typing import Callable, List, Optional

from cli.commands import COMMANDS
from cli.context import RunContext
from cli.manifest import RunManifest
from cli.output import dumps, status
from mbot_core.config import load_configuration
from mbot_core.gradients import FlowDivergenceError
from mbot_core.models import get_database_manager

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minibatch-ot",
        description="Minibatch optimal transport: estimators, plans, bounds, flows and color transfer",
    )
    parser.add_argument("--config", default=None, help="INI configuration file (default config/app_config.ini)")
    parser.add_argument("--seed", type=int, default=None, help="Base seed (default from configuration)")
    parser.add_argument("--jobs", type=int, default=None, help="Worker threads, 0 = hardware parallelism")
    parser.add_argument("--out-dir", default=None, help="Directory for data outputs and manifest.json")
    parser.add_argument("--format", dest="fmt", choices=["csv", "json"], default="csv",
                        help="Layout of tabular outputs")
    parser.add_argument("--db", default=None, help="SQLAlchemy URL of the run registry")
    parser.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--strict", action="store_true", help="Treat Sinkhorn non-convergence as a failure")

    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def run(argv: List[str], setup_logging: Optional[Callable[[str, str], None]] = None) -> int:
    """Parse ``argv``, run one subcommand and return the process exit status"""
    args = build_parser().parse_args(argv)
    config = load_configuration(args.config)

    if setup_logging is not None:
        setup_logging(args.log_level or config.get("RUNTIME", "log_level", "INFO"),
                      config.get("RUNTIME", "log_file", "minibatch_ot.log"))

    seed = args.seed if args.seed is not None else config.get_int("MINIBATCH", "seed")
    jobs = args.jobs if args.jobs is not None else config.get_int("RUNTIME", "jobs")
    out_dir = args.out_dir or config.get("RUNTIME", "out_dir", "results")
    ctx = RunContext(config=config, out_dir=out_dir, seed=seed, jobs=jobs, fmt=args.fmt, strict=args.strict)
    manifest = RunManifest(subcommand=args.subcommand, argv=list(argv), seed=seed)
    logger.info(f"Starting {args.subcommand} (seed={seed}, jobs={jobs}, out_dir={out_dir})")

    started = time.perf_counter()
    exit_status = 0
    try:
        result = args.func(args, ctx)
        if result is not None:
            ctx.write_json(result, "result.json")
            print(dumps(result))
        nonconverged = ctx.extra.get("sinkhorn_nonconverged", 0)
        if ctx.strict and nonconverged:
            exit_status = 1
            status(f"{nonconverged} Sinkhorn solves did not converge", "error")
        else:
            if nonconverged:
                status(f"{nonconverged} Sinkhorn solves did not converge", "warning")
            status(f"{args.subcommand} finished, outputs in {out_dir}", "success")
    except FlowDivergenceError as e:
        exit_status = 1
        logger.error(f"Gradient flow aborted: {e}")
        status(f"Gradient flow aborted: {e}", "error")
    except (ValueError, OSError, RuntimeError) as e:
        exit_status = 1
        logger.error(f"{args.subcommand} failed: {e}")
        status(f"{args.subcommand} failed: {e}", "error")
    finally:
        manifest.wall_clock_seconds = time.perf_counter() - started
        manifest.outputs = list(ctx.outputs)
        manifest.exit_status = exit_status
        manifest.extra = ctx.extra
        manifest.write(out_dir)
        _record(manifest, ctx, args.db or config.get_database_url())

    logger.info(f"{args.subcommand} exited with status {exit_status}")
    return exit_status


def _record(manifest: RunManifest, ctx: RunContext, url: Optional[str]):
    if not url:
        return
    db = None
    try:
        db = get_database_manager(url)
        run_id = db.record_run(manifest)
        if ctx.records:
            db.record_experiments(run_id, ctx.records)
    except Exception as e:
        logger.warning(f"Run registry unavailable: {e}")
        status(f"Run registry unavailable: {e}", "warning")
    finally:
        if db is not None:
            db.close()
