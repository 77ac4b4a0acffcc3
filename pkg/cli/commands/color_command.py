# cli/commands/color_command.py - Minibatch color transfer between two images
import logging

from cli.context import RunContext, add_cost_argument
from mbot_core.distributions import CostSpec
from mbot_core.minibatch import LOSSES
from mbot_core.transfer import NORMALIZATIONS, incremental_transfer, load_image, save_image

logger = logging.getLogger(__name__)

NAME = "color"


def register(subparsers):
    parser = subparsers.add_parser(NAME, help="Transfer colors between two images in both directions")
    parser.add_argument("image1", help="First image (PNG or binary PPM)")
    parser.add_argument("image2", help="Second image (PNG or binary PPM)")
    parser.add_argument("--m", type=int, default=None)
    parser.add_argument("--k", type=int, default=None)
    parser.add_argument("--loss", choices=LOSSES, default="W")
    parser.add_argument("--eps", type=float, default=None)
    parser.add_argument("--normalization", choices=NORMALIZATIONS, default=None)
    parser.add_argument("--output-ext", choices=[".png", ".ppm"], default=".png")
    parser.add_argument("--mass-csv", action="store_true", help="Also write per-pixel coupling mass")
    add_cost_argument(parser)
    parser.set_defaults(func=run)


def run(args, ctx: RunContext) -> dict:
    config = ctx.config
    src = load_image(args.image1)
    tgt = load_image(args.image2)
    cost = CostSpec(args.cost or "sq_euclidean")
    normalization = args.normalization or config.get("TRANSFER", "normalization")
    cfg = config.minibatch_config(
        sinkhorn=config.sinkhorn_params(epsilon=args.eps),
        m=args.m if args.m is not None else config.get_int("TRANSFER", "m"),
        k=args.k if args.k is not None else config.get_int("TRANSFER", "k"),
        loss=args.loss, seed=ctx.seed, jobs=ctx.jobs,
    )

    result = incremental_transfer(src, tgt, cost, cfg, normalization)
    forward = ctx.path(f"image1_to_image2{args.output_ext}")
    backward = ctx.path(f"image2_to_image1{args.output_ext}")
    save_image(result.source_mapped, forward)
    save_image(result.target_mapped, backward)
    ctx.add_output(forward)
    ctx.add_output(backward)
    if args.mass_csv:
        for side in ("source", "target"):
            path = ctx.path(f"mass_{side}.csv")
            result.write_mass_csv(path, side)
            ctx.add_output(path)

    ctx.extra["coverage"] = result.coverage
    return {
        "source_pixels": src.n,
        "target_pixels": tgt.n,
        "m": cfg.m,
        "k": cfg.k,
        "loss": cfg.loss,
        "normalization": normalization,
        "coverage": result.coverage,
    }
