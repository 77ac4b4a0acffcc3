# cli/context.py - Shared run context and argument helpers for the subcommands
import argparse
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from cli.output import write_json, write_table
from mbot_core.config import AppConfig
from mbot_core.distributions import COST_KINDS, CostSpec, DiscreteDistribution
from mbot_core.minibatch import LOSSES, MinibatchConfig
from mbot_core.transfer import IMAGE_EXTENSIONS, load_image


@dataclass
class RunContext:
    """Per-invocation settings and bookkeeping shared by the subcommands"""

    config: AppConfig
    out_dir: str
    seed: int
    jobs: int
    fmt: str = "csv"
    strict: bool = False
    outputs: List[str] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)
    records: List[Any] = field(default_factory=list)

    def path(self, name: str) -> str:
        full = os.path.join(self.out_dir, name)
        os.makedirs(os.path.dirname(full) or ".", exist_ok=True)
        return full

    def add_output(self, path: str) -> str:
        self.outputs.append(os.path.relpath(path, self.out_dir))
        return path

    def write_json(self, value, name: str) -> str:
        path = self.path(name)
        write_json(value, path)
        return self.add_output(path)

    def write_table(self, frame, stem: str) -> str:
        return self.add_output(write_table(frame, self.path(stem), self.fmt))

    def note_nonconverged(self, count: int):
        self.extra["sinkhorn_nonconverged"] = self.extra.get("sinkhorn_nonconverged", 0) + int(count)


def read_cloud(path: str) -> DiscreteDistribution:
    """Headerless CSV of points, or an image read as an RGB cloud"""
    if os.path.splitext(path)[1].lower() in IMAGE_EXTENSIONS:
        return load_image(path).as_distribution()
    if not os.path.exists(path):
        raise ValueError(f"Input file {path} does not exist")
    return DiscreteDistribution.from_csv(path)


def int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected a comma-separated list of integers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("Expected at least one integer")
    return values


def add_cost_argument(parser: argparse.ArgumentParser):
    parser.add_argument("--cost", choices=COST_KINDS, default=None,
                        help="Ground cost (default: abs in 1D, sq_euclidean otherwise)")


def add_minibatch_arguments(parser: argparse.ArgumentParser, default_loss: Optional[str] = None):
    parser.add_argument("--loss", choices=LOSSES, default=default_loss, help="Batch loss h")
    parser.add_argument("--eps", type=float, default=None, help="Entropic regularisation")
    parser.add_argument("--m", type=int, default=None, help="Batch size")
    parser.add_argument("--k", type=int, default=None, help="Number of batch pairs")
    parser.add_argument("--pair-sampling", choices=["iid_with_replacement", "distinct_pairs"], default=None)


def resolve_cost(args, dim: int) -> CostSpec:
    kind = args.cost or ("abs" if dim == 1 else "sq_euclidean")
    return CostSpec(kind)


def minibatch_config(args, ctx: RunContext, **overrides) -> MinibatchConfig:
    sinkhorn = ctx.config.sinkhorn_params(epsilon=getattr(args, "eps", None))
    values = {
        "m": getattr(args, "m", None),
        "k": getattr(args, "k", None),
        "loss": getattr(args, "loss", None),
        "pair_sampling": getattr(args, "pair_sampling", None),
        "seed": ctx.seed,
        "jobs": ctx.jobs,
    }
    values.update(overrides)
    return ctx.config.minibatch_config(sinkhorn=sinkhorn, **values)
