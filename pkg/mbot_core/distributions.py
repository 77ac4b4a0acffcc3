# mbot_core/distributions.py - Point clouds, ground costs and synthetic generators
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

COST_KINDS = ("abs", "euclidean", "sq_euclidean")


@dataclass(frozen=True)
class DiscreteDistribution:
    """Uniform empirical distribution over n points in R^d"""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2:
            raise ValueError(f"Points must be an (n, d) array, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("A distribution needs at least one support point")
        if pts.shape[1] < 1:
            raise ValueError("Support points must have dimension d >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("Support points must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    def subset(self, indices) -> "DiscreteDistribution":
        """Restrict the distribution to the given support indices"""
        return DiscreteDistribution(self.points[np.asarray(indices)])

    @classmethod
    def from_csv(cls, path) -> "DiscreteDistribution":
        """Read a headerless CSV, one point per row"""
        try:
            frame = pd.read_csv(path, header=None, float_precision="round_trip")
        except pd.errors.EmptyDataError:
            raise ValueError(f"Point cloud file {path} is empty")
        try:
            values = frame.to_numpy(dtype=np.float64)
        except ValueError as e:
            raise ValueError(f"Point cloud file {path} contains non-numeric values: {e}")
        return cls(values)

    def to_csv(self, path):
        """Write the support as a headerless CSV"""
        pd.DataFrame(self.points).to_csv(path, header=False, index=False, float_format="%.17g")


@dataclass(frozen=True)
class CostSpec:
    """Ground cost c(x, y) with its gradient in the second argument"""

    kind: str = "sq_euclidean"
    bound: Optional[float] = None

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"Unsupported cost kind '{self.kind}', expected one of {COST_KINDS}")
        if self.bound is not None and self.bound < 0:
            raise ValueError(f"Cost bound must be nonnegative, got {self.bound}")

    def _check_dims(self, x: np.ndarray, y: np.ndarray):
        if x.shape[-1] != y.shape[-1]:
            raise ValueError(f"Dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
        if self.kind == "abs" and x.shape[-1] != 1:
            raise ValueError(f"The abs cost is only defined in 1D, got d={x.shape[-1]}")

    def matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Cost matrix C_ij = c(x_i, y_j)"""
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        self._check_dims(x, y)
        if self.kind == "abs":
            return np.abs(x[:, 0][:, None] - y[:, 0][None, :])
        if self.kind == "euclidean":
            return cdist(x, y, "euclidean")
        return cdist(x, y, "sqeuclidean")

    def stacked(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Cost matrices for a stack of batches, shape (k, m, m)"""
        return np.stack([self.matrix(x, y) for x, y in zip(xs, ys)])

    def pairwise(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Row-aligned costs c(x_r, y_r) over the last axis"""
        self._check_dims(x, y)
        diff = x - y
        if self.kind == "abs":
            return np.abs(diff[..., 0])
        sq = np.einsum("...d,...d->...", diff, diff)
        if self.kind == "euclidean":
            return np.sqrt(sq)
        return sq

    def gradient_y(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Tensor G[..., i, j, :] = grad of c(x_i, y_j) with respect to y_j"""
        self._check_dims(x, y)
        diff = y[..., None, :, :] - x[..., :, None, :]
        if self.kind == "sq_euclidean":
            return 2.0 * diff
        if self.kind == "abs":
            return np.sign(diff)
        norms = np.sqrt(np.einsum("...d,...d->...", diff, diff))[..., None]
        # coincident points contribute a zero subgradient
        safe = np.where(norms > 0.0, norms, 1.0)
        return np.where(norms > 0.0, diff / safe, 0.0)

    def bound_from_diameter(self, diam: float) -> float:
        """Uniform bound on the cost over a support of the given diameter"""
        if self.kind == "sq_euclidean":
            return diam ** 2
        return diam


def cost_matrix(x: np.ndarray, y: np.ndarray, cost: CostSpec) -> np.ndarray:
    return cost.matrix(x, y)


def cost_gradient(x: np.ndarray, y: np.ndarray, cost: CostSpec) -> np.ndarray:
    return cost.gradient_y(np.atleast_2d(x), np.atleast_2d(y))


def support_diameter(a: DiscreteDistribution, b: DiscreteDistribution,
                     exact_limit: int = 2000) -> float:
    """Diameter of the union of two supports

    Exact pairwise maximum up to ``exact_limit`` points, bounding-box
    diagonal above it (never smaller than the exact value).
    """
    union = np.vstack([a.points, b.points])
    if union.shape[0] <= exact_limit:
        if union.shape[0] == 1:
            return 0.0
        return float(cdist(union, union).max())
    extent = union.max(axis=0) - union.min(axis=0)
    return float(np.sqrt(np.sum(extent ** 2)))


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return rng.random((n, d))


def _gaussian(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return np.clip(0.5 + 0.15 * rng.standard_normal((n, d)), 0.0, 1.0)


def _gaussian_clusters(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    centers = np.array([[0.2] * d, [0.8] * d, [0.2] + [0.8] * (d - 1)])[:, :d]
    labels = np.sort(rng.integers(0, len(centers), size=n))
    pts = centers[labels] + 0.05 * rng.standard_normal((n, d))
    return np.clip(pts, 0.0, 1.0)


def _disc(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    if d != 2:
        raise ValueError("The disc generator is two-dimensional")
    radius = 0.2 * np.sqrt(rng.random(n))
    angle = 2.0 * np.pi * rng.random(n)
    return np.column_stack([0.3 + radius * np.cos(angle), 0.3 + radius * np.sin(angle)])


def _curved_tail(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    if d != 2:
        raise ValueError("The curved_tail generator is two-dimensional")
    n_tail = n // 5
    n_body = n - n_tail
    # body: annulus sector with two empty slots
    pts = []
    while len(pts) < n_body:
        r = 0.1 + 0.1 * rng.random()
        theta = 2.0 * np.pi * rng.random()
        if (theta % (np.pi / 2)) < 0.25:
            continue
        pts.append((0.65 + r * np.cos(theta), 0.65 + r * np.sin(theta)))
    t = rng.random(n_tail)
    tail = np.column_stack([
        0.65 + 0.3 * np.cos(np.pi * (0.5 + 0.8 * t)) + 0.01 * rng.standard_normal(n_tail),
        0.35 + 0.3 * np.sin(np.pi * (0.5 + 0.8 * t)) * t + 0.01 * rng.standard_normal(n_tail),
    ])
    return np.clip(np.vstack([np.asarray(pts), tail]), 0.0, 1.0)


GENERATORS: Dict[str, Callable[[np.random.Generator, int, int], np.ndarray]] = {
    "uniform": _uniform,
    "gaussian": _gaussian,
    "gaussian_clusters": _gaussian_clusters,
    "disc": _disc,
    "curved_tail": _curved_tail,
}


def generate_cloud(kind: str, n: int, dim: int, rng: np.random.Generator) -> DiscreteDistribution:
    """Draw n points from a named synthetic distribution on [0, 1]^d"""
    if kind not in GENERATORS:
        raise ValueError(f"Unknown generator '{kind}', expected one of {sorted(GENERATORS)}")
    return DiscreteDistribution(GENERATORS[kind](rng, n, dim))


@dataclass(frozen=True)
class GeneratorSpec:
    """Synthetic source/target pair clamped to the unit box"""

    source: str = "uniform"
    target: str = "uniform"
    dim: int = 1
    options: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for kind in (self.source, self.target):
            if kind not in GENERATORS:
                raise ValueError(f"Unknown generator '{kind}'")
        if self.dim < 1:
            raise ValueError(f"Generator dimension must be >= 1, got {self.dim}")

    @property
    def diameter(self) -> float:
        """Known diameter of the clamp box"""
        return float(np.sqrt(self.dim))

    def draw(self, n: int, rng: np.random.Generator) -> Tuple[DiscreteDistribution, DiscreteDistribution]:
        return (generate_cloud(self.source, n, self.dim, rng),
                generate_cloud(self.target, n, self.dim, rng))
