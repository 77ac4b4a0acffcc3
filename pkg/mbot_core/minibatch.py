# mbot_core/minibatch.py - Minibatch estimators, batch sampling and averaged plans
import itertools
import logging
from dataclasses import dataclass, field, replace
from math import comb
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.special import gammaln, logsumexp

from mbot_core.core_ot import (
    QuadraticParams,
    SinkhornParams,
    TransportPlan,
    assignment_from_cost,
    quadratic_regularized,
    sinkhorn,
    sinkhorn_batched,
    solve_exact_1d,
    solve_exact_assignment,
)
from mbot_core.distributions import CostSpec, DiscreteDistribution
from mbot_core.parallel import ordered_map

logger = logging.getLogger(__name__)

LOSSES = ("W", "W_eps", "S_eps")
PAIR_SAMPLING = ("iid_with_replacement", "distinct_pairs")
KEYED_SAMPLING_LIMIT = 4096
EXACT_CLOSED_FORM_LIMIT = 64
SEMIDISCRETE_STREAM = 7919
DISTINCT_STREAM = 7927


class EnumerationCapError(ValueError):
    """Exact enumeration would exceed the configured number of batch pairs"""


@dataclass(frozen=True)
class MinibatchConfig:
    m: int = 10
    k: int = 100
    seed: int = 20200217
    loss: str = "W"
    sinkhorn: SinkhornParams = field(default_factory=SinkhornParams)
    pair_sampling: str = "iid_with_replacement"
    enumeration_cap: int = 1_000_000
    tie_break_cap: int = 8
    dense_cap: int = 4_000_000
    block_size: int = 256
    jobs: int = 1
    stream: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"Batch size m must be >= 1, got {self.m}")
        if self.k < 1:
            raise ValueError(f"Number of batch pairs k must be >= 1, got {self.k}")
        if self.seed < 0:
            raise ValueError(f"Seed must be nonnegative, got {self.seed}")
        if self.loss not in LOSSES:
            raise ValueError(f"Unknown loss '{self.loss}', expected one of {LOSSES}")
        if self.pair_sampling not in PAIR_SAMPLING:
            raise ValueError(f"Unknown pair sampling '{self.pair_sampling}', expected one of {PAIR_SAMPLING}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")

    def validate(self, n_source: int, n_target: Optional[int] = None):
        n_target = n_source if n_target is None else n_target
        if self.m > min(n_source, n_target):
            raise ValueError(f"Batch size m={self.m} exceeds cloud size n={min(n_source, n_target)}")

    def with_(self, **changes) -> "MinibatchConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class BatchPair:
    A: np.ndarray
    B: np.ndarray


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def draw_subsets(rng: np.random.Generator, n: int, m: int, count: int) -> np.ndarray:
    """``count`` uniform m-subsets of range(n), each sorted"""
    if m == n:
        return np.tile(np.arange(n, dtype=np.int64), (count, 1))
    if n <= KEYED_SAMPLING_LIMIT:
        keys = rng.random((count, n))
        picks = np.argpartition(keys, m - 1, axis=1)[:, :m]
    else:
        picks = np.stack([rng.choice(n, size=m, replace=False) for _ in range(count)])
    return np.sort(picks, axis=1).astype(np.int64)


class BatchSampler:
    """Counter-based batch pairs: draw t depends only on (seed, stream, t, block_size)"""

    def __init__(self, seed: int, n_source: int, n_target: int, m: int,
                 stream: int = 0, block_size: int = 256):
        if m > min(n_source, n_target):
            raise ValueError(f"Batch size m={m} exceeds cloud size n={min(n_source, n_target)}")
        self.seed = int(seed)
        self.n_source = n_source
        self.n_target = n_target
        self.m = m
        self.stream = int(stream)
        self.block_size = block_size
        self._cached = (None, None)

    def _block(self, block: int) -> Tuple[np.ndarray, np.ndarray]:
        cached_block, cached_pairs = self._cached
        if cached_block == block:
            return cached_pairs
        rng = np.random.default_rng([self.seed, self.stream, block])
        A = draw_subsets(rng, self.n_source, self.m, self.block_size)
        B = draw_subsets(rng, self.n_target, self.m, self.block_size)
        self._cached = (block, (A, B))
        return A, B

    def pairs(self, start: int, count: int) -> Tuple[np.ndarray, np.ndarray]:
        """Index arrays (count, m) for draws start .. start + count - 1"""
        A_parts, B_parts = [], []
        t = start
        end = start + count
        while t < end:
            block, offset = divmod(t, self.block_size)
            take = min(self.block_size - offset, end - t)
            A, B = self._block(block)
            A_parts.append(A[offset:offset + take])
            B_parts.append(B[offset:offset + take])
            t += take
        if not A_parts:
            empty = np.empty((0, self.m), dtype=np.int64)
            return empty, empty
        return np.concatenate(A_parts), np.concatenate(B_parts)

    def pair(self, t: int) -> BatchPair:
        A, B = self.pairs(t, 1)
        return BatchPair(A[0], B[0])


def sample_pair(seed: int, t: int, n: int, m: int, stream: int = 0, block_size: int = 256) -> BatchPair:
    """Draw number t of the counter-based stream for an n-point pair of clouds"""
    return BatchSampler(seed, n, n, m, stream, block_size).pair(t)


def all_subsets(n: int, m: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(n), m)), dtype=np.int64).reshape(-1, m)


def _unrank_combination(rank: int, n: int, m: int) -> List[int]:
    """Lexicographic unranking of an m-subset of range(n)"""
    subset = []
    x = 0
    for slot in range(m, 0, -1):
        while True:
            count = comb(n - x - 1, slot - 1)
            if rank < count:
                subset.append(x)
                x += 1
                break
            rank -= count
            x += 1
    return subset


def distinct_pair_indices(cfg: MinibatchConfig, n_source: int, n_target: int) -> Tuple[np.ndarray, np.ndarray]:
    """k batch pairs without repetition across pairs"""
    per_target = comb(n_target, cfg.m)
    total = comb(n_source, cfg.m) * per_target
    if cfg.k > total:
        raise ValueError(f"k={cfg.k} distinct pairs requested but only {total} exist")
    if total <= cfg.enumeration_cap:
        rng = np.random.default_rng([cfg.seed, cfg.stream, DISTINCT_STREAM])
        ranks = rng.choice(total, size=cfg.k, replace=False)
        A = np.empty((cfg.k, cfg.m), dtype=np.int64)
        B = np.empty((cfg.k, cfg.m), dtype=np.int64)
        for row, rank in enumerate(ranks):
            ra, rb = divmod(int(rank), per_target)
            A[row] = _unrank_combination(ra, n_source, cfg.m)
            B[row] = _unrank_combination(rb, n_target, cfg.m)
        return A, B

    sampler = BatchSampler(cfg.seed, n_source, n_target, cfg.m, cfg.stream, cfg.block_size)
    seen = set()
    A_rows, B_rows = [], []
    t = 0
    while len(A_rows) < cfg.k:
        A, B = sampler.pairs(t, cfg.block_size)
        t += cfg.block_size
        for a_row, b_row in zip(A, B):
            key = (a_row.tobytes(), b_row.tobytes())
            if key in seen:
                continue
            seen.add(key)
            A_rows.append(a_row)
            B_rows.append(b_row)
            if len(A_rows) == cfg.k:
                break
    return np.array(A_rows), np.array(B_rows)


PairSource = Callable[[int, int], Tuple[np.ndarray, np.ndarray]]


def pair_source(cfg: MinibatchConfig, n_source: int, n_target: int) -> PairSource:
    if cfg.pair_sampling == "distinct_pairs":
        A_all, B_all = distinct_pair_indices(cfg, n_source, n_target)
        return lambda start, count: (A_all[start:start + count], B_all[start:start + count])
    sampler = BatchSampler(cfg.seed, n_source, n_target, cfg.m, cfg.stream, cfg.block_size)
    return sampler.pairs


def enumeration_source(n: int, m: int) -> Tuple[PairSource, int]:
    subsets = all_subsets(n, m)
    s = len(subsets)

    def get_pairs(start, count):
        idx = np.arange(start, start + count)
        return subsets[idx // s], subsets[idx % s]

    return get_pairs, s * s


def check_enumeration(n: int, m: int, cap: int) -> int:
    total = comb(n, m) ** 2
    if total > cap:
        raise EnumerationCapError(
            f"Exact enumeration needs C({n},{m})^2 = {total} batch pairs, above the cap of {cap}; "
            f"use the subsampled estimator instead"
        )
    return total


# ---------------------------------------------------------------------------
# Batch evaluation
# ---------------------------------------------------------------------------


@dataclass
class StackResult:
    """h on a stack of batch pairs plus the couplings that produced it"""

    values: np.ndarray
    sigma: Optional[np.ndarray] = None
    plans: Optional[np.ndarray] = None
    plans_aa: Optional[np.ndarray] = None
    plans_bb: Optional[np.ndarray] = None
    nonconverged: int = 0
    max_residual: float = 0.0


def _sorted_assignments(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    ia = np.argsort(xs, axis=1, kind="stable")
    ib = np.argsort(ys, axis=1, kind="stable")
    sigma = np.empty_like(ia)
    np.put_along_axis(sigma, ia, ib, axis=1)
    return sigma


def evaluate_stack(XA: np.ndarray, YB: np.ndarray, cost: CostSpec, cfg: MinibatchConfig,
                   want_plans: bool = False) -> StackResult:
    """Evaluate h on batches XA[r] vs YB[r], arrays of shape (count, m, d)"""
    count, m, d = XA.shape
    if cfg.loss == "W":
        if d == 1:
            sigma = _sorted_assignments(XA[:, :, 0], YB[:, :, 0])
        else:
            sigma = np.stack([assignment_from_cost(cost.matrix(XA[r], YB[r]), cfg.tie_break_cap)
                              for r in range(count)])
        matched = np.take_along_axis(YB, sigma[:, :, None], axis=1)
        values = cost.pairwise(XA, matched).sum(axis=1) / m
        return StackResult(values, sigma=sigma)

    chunk = max(1, cfg.dense_cap // (m * m))
    values = np.empty(count)
    plans = np.empty((count, m, m)) if want_plans else None
    plans_aa = np.empty((count, m, m)) if want_plans and cfg.loss == "S_eps" else None
    plans_bb = np.empty((count, m, m)) if want_plans and cfg.loss == "S_eps" else None
    nonconverged = 0
    max_residual = 0.0
    for s in range(0, count, chunk):
        sl = slice(s, min(s + chunk, count))
        cross = sinkhorn_batched(cost.stacked(XA[sl], YB[sl]), cfg.sinkhorn)
        vals = cross.values
        runs = [cross]
        if cfg.loss == "S_eps":
            self_a = sinkhorn_batched(cost.stacked(XA[sl], XA[sl]), cfg.sinkhorn)
            self_b = sinkhorn_batched(cost.stacked(YB[sl], YB[sl]), cfg.sinkhorn)
            vals = vals - 0.5 * (self_a.values + self_b.values)
            runs += [self_a, self_b]
            if want_plans:
                plans_aa[sl] = self_a.plans
                plans_bb[sl] = self_b.plans
        values[sl] = vals
        if want_plans:
            plans[sl] = cross.plans
        for run in runs:
            nonconverged += int((~run.converged).sum())
            max_residual = max(max_residual, float(run.residuals.max()))
    return StackResult(values, plans=plans, plans_aa=plans_aa, plans_bb=plans_bb,
                       nonconverged=nonconverged, max_residual=max_residual)


def batch_loss(x: np.ndarray, y: np.ndarray, cost: CostSpec,
               cfg: MinibatchConfig) -> Tuple[float, TransportPlan]:
    """h(A, B) on one pair of batches, returning the coupling that realises it"""
    a = DiscreteDistribution(x)
    b = DiscreteDistribution(y)
    if cfg.loss == "W":
        if a.dim == 1:
            return solve_exact_1d(a, b, cost)
        return solve_exact_assignment(a, b, cost, cfg.tie_break_cap)
    cross = sinkhorn(a, b, cost, cfg.sinkhorn)
    if cfg.loss == "W_eps":
        return cross.value, cross.plan
    value = cross.value - 0.5 * (sinkhorn(a, a, cost, cfg.sinkhorn).value
                                 + sinkhorn(b, b, cost, cfg.sinkhorn).value)
    return float(value), cross.plan


@dataclass
class BlockOutput:
    A: np.ndarray
    B: np.ndarray
    result: StackResult


def iterate_blocks(X: np.ndarray, Y: np.ndarray, cost: CostSpec, cfg: MinibatchConfig,
                   get_pairs: PairSource, total: int, want_plans: bool = False) -> Iterator[BlockOutput]:
    """Evaluate ``total`` pairs block by block, yielding blocks in draw order"""
    step = cfg.block_size
    if want_plans and cfg.loss != "W":
        step = min(step, max(1, cfg.dense_cap // (cfg.m * cfg.m)))
    starts = range(0, total, step)

    def work(start):
        count = min(step, total - start)
        A, B = get_pairs(start, count)
        return BlockOutput(A, B, evaluate_stack(X[A], Y[B], cost, cfg, want_plans))

    return ordered_map(work, starts, cfg.jobs)


@dataclass
class SubsampledEstimate:
    value: float
    per_draw: np.ndarray
    nonconverged: int = 0
    max_residual: float = 0.0

    def __iter__(self):
        return iter((self.value, self.per_draw))

    def solver_stats(self) -> dict:
        return {
            "pairs": int(len(self.per_draw)),
            "sinkhorn_nonconverged": self.nonconverged,
            "max_marginal_residual": self.max_residual,
            "per_draw_std": float(np.std(self.per_draw, ddof=1)) if len(self.per_draw) > 1 else 0.0,
        }


def _collect_values(blocks: Iterator[BlockOutput], total: int) -> SubsampledEstimate:
    values = np.empty(total)
    pos = 0
    nonconverged = 0
    max_residual = 0.0
    for block in blocks:
        count = len(block.result.values)
        values[pos:pos + count] = block.result.values
        pos += count
        nonconverged += block.result.nonconverged
        max_residual = max(max_residual, block.result.max_residual)
    return SubsampledEstimate(float(values.sum() / total), values, nonconverged, max_residual)


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


def _check_clouds(a: DiscreteDistribution, b: DiscreteDistribution, equal_size: bool = True):
    if a.dim != b.dim:
        raise ValueError(f"Dimension mismatch: source d={a.dim}, target d={b.dim}")
    if equal_size and a.n != b.n:
        raise ValueError(f"Size mismatch: source has {a.n} points, target has {b.n}")


def u_stat_exact(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                 cfg: MinibatchConfig) -> float:
    """Average of h over every pair of m-subsets"""
    _check_clouds(a, b)
    cfg.validate(a.n)
    check_enumeration(a.n, cfg.m, cfg.enumeration_cap)
    get_pairs, total = enumeration_source(a.n, cfg.m)
    estimate = _collect_values(iterate_blocks(a.points, b.points, cost, cfg, get_pairs, total), total)
    logger.debug(f"Exact U-statistic over {total} pairs (n={a.n}, m={cfg.m}, loss={cfg.loss}): {estimate.value:.12g}")
    return estimate.value


def u_stat_subsampled(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                      cfg: MinibatchConfig) -> SubsampledEstimate:
    """Mean of h over k sampled batch pairs; unpacks as (value, per_draw)"""
    _check_clouds(a, b, equal_size=False)
    cfg.validate(a.n, b.n)
    get_pairs = pair_source(cfg, a.n, b.n)
    estimate = _collect_values(iterate_blocks(a.points, b.points, cost, cfg, get_pairs, cfg.k), cfg.k)
    if estimate.nonconverged:
        logger.warning(f"{estimate.nonconverged} batch Sinkhorn solves did not converge")
    return estimate


def u_stat_semidiscrete(a: DiscreteDistribution, beta_sampler: Callable[[np.random.Generator, int], np.ndarray],
                        cost: CostSpec, cfg: MinibatchConfig, draws: int) -> float:
    """Monte-Carlo estimate of U_h(alpha_n, beta) for a sampleable beta

    ``beta_sampler(rng, size)`` returns ``size`` i.i.d. points of shape (size, d).
    """
    if draws < 1:
        raise ValueError(f"draws must be >= 1, got {draws}")
    cfg.validate(a.n)
    rng = np.random.default_rng([cfg.seed, cfg.stream, SEMIDISCRETE_STREAM])
    total = 0.0
    done = 0
    while done < draws:
        count = min(cfg.block_size, draws - done)
        A = draw_subsets(rng, a.n, cfg.m, count)
        Y = np.asarray(beta_sampler(rng, count * cfg.m), dtype=np.float64).reshape(count, cfg.m, -1)
        if Y.shape[2] != a.dim:
            raise ValueError(f"Sampler returned d={Y.shape[2]} points for a d={a.dim} source")
        total += evaluate_stack(a.points[A], Y, cost, cfg).values.sum()
        done += count
    return float(total / draws)


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


class SparsePlan:
    """Running sum of batch plans embedded in the full n_source x n_target grid

    Stored masses are sums of batch plans; every accessor divides by
    ``draw_count`` so the public plan has total mass 1.
    """

    FLUSH_THRESHOLD = 2_000_000

    def __init__(self, n_source: int, n_target: Optional[int] = None, subsampled: bool = True):
        self.n_source = n_source
        self.n_target = n_source if n_target is None else n_target
        self.subsampled = subsampled
        self.draw_count = 0
        self._sum = sparse.csr_matrix((self.n_source, self.n_target))
        self._rows: List[np.ndarray] = []
        self._cols: List[np.ndarray] = []
        self._vals: List[np.ndarray] = []
        self._pending = 0

    @property
    def n(self) -> int:
        return self.n_source

    def _push(self, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray):
        self._rows.append(rows.ravel())
        self._cols.append(cols.ravel())
        self._vals.append(vals.ravel())
        self._pending += rows.size
        if self._pending >= self.FLUSH_THRESHOLD:
            self._flush()

    def _flush(self):
        if not self._rows:
            return
        block = sparse.coo_matrix(
            (np.concatenate(self._vals), (np.concatenate(self._rows), np.concatenate(self._cols))),
            shape=(self.n_source, self.n_target),
        ).tocsr()
        self._sum = self._sum + block
        self._rows, self._cols, self._vals = [], [], []
        self._pending = 0

    def add_assignments(self, A: np.ndarray, B: np.ndarray, sigma: np.ndarray):
        """Add exact batch plans: row A[r, i] sends 1/m to B[r, sigma[r, i]]"""
        count, m = A.shape
        cols = np.take_along_axis(B, sigma, axis=1)
        self._push(A, cols, np.full(A.shape, 1.0 / m))
        self.draw_count += count

    def add_dense(self, A: np.ndarray, B: np.ndarray, plans: np.ndarray):
        """Add dense batch plans of shape (count, m, m)"""
        count, m = A.shape
        rows = np.broadcast_to(A[:, :, None], plans.shape)
        cols = np.broadcast_to(B[:, None, :], plans.shape)
        self._push(np.ascontiguousarray(rows), np.ascontiguousarray(cols), plans)
        self.draw_count += count

    def add_block(self, block: BlockOutput):
        if block.result.sigma is not None:
            self.add_assignments(block.A, block.B, block.result.sigma)
        else:
            self.add_dense(block.A, block.B, block.result.plans)

    @property
    def matrix(self) -> sparse.csr_matrix:
        """Normalised plan as CSR"""
        self._flush()
        if self.draw_count == 0:
            return self._sum.copy()
        plan = (self._sum / self.draw_count).tocsr()
        plan.sort_indices()
        return plan

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def col_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=0)).ravel()

    def total_mass(self) -> float:
        return float(self.matrix.sum())

    def marginal_l1_error(self) -> Tuple[float, float]:
        """L1 distances of the row and column sums to the uniform marginals"""
        rows = float(np.abs(self.row_sums() - 1.0 / self.n_source).sum())
        cols = float(np.abs(self.col_sums() - 1.0 / self.n_target).sum())
        return rows, cols

    def inner_cost(self, x: np.ndarray, y: np.ndarray, cost: CostSpec) -> float:
        """<Pi, C> evaluated on the nonzero entries only"""
        coo = self.matrix.tocoo()
        return float(np.sum(coo.data * cost.pairwise(x[coo.row], y[coo.col])))

    def to_dense(self, dense_cap: int = 4_000_000) -> np.ndarray:
        size = self.n_source * self.n_target
        if size > dense_cap:
            raise ValueError(f"Refusing to materialise a {self.n_source}x{self.n_target} dense plan "
                             f"({size} entries > dense cap {dense_cap})")
        return self.matrix.toarray()

    def triplets(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(i, j, mass) for every stored entry, sorted by (i, j)"""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order].astype(np.int64), coo.col[order].astype(np.int64), coo.data[order]

    @classmethod
    def from_triplets(cls, n_source: int, n_target: int, rows, cols, masses,
                      subsampled: bool = True) -> "SparsePlan":
        plan = cls(n_source, n_target, subsampled)
        plan._push(np.asarray(rows), np.asarray(cols), np.asarray(masses, dtype=np.float64))
        plan.draw_count = 1
        return plan

    @classmethod
    def from_dense(cls, matrix: np.ndarray, subsampled: bool = False) -> "SparsePlan":
        rows, cols = np.nonzero(matrix)
        return cls.from_triplets(matrix.shape[0], matrix.shape[1], rows, cols, matrix[rows, cols], subsampled)


def plan_averaged_exact(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                        cfg: MinibatchConfig) -> SparsePlan:
    """Average of the batch plans over every pair of m-subsets"""
    _check_clouds(a, b)
    cfg.validate(a.n)
    check_enumeration(a.n, cfg.m, cfg.enumeration_cap)
    get_pairs, total = enumeration_source(a.n, cfg.m)
    plan = SparsePlan(a.n, b.n, subsampled=False)
    for block in iterate_blocks(a.points, b.points, cost, cfg, get_pairs, total, want_plans=True):
        plan.add_block(block)
    return plan


def plan_subsampled(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                    cfg: MinibatchConfig) -> SparsePlan:
    """Average of k sampled batch plans"""
    _check_clouds(a, b, equal_size=False)
    cfg.validate(a.n, b.n)
    get_pairs = pair_source(cfg, a.n, b.n)
    plan = SparsePlan(a.n, b.n, subsampled=True)
    for block in iterate_blocks(a.points, b.points, cost, cfg, get_pairs, cfg.k, want_plans=True):
        plan.add_block(block)
    return plan


def plan_entropic(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                  p: SinkhornParams) -> TransportPlan:
    """Full regularised plan between the two clouds"""
    return sinkhorn(a, b, cost, p).plan


def plan_quadratic(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                   q: QuadraticParams) -> TransportPlan:
    """Full quadratically regularised plan; sparse for small gamma"""
    return quadratic_regularized(a, b, cost, q).plan


def _closed_form_exact(n: int, m: int) -> np.ndarray:
    # left[j, i] = C(j-1, i-1) * C(n-j, m-i) for ranks j and batch positions i, 1-based
    left = np.array([[comb(j - 1, i - 1) * comb(n - j, m - i) for i in range(1, m + 1)]
                     for j in range(1, n + 1)], dtype=object)
    numerators = np.dot(left, left.T)
    denominator = m * comb(n, m) ** 2
    return np.array([[int(v) / denominator for v in row] for row in numerators], dtype=np.float64)


def _log_comb(top: np.ndarray, bottom: np.ndarray) -> np.ndarray:
    valid = (bottom >= 0) & (bottom <= top)
    out = np.full(np.broadcast(top, bottom).shape, -np.inf)
    t = np.broadcast_to(top, out.shape)[valid]
    s = np.broadcast_to(bottom, out.shape)[valid]
    out[valid] = gammaln(t + 1) - gammaln(s + 1) - gammaln(t - s + 1)
    return out


def _closed_form_log(n: int, m: int) -> np.ndarray:
    j = np.arange(1, n + 1)[:, None]
    i = np.arange(1, m + 1)[None, :]
    log_left = _log_comb(j - 1, i - 1) + _log_comb(n - j, m - i)
    log_norm = np.log(m) + 2 * (gammaln(n + 1) - gammaln(m + 1) - gammaln(n - m + 1))
    out = np.empty((n, n))
    rows_per_chunk = max(1, 4_000_000 // max(1, n * m))
    for s in range(0, n, rows_per_chunk):
        chunk = log_left[s:s + rows_per_chunk]
        terms = chunk[:, None, :] + log_left[None, :, :]
        out[s:s + rows_per_chunk] = np.exp(logsumexp(terms, axis=2) - log_norm)
    return out


def closed_form_1d(n: int, m: int) -> np.ndarray:
    """Averaged minibatch plan between two sorted 1D clouds, indexed by rank"""
    if not 1 <= m <= n:
        raise ValueError(f"Closed form needs 1 <= m <= n, got m={m}, n={n}")
    if n <= EXACT_CLOSED_FORM_LIMIT:
        return _closed_form_exact(n, m)
    return _closed_form_log(n, m)


def validate_plan(plan, tol: float = 1e-9, require_marginals: bool = True) -> dict:
    """Check a coupling for admissibility

    Returns {"valid": bool, "errors": [...], "warnings": [...]}. Marginal
    deviations are errors for exact plans and warnings for subsampled ones.
    """
    errors = []
    warnings = []
    if isinstance(plan, SparsePlan):
        matrix = plan.matrix
        data = matrix.data
        rows = np.asarray(matrix.sum(axis=1)).ravel()
        cols = np.asarray(matrix.sum(axis=0)).ravel()
    else:
        matrix = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan)
        data = matrix.ravel()
        rows = matrix.sum(axis=1)
        cols = matrix.sum(axis=0)

    if data.size and data.min() < 0:
        errors.append(f"Negative mass {data.min():.3e}")
    if not np.all(np.isfinite(data)):
        errors.append("Non-finite mass")
    total = float(rows.sum())
    if abs(total - 1.0) > tol:
        errors.append(f"Total mass {total:.17g} differs from 1")

    row_dev = float(np.abs(rows - 1.0 / len(rows)).max())
    col_dev = float(np.abs(cols - 1.0 / len(cols)).max())
    for name, dev in (("row", row_dev), ("column", col_dev)):
        if dev > tol:
            message = f"Max {name} marginal deviation {dev:.3e} exceeds {tol:.1e}"
            (errors if require_marginals else warnings).append(message)

    return {
        "valid": len(errors) == 0,
        "errors": errors,
        "warnings": warnings,
        "row_deviation": row_dev,
        "col_deviation": col_dev,
        "total_mass": total,
    }
