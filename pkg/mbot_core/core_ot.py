# mbot_core/core_ot.py - Exact, entropic and quadratic OT between uniform clouds
import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize
from scipy.special import logsumexp, xlogy

from mbot_core.distributions import CostSpec, DiscreteDistribution

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 8


@dataclass
class TransportPlan:
    """Coupling matrix with its transport objective

    ``assignment`` is set for exact plans (row i sends all its mass to
    column assignment[i]).
    """

    matrix: np.ndarray
    value: float
    assignment: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape

    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    def marginal_residual(self) -> float:
        """Max over both marginals of the L1 deviation from uniform"""
        rows, cols = self.matrix.shape
        row_err = np.abs(self.row_sums() - 1.0 / rows).sum()
        col_err = np.abs(self.col_sums() - 1.0 / cols).sum()
        return float(max(row_err, col_err))


@dataclass(frozen=True)
class SinkhornParams:
    """Entropic solver settings; ``log_domain=None`` picks the domain per problem"""

    epsilon: float = 0.1
    max_iters: int = 10000
    tol: float = 1e-9
    log_domain: Optional[bool] = None
    log_switch_ratio: float = 0.05

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"Sinkhorn epsilon must be positive, got {self.epsilon}")
        if not self.tol > 0:
            raise ValueError(f"Sinkhorn tolerance must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ValueError(f"Sinkhorn max_iters must be >= 1, got {self.max_iters}")


@dataclass
class SinkhornResult:
    value: float
    plan: TransportPlan
    f: np.ndarray
    g: np.ndarray
    converged: bool
    residual: float
    iterations: int
    log_domain: bool
    dual_trace: List[float] = field(default_factory=list)

    def __iter__(self):
        # unpacks as (value, plan, potentials)
        return iter((self.value, self.plan, (self.f, self.g)))


@dataclass
class BatchedSinkhorn:
    """Per-problem results of one stacked Sinkhorn run"""

    values: np.ndarray
    plans: np.ndarray
    f: np.ndarray
    g: np.ndarray
    converged: np.ndarray
    residuals: np.ndarray
    iterations: np.ndarray
    log_domain: np.ndarray
    dual_traces: Optional[List[List[float]]] = None

    def __len__(self):
        return len(self.values)

    def result(self, index: int) -> SinkhornResult:
        plan = TransportPlan(self.plans[index], float(self.values[index]))
        trace = self.dual_traces[index] if self.dual_traces is not None else []
        return SinkhornResult(
            value=float(self.values[index]),
            plan=plan,
            f=self.f[index],
            g=self.g[index],
            converged=bool(self.converged[index]),
            residual=float(self.residuals[index]),
            iterations=int(self.iterations[index]),
            log_domain=bool(self.log_domain[index]),
            dual_trace=trace,
        )


def _check_pair(a: DiscreteDistribution, b: DiscreteDistribution):
    if a.n != b.n:
        raise ValueError(f"Size mismatch: source has {a.n} points, target has {b.n}")
    if a.dim != b.dim:
        raise ValueError(f"Dimension mismatch: source d={a.dim}, target d={b.dim}")


def _permutation_plan(sigma: np.ndarray, value: float) -> TransportPlan:
    m = len(sigma)
    matrix = np.zeros((m, m))
    matrix[np.arange(m), sigma] = 1.0 / m
    return TransportPlan(matrix, value, assignment=sigma)


# ---------------------------------------------------------------------------
# Exact solvers
# ---------------------------------------------------------------------------


def sorted_matching(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Monotone matching of two 1D samples, sigma[i] = column matched to row i"""
    ia = np.argsort(x, kind="stable")
    ib = np.argsort(y, kind="stable")
    sigma = np.empty(len(x), dtype=np.int64)
    sigma[ia] = ib
    return sigma


def solve_exact_1d(a: DiscreteDistribution, b: DiscreteDistribution,
                   cost: CostSpec) -> Tuple[float, TransportPlan]:
    """Exact OT in 1D via sorted matching"""
    _check_pair(a, b)
    if a.dim != 1:
        raise ValueError(f"solve_exact_1d needs 1D supports, got d={a.dim}")
    if cost.kind == "euclidean":
        cost = CostSpec("abs", cost.bound)
    sigma = sorted_matching(a.points[:, 0], b.points[:, 0])
    value = float(cost.pairwise(a.points, b.points[sigma]).sum() / a.n)
    return value, _permutation_plan(sigma, value)


def brute_force_assignment(C: np.ndarray) -> Tuple[float, np.ndarray]:
    """Permutation enumeration oracle, lexicographically smallest optimum"""
    C = np.asarray(C, dtype=np.float64)
    m = C.shape[0]
    if C.shape != (m, m):
        raise ValueError(f"Cost matrix must be square, got {C.shape}")
    if m > BRUTE_FORCE_LIMIT:
        raise ValueError(f"Brute force is limited to n <= {BRUTE_FORCE_LIMIT}, got {m}")
    perms = np.array(list(itertools.permutations(range(m))), dtype=np.int64)
    totals = C[np.arange(m), perms].sum(axis=1)
    best = totals.min()
    tol = 1e-12 * max(1.0, float(np.abs(C).max())) * m
    first = int(np.flatnonzero(totals <= best + tol)[0])
    sigma = perms[first]
    return float(C[np.arange(m), sigma].sum() / m), sigma


def _lexicographic_optimum(C: np.ndarray) -> np.ndarray:
    """Smallest optimal permutation in lexicographic order

    Fixes rows one at a time, keeping the smallest column for which the
    remaining subproblem still completes to an optimal assignment.
    """
    m = C.shape[0]
    rows, cols = linear_sum_assignment(C)
    target = C[rows, cols].sum()
    tol = 1e-12 * max(1.0, float(np.abs(C).max())) * m

    sigma = np.empty(m, dtype=np.int64)
    free = list(range(m))
    prefix = 0.0
    for i in range(m):
        rest_rows = np.arange(i + 1, m)
        chosen = free[-1]
        for j in free:
            base = prefix + C[i, j]
            if base > target + tol:
                continue
            rest_cols = np.array([c for c in free if c != j], dtype=np.int64)
            if len(rest_rows):
                sub = C[np.ix_(rest_rows, rest_cols)]
                r, c = linear_sum_assignment(sub)
                completion = sub[r, c].sum()
            else:
                completion = 0.0
            if base + completion <= target + tol:
                chosen = j
                break
        sigma[i] = chosen
        prefix += C[i, chosen]
        free.remove(chosen)
    return sigma


def assignment_from_cost(C: np.ndarray, tie_break_cap: int = 8) -> np.ndarray:
    """Optimal permutation for a square cost matrix

    Lexicographic tie-breaking applies up to ``tie_break_cap``; above it the
    deterministic output of the assignment solver is used.
    """
    C = np.asarray(C, dtype=np.float64)
    m = C.shape[0]
    if C.shape != (m, m):
        raise ValueError(f"Cost matrix must be square, got {C.shape}")
    if m == 1:
        return np.zeros(1, dtype=np.int64)
    if m <= tie_break_cap:
        return _lexicographic_optimum(C)
    _, cols = linear_sum_assignment(C)
    return cols.astype(np.int64)


def solve_exact_assignment(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                           tie_break_cap: int = 8) -> Tuple[float, TransportPlan]:
    """Exact OT between uniform equal-size clouds as an assignment problem"""
    _check_pair(a, b)
    C = cost.matrix(a.points, b.points)
    sigma = assignment_from_cost(C, tie_break_cap)
    value = float(C[np.arange(a.n), sigma].sum() / a.n)
    return value, _permutation_plan(sigma, value)


# ---------------------------------------------------------------------------
# Sinkhorn
# ---------------------------------------------------------------------------


def _wants_log_domain(C: np.ndarray, p: SinkhornParams) -> np.ndarray:
    """Per-problem domain choice for a (k, r, c) stack"""
    if p.log_domain is not None:
        return np.full(C.shape[0], bool(p.log_domain))
    medians = np.median(C.reshape(C.shape[0], -1), axis=1)
    with np.errstate(divide="ignore"):
        ratio = np.where(medians > 0, p.epsilon / np.where(medians > 0, medians, 1.0), np.inf)
    return ratio < p.log_switch_ratio


def _log_iterations(C, eps, tol, max_iters, traces):
    k, r, c = C.shape
    log_a = -np.log(r)
    log_b = -np.log(c)
    f = np.zeros((k, r))
    g = np.zeros((k, c))
    iterations = np.zeros(k, dtype=np.int64)
    converged = np.zeros(k, dtype=bool)
    active = np.arange(k)
    Ca = C
    for it in range(max_iters + 1):
        row_lse = logsumexp((g[active][:, None, :] - Ca) / eps, axis=2)
        row_mass = np.exp(f[active] / eps + row_lse)
        residual = np.abs(row_mass - 1.0 / r).sum(axis=1)
        done = residual <= tol
        if np.any(done):
            converged[active[done]] = True
        if it == max_iters:
            break
        if np.any(done):
            keep = ~done
            active = active[keep]
            row_lse = row_lse[keep]
            Ca = C[active]
        if len(active) == 0:
            break
        f[active] = eps * log_a - eps * row_lse
        col_lse = logsumexp((f[active][:, :, None] - Ca) / eps, axis=1)
        g[active] = eps * log_b - eps * col_lse
        iterations[active] += 1
        if traces is not None:
            duals = f[active].mean(axis=1) + g[active].mean(axis=1) - eps
            for idx, dual in zip(active, duals):
                traces[idx].append(float(dual))
    plans = np.exp((f[:, :, None] + g[:, None, :] - C) / eps)
    return f, g, plans, converged, iterations


def _scaling_iterations(C, eps, tol, max_iters, traces):
    k, r, c = C.shape
    K = np.exp(-C / eps)
    u = np.ones((k, r))
    v = np.ones((k, c))
    iterations = np.zeros(k, dtype=np.int64)
    converged = np.zeros(k, dtype=bool)
    active = np.arange(k)
    Ka = K
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for it in range(max_iters + 1):
            Kv = np.einsum("kij,kj->ki", Ka, v[active])
            residual = np.abs(u[active] * Kv - 1.0 / r).sum(axis=1)
            done = residual <= tol
            if np.any(done):
                converged[active[done]] = True
            if it == max_iters:
                break
            if np.any(done):
                keep = ~done
                active = active[keep]
                Kv = Kv[keep]
                Ka = K[active]
            if len(active) == 0:
                break
            u[active] = (1.0 / r) / Kv
            v[active] = (1.0 / c) / np.einsum("kij,ki->kj", Ka, u[active])
            iterations[active] += 1
            if traces is not None:
                duals = eps * (np.log(u[active]).mean(axis=1) + np.log(v[active]).mean(axis=1)) - eps
                for idx, dual in zip(active, duals):
                    traces[idx].append(float(dual))
        f = eps * np.log(u)
        g = eps * np.log(v)
    plans = u[:, :, None] * K * v[:, None, :]
    return f, g, plans, converged, iterations


def _entropic_objective(plans: np.ndarray, C: np.ndarray, eps: float) -> np.ndarray:
    """<P, C> + eps * sum P (log P - 1)"""
    return np.sum(plans * C, axis=(1, 2)) + eps * np.sum(xlogy(plans, plans) - plans, axis=(1, 2))


def sinkhorn_batched(C: np.ndarray, p: SinkhornParams, record_trace: bool = False) -> BatchedSinkhorn:
    """Solve a stack of entropic problems with identical marginals

    Each problem freezes as soon as its own residual drops below tol, so its
    result matches a standalone solve.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim == 2:
        C = C[None]
    if C.ndim != 3:
        raise ValueError(f"Expected a (k, r, c) cost stack, got shape {C.shape}")
    k, r, c = C.shape
    use_log = _wants_log_domain(C, p)
    traces = [[] for _ in range(k)] if record_trace else None

    f = np.zeros((k, r))
    g = np.zeros((k, c))
    plans = np.zeros((k, r, c))
    converged = np.zeros(k, dtype=bool)
    iterations = np.zeros(k, dtype=np.int64)

    groups = [(np.flatnonzero(use_log), True), (np.flatnonzero(~use_log), False)]
    for idx, log_domain in groups:
        if len(idx) == 0:
            continue
        sub_traces = [[] for _ in idx] if record_trace else None
        runner = _log_iterations if log_domain else _scaling_iterations
        fs, gs, ps, cs, its = runner(C[idx], p.epsilon, p.tol, p.max_iters, sub_traces)
        if not log_domain:
            broken = ~(np.all(np.isfinite(ps), axis=(1, 2)) & np.all(np.isfinite(fs), axis=1)
                       & np.all(np.isfinite(gs), axis=1))
            if np.any(broken):
                logger.debug(f"Scaling Sinkhorn under/overflowed on {int(broken.sum())} problems, "
                             f"retrying in the log domain")
                retry = idx[broken]
                retry_traces = [[] for _ in retry] if record_trace else None
                rf, rg, rp, rc, rit = _log_iterations(C[retry], p.epsilon, p.tol, p.max_iters, retry_traces)
                fs[broken], gs[broken], ps[broken], cs[broken], its[broken] = rf, rg, rp, rc, rit
                use_log[retry] = True
                if record_trace:
                    for pos, trace in zip(np.flatnonzero(broken), retry_traces):
                        sub_traces[pos] = trace
        f[idx], g[idx], plans[idx], converged[idx], iterations[idx] = fs, gs, ps, cs, its
        if record_trace:
            for pos, trace in zip(idx, sub_traces):
                traces[pos] = trace

    values = _entropic_objective(plans, C, p.epsilon)
    row_err = np.abs(plans.sum(axis=2) - 1.0 / r).sum(axis=1)
    col_err = np.abs(plans.sum(axis=1) - 1.0 / c).sum(axis=1)
    residuals = np.maximum(row_err, col_err)

    if not np.all(converged):
        logger.warning(f"Sinkhorn did not converge on {int((~converged).sum())}/{k} problems "
                       f"within {p.max_iters} iterations (max residual {residuals.max():.3e})")
    return BatchedSinkhorn(values, plans, f, g, converged, residuals, iterations, use_log, traces)


def sinkhorn_from_cost(C: np.ndarray, p: SinkhornParams, record_trace: bool = True) -> SinkhornResult:
    return sinkhorn_batched(np.asarray(C, dtype=np.float64)[None], p, record_trace).result(0)


def sinkhorn(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
             p: SinkhornParams) -> SinkhornResult:
    """Entropic OT with the discrete-entropy objective <P,C> - eps*H(P)"""
    _check_pair(a, b)
    result = sinkhorn_from_cost(cost.matrix(a.points, b.points), p)
    logger.debug(f"Sinkhorn n={a.n} eps={p.epsilon}: value={result.value:.6g}, "
                 f"iterations={result.iterations}, residual={result.residual:.3e}")
    return result


def dual_trace(result: SinkhornResult) -> np.ndarray:
    """Dual objective after every iteration (nondecreasing)"""
    return np.asarray(result.dual_trace, dtype=np.float64)


def _canonical_order(a: DiscreteDistribution, b: DiscreteDistribution):
    key_a = (a.n, a.points.tobytes())
    key_b = (b.n, b.points.tobytes())
    return (b, a) if key_b < key_a else (a, b)


def sinkhorn_divergence(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                        p: SinkhornParams) -> float:
    """W_eps(a,b) - (W_eps(a,a) + W_eps(b,b)) / 2 with shared parameters"""
    _check_pair(a, b)
    first, second = _canonical_order(a, b)
    cross = sinkhorn(first, second, cost, p).value
    self_a = sinkhorn(a, a, cost, p).value
    self_b = sinkhorn(b, b, cost, p).value
    return float(cross - 0.5 * (self_a + self_b))


@dataclass(frozen=True)
class QuadraticParams:
    """Settings for OT regularised by (gamma / 2) * ||P||^2"""

    gamma: float = 0.1
    max_iters: int = 10000
    tol: float = 1e-7

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"Quadratic gamma must be positive, got {self.gamma}")
        if not self.tol > 0:
            raise ValueError(f"Quadratic tolerance must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ValueError(f"Quadratic max_iters must be >= 1, got {self.max_iters}")


@dataclass
class QuadraticResult:
    value: float
    plan: TransportPlan
    f: np.ndarray
    g: np.ndarray
    converged: bool
    residual: float
    iterations: int

    def __iter__(self):
        return iter((self.value, self.plan, (self.f, self.g)))


def quadratic_from_cost(C: np.ndarray, q: QuadraticParams) -> QuadraticResult:
    """Smooth dual of quadratically regularised OT, solved with L-BFGS-B

    The plan is P = max(f_i + g_j - C_ij, 0) / gamma, so entries outside
    the active set are exact zeros.
    """
    C = np.asarray(C, dtype=np.float64)
    rows, cols = C.shape
    a = np.full(rows, 1.0 / rows)
    b = np.full(cols, 1.0 / cols)

    def negative_dual(x):
        f, g = x[:rows], x[rows:]
        slack = np.maximum(f[:, None] + g[None, :] - C, 0.0)
        P = slack / q.gamma
        objective = -(f @ a + g @ b) + 0.5 * float((slack * P).sum())
        return objective, np.concatenate([P.sum(axis=1) - a, P.sum(axis=0) - b])

    res = minimize(negative_dual, np.zeros(rows + cols), jac=True, method="L-BFGS-B",
                   options={"maxiter": q.max_iters, "gtol": q.tol / (rows + cols), "ftol": 1e-16})
    f, g = res.x[:rows], res.x[rows:]
    matrix = np.maximum(f[:, None] + g[None, :] - C, 0.0) / q.gamma
    value = float((matrix * C).sum() + 0.5 * q.gamma * (matrix ** 2).sum())
    plan = TransportPlan(matrix, value)
    residual = plan.marginal_residual()
    converged = residual <= q.tol
    if not converged:
        logger.warning(f"Quadratic OT stopped after {res.nit} iterations with residual {residual:.3e} "
                       f"({res.message})")
    return QuadraticResult(value, plan, f, g, converged, residual, int(res.nit))


def quadratic_regularized(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                          q: QuadraticParams) -> QuadraticResult:
    """OT with the objective <P,C> + (gamma / 2) * ||P||^2"""
    _check_pair(a, b)
    result = quadratic_from_cost(cost.matrix(a.points, b.points), q)
    logger.debug(f"Quadratic OT n={a.n} gamma={q.gamma}: value={result.value:.6g}, "
                 f"iterations={result.iterations}, residual={result.residual:.3e}")
    return result
