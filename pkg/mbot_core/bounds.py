# mbot_core/bounds.py - Concentration bounds and the experiments that check them
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mbot_core.core_ot import SinkhornParams
from mbot_core.distributions import CostSpec, DiscreteDistribution, GeneratorSpec, support_diameter
from mbot_core.minibatch import (
    EnumerationCapError,
    MinibatchConfig,
    check_enumeration,
    plan_subsampled,
    u_stat_exact,
    u_stat_subsampled,
)
from mbot_core.parallel import ordered_map

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ["n", "m", "k", "rep", "seed", "estimate", "reference", "abs_error", "bound", "within_bound"]
REFERENCE_STREAM = 1


def _check_delta(delta: float):
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def m_h(loss: str, diam: float, epsilon: float, m: int) -> float:
    """Uniform bound on |h| over batch pairs"""
    if diam < 0:
        raise ValueError(f"diam must be nonnegative, got {diam}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if loss == "W":
        return float(diam)
    if loss in ("W_eps", "S_eps"):
        return 1.5 * (diam + epsilon * (2.0 * math.log2(m) + 1.0))
    raise ValueError(f"Unknown loss '{loss}'")


def cost_bound(cost: CostSpec, diam: float) -> float:
    """Bound on the ground cost over a support of diameter ``diam``"""
    if cost.bound is not None:
        return float(cost.bound)
    return float(cost.bound_from_diameter(diam))


@dataclass(frozen=True)
class BoundInputs:
    """Inputs of the deviation bound; ``diam`` is in ground-cost units"""

    n: int
    m: int
    k: float
    delta: float
    epsilon: float = 0.0
    diam: float = 1.0
    loss: str = "W"

    def __post_init__(self):
        _check_delta(self.delta)
        if not 1 <= self.m <= self.n:
            raise ValueError(f"Need 1 <= m <= n, got m={self.m}, n={self.n}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.diam < 0:
            raise ValueError(f"diam must be nonnegative, got {self.diam}")

    @property
    def m_h(self) -> float:
        return m_h(self.loss, self.diam, self.epsilon, self.m)


def u_statistic_bound(n: int, m: int, delta: float, M_h: float) -> float:
    """Two-sample U-statistic deviation, the k -> infinity limit"""
    _check_delta(delta)
    return M_h * math.sqrt(math.log(2.0 / delta) / (2.0 * (n // m)))


def marginal_bound(k: float, delta: float) -> float:
    """Per-row deviation of the subsampled plan's marginal from 1/n"""
    _check_delta(delta)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if math.isinf(k):
        return 0.0
    return math.sqrt(2.0 * math.log(2.0 / delta) / k)


def hoeffding_deviation(bi: BoundInputs, M_h: Optional[float] = None) -> float:
    """Deviation of the subsampled estimator from its population value"""
    M_h = bi.m_h if M_h is None else M_h
    return u_statistic_bound(bi.n, bi.m, bi.delta, M_h) + M_h * marginal_bound(bi.k, bi.delta)


def bernstein_tail(n: int, m: int, eps_dev: float, sigma2: float, M_h: float) -> Tuple[float, float]:
    """Bernstein tail probability, returned as (with sigma2, with sigma2 = M_h^2)"""
    if eps_dev <= 0:
        raise ValueError(f"Deviation must be positive, got {eps_dev}")
    if sigma2 < 0 or sigma2 > M_h ** 2:
        raise ValueError(f"sigma2 must lie in [0, M_h^2] = [0, {M_h ** 2}], got {sigma2}")
    blocks = n // m

    def tail(variance):
        if variance + M_h * eps_dev == 0.0:
            # h is identically zero, no positive deviation is possible
            return 0.0
        return min(1.0, 2.0 * math.exp(-blocks * eps_dev ** 2 / (2.0 * (variance + M_h * eps_dev / 3.0))))

    return tail(sigma2), tail(M_h ** 2)


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(ys) against log(xs)"""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) < 2:
        raise ValueError("A slope needs at least two points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("Log-log slope needs strictly positive values")
    slope, _ = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# Deviation experiment
# ---------------------------------------------------------------------------


@dataclass
class ExperimentRecord:
    n: int
    m: int
    k: int
    rep: int
    seed: int
    estimate: float
    reference: float
    abs_error: float
    bound: float
    within_bound: bool
    reference_feasible: bool = True
    reference_kind: str = "exact"
    delta: float = 0.1

    def to_row(self) -> Dict:
        return asdict(self)


@dataclass
class DeviationSettings:
    delta: float = 0.1
    reps: int = 200
    seed: int = 20200217
    cost: CostSpec = field(default_factory=lambda: CostSpec("abs"))
    loss: str = "W"
    sinkhorn: SinkhornParams = field(default_factory=SinkhornParams)
    k_ref_min: int = 100_000
    k_ref_factor: int = 100
    enumeration_cap: int = 1_000_000
    max_reference_draws: Optional[int] = None
    block_size: int = 256
    jobs: int = 1


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from integer parts"""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _grid_task(task):
    spec, (n, m), ks, rep, settings = task
    data_rng = np.random.default_rng([settings.seed, n, m, rep])
    a, b = spec.draw(n, data_rng)
    diam_bound = cost_bound(settings.cost, spec.diameter)
    M_h = m_h(settings.loss, diam_bound, settings.sinkhorn.epsilon, m)
    base = MinibatchConfig(m=m, k=1, loss=settings.loss, sinkhorn=settings.sinkhorn,
                           enumeration_cap=settings.enumeration_cap, block_size=settings.block_size)

    references = {}

    def reference_for(k):
        try:
            check_enumeration(n, m, settings.enumeration_cap)
            key = "exact"
        except EnumerationCapError:
            key = max(settings.k_ref_min, settings.k_ref_factor * k)
        if key in references:
            return references[key]
        if key == "exact":
            value = u_stat_exact(a, b, settings.cost, base)
            references[key] = (value, "exact", True, 0.0)
        elif settings.max_reference_draws is not None and key > settings.max_reference_draws:
            logger.warning(f"Reference for n={n}, m={m}, rep={rep} needs {key} draws, "
                           f"above the limit of {settings.max_reference_draws}")
            references[key] = (float("nan"), "infeasible", False, 0.0)
        else:
            cfg = base.with_(k=key, seed=derive_seed(settings.seed, n, m, rep, key), stream=REFERENCE_STREAM)
            value = u_stat_subsampled(a, b, settings.cost, cfg).value
            # sampling error of the surrogate widens the tolerance
            slack = M_h * marginal_bound(key, settings.delta)
            references[key] = (value, "surrogate", True, slack)
        return references[key]

    records = []
    for k in ks:
        draw_seed = derive_seed(settings.seed, n, m, k, rep)
        estimate = u_stat_subsampled(a, b, settings.cost, base.with_(k=k, seed=draw_seed)).value
        reference, kind, feasible, slack = reference_for(k)
        bound = hoeffding_deviation(BoundInputs(n, m, k, settings.delta, settings.sinkhorn.epsilon,
                                                diam_bound, settings.loss), M_h) + slack
        abs_error = abs(estimate - reference) if feasible else float("nan")
        records.append(ExperimentRecord(
            n=n, m=m, k=k, rep=rep, seed=draw_seed, estimate=estimate, reference=reference,
            abs_error=abs_error, bound=bound, within_bound=bool(feasible and abs_error <= bound),
            reference_feasible=feasible, reference_kind=kind, delta=settings.delta,
        ))
    return records


def run_deviation_experiment(generator_spec: GeneratorSpec, grid: Iterable[Tuple[int, int, int]],
                             delta: float = 0.1, reps: int = 200, seed: int = 20200217,
                             settings: Optional[DeviationSettings] = None) -> List[ExperimentRecord]:
    """Subsampled estimate vs reference and bound for every grid point and repetition

    Clouds depend on (seed, n, m, rep) only, so a sweep over k reuses the same
    data and reference value.
    """
    _check_delta(delta)
    settings = settings or DeviationSettings()
    settings = DeviationSettings(**{**settings.__dict__, "delta": delta, "reps": reps, "seed": seed})

    by_nm: Dict[Tuple[int, int], List[int]] = {}
    for n, m, k in grid:
        if not 1 <= m <= n:
            raise ValueError(f"Grid point needs 1 <= m <= n, got n={n}, m={m}")
        by_nm.setdefault((n, m), [])
        if k not in by_nm[(n, m)]:
            by_nm[(n, m)].append(int(k))

    tasks = [(generator_spec, nm, sorted(ks), rep, settings)
             for nm, ks in sorted(by_nm.items()) for rep in range(reps)]
    logger.info(f"Deviation experiment: {len(by_nm)} (n, m) points, {reps} reps, delta={delta}")

    records = []
    for chunk in ordered_map(_grid_task, tasks, settings.jobs):
        records.extend(chunk)
    records.sort(key=lambda r: (r.n, r.m, r.k, r.rep))

    infeasible = sum(not r.reference_feasible for r in records)
    if infeasible:
        logger.warning(f"{infeasible} records have no feasible reference")
    return records


def coverage_by_point(records: Sequence[ExperimentRecord]) -> pd.DataFrame:
    """Fraction within bound and mean error per (n, m, k)"""
    frame = pd.DataFrame([r.to_row() for r in records])
    return (frame.groupby(["n", "m", "k"])
            .agg(coverage=("within_bound", "mean"), mean_abs_error=("abs_error", "mean"),
                 bound=("bound", "mean"), reps=("rep", "count"))
            .reset_index())


def write_records_csv(records: Sequence[ExperimentRecord], path):
    frame = pd.DataFrame([r.to_row() for r in records], columns=list(ExperimentRecord.__dataclass_fields__))
    frame = frame.sort_values(["n", "m", "k", "rep"], kind="mergesort")[RECORD_COLUMNS]
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(frame)} experiment records to {path}")


# ---------------------------------------------------------------------------
# Marginal experiment
# ---------------------------------------------------------------------------


@dataclass
class MarginalExperiment:
    rows: pd.DataFrame
    summary: pd.DataFrame
    slopes: Dict[int, float]

    def write(self, rows_path, summary_path=None):
        self.rows.to_csv(rows_path, index=False, float_format="%.17g")
        if summary_path is not None:
            self.summary.to_csv(summary_path, index=False, float_format="%.17g")


def _marginal_task(task):
    a, b, cost, m, k, rep, seed, delta, block_size = task
    draw_seed = derive_seed(seed, m, k, rep)
    cfg = MinibatchConfig(m=m, k=k, seed=draw_seed, loss="W", block_size=block_size)
    plan = plan_subsampled(a, b, cost, cfg)
    rows = plan.row_sums()
    cols = plan.col_sums()
    row_l1 = float(np.abs(rows - 1.0 / a.n).sum())
    col_l1 = float(np.abs(cols - 1.0 / b.n).sum())
    row_dev = np.abs(rows - 1.0 / a.n)
    bound = marginal_bound(k, delta)
    return {
        "m": m, "k": k, "rep": rep, "seed": draw_seed,
        "row_l1": row_l1, "col_l1": col_l1, "l1": row_l1 + col_l1,
        "max_row_deviation": float(row_dev.max()),
        "max_col_deviation": float(np.abs(cols - 1.0 / b.n).max()),
        "marginal_bound": bound,
        "rows_within_bound": float(np.mean(row_dev <= bound)),
    }


def run_marginal_experiment(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                            m_list: Sequence[int], k_list: Sequence[int], reps: int, seed: int,
                            delta: float = 0.1, jobs: int = 1, block_size: int = 256) -> MarginalExperiment:
    """L1 marginal error of the subsampled plan over a (m, k) grid"""
    _check_delta(delta)
    for m in m_list:
        if m > min(a.n, b.n):
            raise ValueError(f"Batch size m={m} exceeds cloud size {min(a.n, b.n)}")
    tasks = [(a, b, cost, m, k, rep, seed, delta, block_size)
             for m in sorted(m_list) for k in sorted(k_list) for rep in range(reps)]
    logger.info(f"Marginal experiment: m={sorted(m_list)}, k={sorted(k_list)}, {reps} reps")
    rows = pd.DataFrame(list(ordered_map(_marginal_task, tasks, jobs)))
    summary = (rows.groupby(["m", "k"])
               .agg(mean_l1=("l1", "mean"), std_l1=("l1", "std"),
                    coverage=("rows_within_bound", "mean"), marginal_bound=("marginal_bound", "first"))
               .reset_index())
    slopes = {}
    for m, group in summary.groupby("m"):
        if len(group) >= 2 and np.all(group["mean_l1"] > 0):
            slopes[int(m)] = loglog_slope(group["k"], group["mean_l1"])
    for m, slope in slopes.items():
        logger.info(f"Marginal error slope for m={m}: {slope:.3f}")
    return MarginalExperiment(rows, summary, slopes)


def diameter_bound(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                   exact_limit: int = 2000) -> float:
    """Ground-cost bound over the union of both supports"""
    return cost_bound(cost, support_diameter(a, b, exact_limit))
