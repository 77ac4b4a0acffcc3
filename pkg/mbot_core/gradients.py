# mbot_core/gradients.py - Danskin gradients, finite differences and minibatch gradient flows
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd

from mbot_core.core_ot import SinkhornParams, sinkhorn
from mbot_core.distributions import CostSpec, DiscreteDistribution
from mbot_core.minibatch import (
    MinibatchConfig,
    SEMIDISCRETE_STREAM,
    draw_subsets,
    enumeration_source,
    pair_source,
    check_enumeration,
    evaluate_stack,
)
from mbot_core.parallel import ordered_map

logger = logging.getLogger(__name__)

SMOOTH_LOSSES = ("W_eps", "S_eps")


class FlowDivergenceError(RuntimeError):
    """Raised when the flow loss blows up; carries the partial trajectory"""

    def __init__(self, message: str, trajectory: "Trajectory"):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class GradField:
    values: np.ndarray
    stale: bool = False

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass
class FlowConfig:
    step_size: float = 0.05
    iters: int = 750
    cfg: MinibatchConfig = field(default_factory=lambda: MinibatchConfig(loss="S_eps", k=10))
    record_every: int = 50
    max_loss_ratio: float = 10.0
    scale_by_batch_size: bool = True
    loss_floor: float = 1e-6

    def __post_init__(self):
        if self.step_size < 0:
            raise ValueError(f"step_size must be nonnegative, got {self.step_size}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.record_every < 1:
            raise ValueError(f"record_every must be >= 1, got {self.record_every}")
        if self.loss_floor <= 0:
            raise ValueError(f"loss_floor must be positive, got {self.loss_floor}")
        if self.cfg.loss not in SMOOTH_LOSSES:
            raise ValueError(f"Gradient flows need a smooth loss {SMOOTH_LOSSES}, got '{self.cfg.loss}'")

    def diverged(self, value: float, initial: float) -> bool:
        """Non-finite loss, or a loss above max_loss_ratio times the initial magnitude

        The magnitude is floored at ``loss_floor`` so a flow starting near zero
        (or below it, as W_eps can) is not stopped by ordinary fluctuations.
        """
        if not np.isfinite(value):
            return True
        return value > self.max_loss_ratio * max(abs(initial), self.loss_floor)


@dataclass
class Trajectory:
    """Snapshots and per-step losses of a flow

    ``descent_trace[s]`` holds step s's batch loss before and after its own
    update, evaluated on the same batch pairs.
    """

    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)
    loss_trace: List[float] = field(default_factory=list)
    descent_trace: List[Tuple[float, float]] = field(default_factory=list)
    stale_steps: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[max(self.snapshots)]

    @property
    def steps(self) -> List[int]:
        return sorted(self.snapshots)

    def descent_fraction(self) -> float:
        """Share of steps whose update did not increase their own batch loss"""
        if not self.descent_trace:
            return float("nan")
        pairs = np.asarray(self.descent_trace)
        return float(np.mean(pairs[:, 1] <= pairs[:, 0]))


def _check_smooth(loss: str):
    if loss not in SMOOTH_LOSSES:
        raise ValueError(f"The unregularised loss W is not differentiable; use one of {SMOOTH_LOSSES}")


def _check_clouds(a: DiscreteDistribution, b: DiscreteDistribution):
    if a.dim != b.dim:
        raise ValueError(f"Dimension mismatch: fixed d={a.dim}, moving d={b.dim}")


# ---------------------------------------------------------------------------
# Full-cloud gradients
# ---------------------------------------------------------------------------


def _cross_gradient(plan: np.ndarray, G: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...ijd->...jd", plan, G)


def _self_gradient(plan: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Gradient of <Q, C(y, y)> with y in both arguments, halved"""
    first = np.einsum("...lj,...ljd->...ld", plan, G)
    second = np.einsum("...il,...ild->...ld", plan, G)
    return 0.5 * (second - first)


def grad_entropic_positions(a_fixed: DiscreteDistribution, b_moving: DiscreteDistribution,
                            cost: CostSpec, p: SinkhornParams) -> GradField:
    """Gradient of W_eps(a, b) with respect to the points of b, plan held fixed"""
    _check_clouds(a_fixed, b_moving)
    result = sinkhorn(a_fixed, b_moving, cost, p)
    G = cost.gradient_y(a_fixed.points, b_moving.points)
    if not result.converged:
        logger.warning(f"Sinkhorn did not converge (residual {result.residual:.3e}); gradient is stale")
    return GradField(_cross_gradient(result.plan.matrix, G), stale=not result.converged)


def grad_divergence_positions(a_fixed: DiscreteDistribution, b_moving: DiscreteDistribution,
                              cost: CostSpec, p: SinkhornParams) -> GradField:
    """Gradient of S_eps(a, b) with respect to the points of b"""
    _check_clouds(a_fixed, b_moving)
    cross = sinkhorn(a_fixed, b_moving, cost, p)
    own = sinkhorn(b_moving, b_moving, cost, p)
    G_cross = cost.gradient_y(a_fixed.points, b_moving.points)
    G_self = cost.gradient_y(b_moving.points, b_moving.points)
    values = _cross_gradient(cross.plan.matrix, G_cross) - _self_gradient(own.plan.matrix, G_self)
    stale = not (cross.converged and own.converged)
    if stale:
        logger.warning("Sinkhorn did not converge on every term; divergence gradient is stale")
    return GradField(values, stale=stale)


# ---------------------------------------------------------------------------
# Minibatch gradients
# ---------------------------------------------------------------------------


def batch_gradients(XA: np.ndarray, YB: np.ndarray, cost: CostSpec,
                    cfg: MinibatchConfig) -> Tuple[np.ndarray, np.ndarray, int]:
    """Per-batch losses (count,), gradients w.r.t. YB (count, m, d) and non-converged count"""
    _check_smooth(cfg.loss)
    count, m, d = XA.shape
    values = np.empty(count)
    grads = np.empty((count, m, d))
    nonconverged = 0
    chunk = max(1, cfg.dense_cap // (m * m * max(1, d)))
    for s in range(0, count, chunk):
        sl = slice(s, min(s + chunk, count))
        res = evaluate_stack(XA[sl], YB[sl], cost, cfg, want_plans=True)
        g = _cross_gradient(res.plans, cost.gradient_y(XA[sl], YB[sl]))
        if cfg.loss == "S_eps":
            g = g - _self_gradient(res.plans_bb, cost.gradient_y(YB[sl], YB[sl]))
        values[sl] = res.values
        grads[sl] = g
        nonconverged += res.nonconverged
    return values, grads, nonconverged


def _scatter_blocks(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec,
                    cfg: MinibatchConfig, get_pairs, total: int) -> Tuple[float, GradField]:
    starts = range(0, total, cfg.block_size)

    def work(start):
        count = min(cfg.block_size, total - start)
        A, B = get_pairs(start, count)
        return B, batch_gradients(a.points[A], b.points[B], cost, cfg)

    out = np.zeros_like(b.points)
    loss_sum = 0.0
    nonconverged = 0
    for B, (values, grads, bad) in ordered_map(work, starts, cfg.jobs):
        np.add.at(out, B, grads)
        loss_sum += values.sum()
        nonconverged += bad
    if nonconverged:
        logger.warning(f"{nonconverged} batch solves did not converge; minibatch gradient is stale")
    return loss_sum / total, GradField(out / total, stale=nonconverged > 0)


def minibatch_value_and_grad(a_fixed: DiscreteDistribution, b_moving: DiscreteDistribution,
                             cost: CostSpec, cfg: MinibatchConfig) -> Tuple[float, GradField]:
    """Subsampled loss and its gradient from the same k batch pairs"""
    _check_smooth(cfg.loss)
    _check_clouds(a_fixed, b_moving)
    cfg.validate(a_fixed.n, b_moving.n)
    get_pairs = pair_source(cfg, a_fixed.n, b_moving.n)
    return _scatter_blocks(a_fixed, b_moving, cost, cfg, get_pairs, cfg.k)


def grad_minibatch(a_fixed: DiscreteDistribution, b_moving: DiscreteDistribution,
                   cost: CostSpec, cfg: MinibatchConfig) -> GradField:
    """Average over k sampled pairs of the per-batch gradient, scattered to full size"""
    return minibatch_value_and_grad(a_fixed, b_moving, cost, cfg)[1]


def grad_minibatch_exact(a_fixed: DiscreteDistribution, b_moving: DiscreteDistribution,
                         cost: CostSpec, cfg: MinibatchConfig) -> GradField:
    """Gradient of the complete U-statistic, enumerating every batch pair"""
    _check_smooth(cfg.loss)
    _check_clouds(a_fixed, b_moving)
    if a_fixed.n != b_moving.n:
        raise ValueError(f"Size mismatch: fixed has {a_fixed.n} points, moving has {b_moving.n}")
    cfg.validate(a_fixed.n)
    check_enumeration(a_fixed.n, cfg.m, cfg.enumeration_cap)
    get_pairs, total = enumeration_source(a_fixed.n, cfg.m)
    return _scatter_blocks(a_fixed, b_moving, cost, cfg, get_pairs, total)[1]


@dataclass
class ShiftGradient:
    """Monte-Carlo gradient of E h(A, Z + shift) with per-draw samples kept"""

    mean: np.ndarray
    stderr: np.ndarray
    mean_loss: float
    per_draw_grad: np.ndarray
    per_draw_loss: np.ndarray


def _shift_draws(a: DiscreteDistribution, beta_sampler, shift: np.ndarray, cost: CostSpec,
                 cfg: MinibatchConfig, draws: int, with_grad: bool):
    if draws < 1:
        raise ValueError(f"draws must be >= 1, got {draws}")
    cfg.validate(a.n)
    shift = np.asarray(shift, dtype=np.float64).reshape(1, 1, -1)
    if shift.shape[2] != a.dim:
        raise ValueError(f"Shift has d={shift.shape[2]}, source has d={a.dim}")
    rng = np.random.default_rng([cfg.seed, cfg.stream, SEMIDISCRETE_STREAM])
    losses = np.empty(draws)
    grads = np.empty((draws, a.dim)) if with_grad else None
    done = 0
    while done < draws:
        count = min(cfg.block_size, draws - done)
        A = draw_subsets(rng, a.n, cfg.m, count)
        Z = np.asarray(beta_sampler(rng, count * cfg.m), dtype=np.float64).reshape(count, cfg.m, a.dim)
        Y = Z + shift
        if with_grad:
            values, g, _ = batch_gradients(a.points[A], Y, cost, cfg)
            # d/d(shift) sums the per-point gradients
            grads[done:done + count] = g.sum(axis=1)
        else:
            values = evaluate_stack(a.points[A], Y, cost, cfg).values
        losses[done:done + count] = values
        done += count
    return losses, grads


def grad_semidiscrete_shift(a: DiscreteDistribution, beta_sampler, shift, cost: CostSpec,
                            cfg: MinibatchConfig, draws: int) -> ShiftGradient:
    """Gradient in the location family Y = Z + shift, Z ~ beta, with shared samples

    Uses the same random stream as :func:`semidiscrete_shift_loss`, so the
    two are paired draw by draw.
    """
    _check_smooth(cfg.loss)
    losses, grads = _shift_draws(a, beta_sampler, shift, cost, cfg, draws, with_grad=True)
    stderr = grads.std(axis=0, ddof=1) / np.sqrt(draws) if draws > 1 else np.zeros(a.dim)
    return ShiftGradient(grads.mean(axis=0), stderr, float(losses.mean()), grads, losses)


def semidiscrete_shift_loss(a: DiscreteDistribution, beta_sampler, shift, cost: CostSpec,
                            cfg: MinibatchConfig, draws: int) -> float:
    losses, _ = _shift_draws(a, beta_sampler, shift, cost, cfg, draws, with_grad=False)
    return float(losses.mean())


def finite_difference_oracle(loss_fn: Callable[[np.ndarray], float], points: np.ndarray,
                             step: float = 1e-5) -> GradField:
    """Central differences per coordinate"""
    if step <= 0:
        raise ValueError(f"Finite-difference step must be positive, got {step}")
    points = np.asarray(points, dtype=np.float64)
    grad = np.zeros_like(points)
    for idx in np.ndindex(points.shape):
        plus = points.copy()
        minus = points.copy()
        plus[idx] += step
        minus[idx] -= step
        grad[idx] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * step)
    return GradField(grad)


# ---------------------------------------------------------------------------
# Gradient flow
# ---------------------------------------------------------------------------


def gradient_flow(b0: DiscreteDistribution, a_target: DiscreteDistribution, cost: CostSpec,
                  fc: FlowConfig) -> Trajectory:
    """Euler steps x <- x - step * m * grad, fresh batch pairs every step

    loss_trace[s] is the estimate on step s's own batches before its update;
    the last entry is one extra evaluation at the final positions. Each step
    also re-evaluates its batches after the update (descent_trace), which
    doubles the solver work.
    """
    _check_clouds(a_target, b0)
    fc.cfg.validate(a_target.n, b0.n)
    scale = fc.cfg.m if fc.scale_by_batch_size else 1
    points = b0.points.copy()
    traj = Trajectory()
    traj.snapshots[0] = points.copy()
    initial = None
    logger.info(f"Gradient flow: {b0.n} points, {fc.iters} iterations, step {fc.step_size}, "
                f"m={fc.cfg.m}, k={fc.cfg.k}, loss={fc.cfg.loss}")

    for step in range(fc.iters + 1):
        cfg = fc.cfg.with_(stream=fc.cfg.stream + step + 1)
        value, grad = minibatch_value_and_grad(a_target, DiscreteDistribution(points), cost, cfg)
        traj.loss_trace.append(float(value))
        if grad.stale:
            traj.stale_steps += 1
        if initial is None:
            initial = value
        if fc.diverged(value, initial):
            traj.snapshots[step] = points.copy()
            raise FlowDivergenceError(
                f"Flow diverged at step {step}: loss {value:.6g} vs initial {initial:.6g}", traj)
        if step == fc.iters:
            break
        points = points - fc.step_size * scale * grad.values
        after, _ = minibatch_value_and_grad(a_target, DiscreteDistribution(points), cost, cfg)
        traj.descent_trace.append((float(value), float(after)))
        if (step + 1) % fc.record_every == 0 or step + 1 == fc.iters:
            traj.snapshots[step + 1] = points.copy()
            logger.info(f"Flow step {step + 1}/{fc.iters}: loss {value:.6g}")

    if traj.stale_steps:
        logger.warning(f"{traj.stale_steps} flow steps used stale gradients")
    logger.info(f"Flow finished: {traj.descent_fraction():.1%} of steps lowered their batch loss")
    return traj


def write_trajectory(traj: Trajectory, out_dir) -> List[str]:
    """One headerless CSV per snapshot, loss_trace.csv (step, loss) and
    descent_trace.csv (step, before, after)"""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for step in traj.steps:
        path = os.path.join(out_dir, f"snapshot_{step:06d}.csv")
        pd.DataFrame(traj.snapshots[step]).to_csv(path, header=False, index=False, float_format="%.17g")
        paths.append(path)
    trace_path = os.path.join(out_dir, "loss_trace.csv")
    pd.DataFrame({"step": np.arange(len(traj.loss_trace)), "loss": traj.loss_trace}).to_csv(
        trace_path, index=False, float_format="%.17g")
    paths.append(trace_path)
    descent_path = os.path.join(out_dir, "descent_trace.csv")
    descent = pd.DataFrame(traj.descent_trace, columns=["before", "after"])
    descent.insert(0, "step", np.arange(len(descent)))
    descent.to_csv(descent_path, index=False, float_format="%.17g")
    paths.append(descent_path)
    logger.info(f"Wrote {len(traj.snapshots)} snapshots and the loss traces to {out_dir}")
    return paths
