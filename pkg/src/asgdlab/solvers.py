"""Tail-averaged accelerated SGD, the tail-averaged SGD baseline and the risk bound report.

All runners are vectorized over independent replicates: the iterate arrays have
shape ``(replicates, d)`` and each step costs one oracle call per replicate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import AsgdParams, ProblemInstance
from .oracle import SeedLike, batch_gradients, draw_samples, excess_risk, make_rng

BLOCK_STEPS = 1024
TRACE_TAIL = "tail"
TRACE_ITERATE = "iterate"


@dataclass
class RunResult:
    """Outcome of a single replicate."""

    solver: str
    n: int
    tail_start: int
    tail_average: np.ndarray
    final_iterate: np.ndarray
    final_risk: float
    oracle_calls: int
    trace_steps: np.ndarray
    trace_risks: np.ndarray
    # True where the recorded risk is that of the running tail average,
    # False where it is the current iterate (before averaging starts).
    trace_averaged: np.ndarray
    iterates: Optional[np.ndarray] = None
    params: Optional[AsgdParams] = None
    seed: object = None


class PerReplicateSource:
    """One generator per replicate so each replicate's stream depends only on its seed."""

    def __init__(self, instance: ProblemInstance, seeds: Sequence[SeedLike]):
        self.instance = instance
        self.rngs = [make_rng(s) for s in seeds]
        self.calls = 0

    @property
    def replicates(self) -> int:
        return len(self.rngs)

    def block(self, m: int):
        draws = [draw_samples(self.instance, rng, m) for rng in self.rngs]
        a = np.stack([d[0] for d in draws], axis=1)
        b = np.stack([d[1] for d in draws], axis=1)
        self.calls += m * len(self.rngs)
        return a, b


class SharedSource:
    """A single generator feeding many i.i.d. replicates; fastest for large Monte Carlo batches."""

    def __init__(self, instance: ProblemInstance, replicates: int, rng: np.random.Generator):
        self.instance = instance
        self.rng = rng
        self._replicates = int(replicates)
        self.calls = 0

    @property
    def replicates(self) -> int:
        return self._replicates

    def block(self, m: int):
        a, b = draw_samples(self.instance, self.rng, m * self._replicates)
        d = self.instance.dim
        self.calls += m * self._replicates
        return a.reshape(m, self._replicates, d), b.reshape(m, self._replicates)


def _check_horizon(n: int, t: int):
    if n < 1:
        raise ValueError("n must be at least 1")
    if not (0 <= t < n):
        raise ValueError(f"tail start must satisfy 0 <= t < n, got t={t}, n={n}")


def _broadcast_start(x, d: int, reps: int, default: np.ndarray) -> np.ndarray:
    if x is None:
        x = default
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != d:
        raise ValueError(f"starting point has dimension {x.shape[-1]}, expected {d}")
    return np.broadcast_to(x, (reps, d)).copy()


def _default_stride(n: int) -> int:
    return max(1, n // 1000)


@dataclass
class _Trajectory:
    tail_sum: np.ndarray
    final: np.ndarray
    trace_steps: list = field(default_factory=list)
    trace_risks: list = field(default_factory=list)
    trace_averaged: list = field(default_factory=list)
    iterates: Optional[list] = None
    y_tail_sum: Optional[np.ndarray] = None


def _drive(instance, n, t, step_fn, state, source, trace_stride, trace_mode, keep_iterates,
           current_x, y_of_state=None):
    """Shared step loop: draws samples in blocks, accumulates tail sums and the risk trace."""
    reps, d = source.replicates, instance.dim
    tail_sum = np.zeros((reps, d))
    y_tail_sum = np.zeros((reps, d)) if y_of_state is not None else None
    traj = _Trajectory(tail_sum=tail_sum, final=None, y_tail_sum=y_tail_sum)
    if keep_iterates:
        traj.iterates = [current_x(state).copy()]
    stride = trace_stride if trace_stride else _default_stride(n)
    j = 0
    while j < n:
        m = min(BLOCK_STEPS, n - j)
        a_blk, b_blk = source.block(m)
        for k in range(m):
            j += 1
            state = step_fn(state, a_blk[k], b_blk[k])
            if j > t:
                tail_sum += current_x(state)
                if y_tail_sum is not None:
                    y_tail_sum += y_of_state(state)
            if keep_iterates:
                traj.iterates.append(current_x(state).copy())
            if j % stride == 0 or j == n:
                if trace_mode == TRACE_TAIL and j > t:
                    point, averaged = tail_sum / (j - t), True
                else:
                    point, averaged = current_x(state), False
                traj.trace_steps.append(j)
                traj.trace_risks.append(excess_risk(instance, point))
                traj.trace_averaged.append(averaged)
    traj.final = current_x(state)
    return traj


def _package(solver, instance, n, t, traj, calls_per_rep, seeds, params=None) -> list:
    reps = traj.tail_sum.shape[0]
    avg = traj.tail_sum / (n - t)
    risks = excess_risk(instance, avg)
    steps = np.asarray(traj.trace_steps, dtype=int)
    trace = np.asarray(traj.trace_risks).reshape(len(steps), reps)
    averaged = np.asarray(traj.trace_averaged, dtype=bool)
    iterates = np.stack(traj.iterates, axis=1) if traj.iterates is not None else None
    out = []
    for r in range(reps):
        out.append(RunResult(
            solver=solver, n=n, tail_start=t, tail_average=avg[r].copy(),
            final_iterate=traj.final[r].copy(), final_risk=float(risks[r]),
            oracle_calls=calls_per_rep, trace_steps=steps,
            trace_risks=trace[:, r].copy(), trace_averaged=averaged,
            iterates=None if iterates is None else iterates[r], params=params,
            seed=seeds[r],
        ))
    return out


def asgd_update(params: AsgdParams, x, v, a, b):
    """One ASGD step on stacked rows; returns ``(y, x_next, v_next)``."""
    alpha, beta = params.alpha, params.beta
    y = alpha * x + (1.0 - alpha) * v
    g = batch_gradients(y, a, b)
    x_new = y - params.delta * g
    v_new = beta * y + (1.0 - beta) * v - params.gamma * g
    return y, x_new, v_new


def _asgd_step(params: AsgdParams):
    def step(state, a, b):
        _, x_new, v_new = asgd_update(params, state[0], state[1], a, b)
        return x_new, v_new

    return step


def asgd_run_batch(instance: ProblemInstance, params: AsgdParams, n: int,
                   t: Optional[int] = None, seeds: Sequence[SeedLike] = (0,),
                   x0=None, v0=None, trace_stride: Optional[int] = None,
                   trace_mode: str = TRACE_TAIL, keep_iterates: bool = False) -> list:
    """Run tail-averaged ASGD once per seed; returns one ``RunResult`` per seed."""
    t = n // 2 if t is None else int(t)
    _check_horizon(n, t)
    source = PerReplicateSource(instance, seeds)
    d, reps = instance.dim, source.replicates
    x = _broadcast_start(x0, d, reps, np.zeros(d))
    v = x.copy() if v0 is None else _broadcast_start(v0, d, reps, x[0])
    traj = _drive(instance, n, t, _asgd_step(params), (x, v), source, trace_stride,
                  trace_mode, keep_iterates, current_x=lambda s: s[0])
    return _package("asgd", instance, n, t, traj, source.calls // reps, list(seeds), params)


def asgd_run(instance: ProblemInstance, params: AsgdParams, n: int,
             t: Optional[int] = None, seed: SeedLike = 0, x0=None, v0=None,
             trace_stride: Optional[int] = None, trace_mode: str = TRACE_TAIL,
             keep_iterates: bool = False) -> RunResult:
    """Tail-averaged ASGD on ``n`` samples, averaging the iterates after step ``t``."""
    return asgd_run_batch(instance, params, n, t, [seed], x0, v0, trace_stride,
                          trace_mode, keep_iterates)[0]


def default_sgd_step(instance: ProblemInstance) -> float:
    return 1.0 / (2.0 * instance.R2)


def _sgd_step(eta: float):
    def step(x, a, b):
        return x - eta * batch_gradients(x, a, b)

    return step


def sgd_run_batch(instance: ProblemInstance, n: int, t: Optional[int] = None,
                  seeds: Sequence[SeedLike] = (0,), step_size: Optional[float] = None,
                  x0=None, trace_stride: Optional[int] = None,
                  trace_mode: str = TRACE_TAIL, keep_iterates: bool = False) -> list:
    """Tail-averaged constant-step SGD, one ``RunResult`` per seed."""
    eta = default_sgd_step(instance) if step_size is None else float(step_size)
    if not (eta > 0.0 and eta * instance.R2 < 1.0):
        raise ValueError(f"SGD step size must satisfy 0 < eta*R^2 < 1, got {eta * instance.R2}")
    t = n // 2 if t is None else int(t)
    _check_horizon(n, t)
    source = PerReplicateSource(instance, seeds)
    d, reps = instance.dim, source.replicates
    x = _broadcast_start(x0, d, reps, np.zeros(d))
    traj = _drive(instance, n, t, _sgd_step(eta), x, source, trace_stride, trace_mode,
                  keep_iterates, current_x=lambda s: s)
    return _package("sgd", instance, n, t, traj, source.calls // reps, list(seeds))


def sgd_run(instance: ProblemInstance, n: int, t: Optional[int] = None, seed: SeedLike = 0,
            step_size: Optional[float] = None, x0=None, trace_stride: Optional[int] = None,
            trace_mode: str = TRACE_TAIL, keep_iterates: bool = False) -> RunResult:
    return sgd_run_batch(instance, n, t, [seed], step_size, x0, trace_stride, trace_mode,
                         keep_iterates)[0]


def simulate_centered_tail(instance: ProblemInstance, params: AsgdParams, theta0, n: int,
                           t: int, runs: int, rng: np.random.Generator) -> np.ndarray:
    """Monte Carlo draws of the tail-averaged centered state.

    The state after step ``j`` is ``(x_j - x*, y_j - x*)`` with
    ``y_j = alpha x_j + (1 - alpha) v_j``.  The starting ``v_0`` is chosen so that the
    initial state equals ``theta0``.  Returns an array of shape ``(runs, 2d)``.
    """
    _check_horizon(n, t)
    d = instance.dim
    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    if theta0.size != 2 * d:
        raise ValueError(f"theta0 must have length {2 * d}")
    alpha = params.alpha
    x0 = instance.x_star + theta0[:d]
    y0 = instance.x_star + theta0[d:]
    v0 = (y0 - alpha * x0) / (1.0 - alpha)
    source = SharedSource(instance, runs, rng)
    state = (np.broadcast_to(x0, (runs, d)).copy(), np.broadcast_to(v0, (runs, d)).copy())
    traj = _drive(instance, n, t, _asgd_step(params), state, source, n, TRACE_ITERATE, False,
                  current_x=lambda s: s[0],
                  y_of_state=lambda s: alpha * s[0] + (1.0 - alpha) * s[1])
    m = n - t
    return np.hstack([traj.tail_sum / m - instance.x_star,
                      traj.y_tail_sum / m - instance.x_star])


@dataclass(frozen=True)
class BoundReport:
    """Terms of the non-asymptotic excess-risk bound for tail-averaged ASGD."""

    n: int
    tail_start: int
    initial_excess: float
    leading_bias: float
    leading_variance: float
    lower_order_bias: float
    lower_order_variance: float
    vanishing_variance: float
    total: float
    half_tail_rate: float
    constant: float


def excess_risk_bound(instance: ProblemInstance, params: AsgdParams, n: int,
                   t: Optional[int] = None, x0=None, constant: float = 1.0) -> BoundReport:
    """Evaluate each term of the excess-risk bound.

    ``constant`` is the unspecified universal constant multiplying the
    non-leading terms; the leading variance ``5 sigma^2 d / (n - t)`` carries none.
    ``half_tail_rate`` is the simplified bound for ``t = floor(n/2)``.
    """
    t = n // 2 if t is None else int(t)
    _check_horizon(n, t)
    d, sigma2 = instance.dim, instance.sigma2
    kappa, kk = instance.kappa, instance.kappa * instance.kappa_tilde
    root = np.sqrt(kk)
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    delta_p = float(excess_risk(instance, x0))
    m = n - t
    C = constant
    leading_bias = C * kk ** 2.25 * d * kappa / m ** 2 * np.exp(-t / (9.0 * root)) * delta_p
    leading_variance = 5.0 * sigma2 * d / m
    lower_bias = C * kk ** 1.25 * d * kappa * np.exp(-n / (9.0 * root)) * delta_p
    lower_variance = C * sigma2 * d * root / m ** 2
    vanishing = (C * np.exp(-n / (9.0 * root))
                 * (sigma2 * d * kk ** 1.75 + sigma2 * d * kk ** 3.5 * instance.kappa_tilde / m ** 2)
                 + C * sigma2 * d / m * kk ** 2.75 * np.exp(-(m - 1) / (30.0 * root)))
    total = leading_bias + leading_variance + lower_bias + lower_variance + vanishing
    half_tail = C * np.exp(-n / (20.0 * root)) * delta_p + 11.0 * sigma2 * d / n
    return BoundReport(
        n=n, tail_start=t, initial_excess=delta_p,
        leading_bias=float(leading_bias), leading_variance=float(leading_variance),
        lower_order_bias=float(lower_bias), lower_order_variance=float(lower_variance),
        vanishing_variance=float(vanishing), total=float(total),
        half_tail_rate=float(half_tail), constant=float(C),
    )
