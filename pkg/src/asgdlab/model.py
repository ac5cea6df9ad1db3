"""Problem instances, condition numbers and ASGD parameter derivation.

Two input distributions are supported:

* ``discrete``: the input is a standard basis vector ``e_i`` drawn with
  probability ``p_i``.  Then ``H = diag(p)`` and ``||a||^2 = 1`` always.
* ``gaussian``: the input is ``N(0, diag(lam))``.

Responses follow ``b = <a, x_star> + eps`` with ``eps`` independent of ``a``,
Gaussian with variance ``sigma2``.  Under this additive model the noise
covariance ``E[eps^2 a a^T]`` equals ``sigma2 * H``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

DISCRETE = "discrete"
GAUSSIAN = "gaussian"
_KINDS = (DISCRETE, GAUSSIAN)

# Default tuning constants.  With these the generic parameter formulas reduce
# to the simple closed forms used in ``derive_asgd_params``.
DEFAULT_C1 = 1.0 / 5.0
DEFAULT_C2 = np.sqrt(5.0) / 9.0
DEFAULT_C3 = np.sqrt(5.0) / 3.0
DEFAULT_C4 = 1.0 / 9.0


@dataclass(frozen=True)
class DistributionSpec:
    """Input distribution: ``weights`` are probabilities (discrete) or eigenvalues (gaussian)."""

    kind: str
    weights: np.ndarray

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size == 0:
            raise ValueError("distribution needs at least one coordinate")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if self.kind == DISCRETE:
            if np.any(w < 0):
                raise ValueError("probabilities must be nonnegative")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"probabilities must sum to 1, got {w.sum()!r}")
        if np.any(w <= 0):
            raise ValueError("H must be positive definite (all weights > 0)")
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return int(self.weights.size)


@dataclass(frozen=True)
class NoiseModel:
    """Additive Gaussian response noise with variance ``sigma2``."""

    sigma2: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.sigma2) or self.sigma2 < 0:
            raise ValueError("noise variance must be a finite nonnegative number")


@dataclass(frozen=True)
class ProblemInstance:
    """A fully specified least-squares problem with its derived constants."""

    dist: DistributionSpec
    noise: NoiseModel
    x_star: np.ndarray
    H: np.ndarray
    noise_cov: np.ndarray
    mu: float
    R2: float
    kappa: float
    kappa_tilde: float

    @property
    def dim(self) -> int:
        return self.dist.dim

    @property
    def kind(self) -> str:
        return self.dist.kind

    @property
    def sigma2(self) -> float:
        return self.noise.sigma2

    @property
    def h_diag(self) -> np.ndarray:
        return self.dist.weights


def fourth_moment_map(dist: DistributionSpec, S: np.ndarray) -> np.ndarray:
    """Exact ``E[(a^T S a) a a^T]`` for a (not necessarily symmetric) matrix ``S``."""
    S = np.asarray(S, dtype=float)
    w = dist.weights
    if dist.kind == DISCRETE:
        return np.diag(w * np.diag(S))
    H = np.diag(w)
    trace_term = float(np.sum(np.diag(S) * w))
    hsh = w[:, None] * S * w[None, :]
    return trace_term * H + hsh + hsh.T


def _condition_numbers(dist: DistributionSpec):
    w = dist.weights
    mu = float(w.min())
    if dist.kind == DISCRETE:
        R2 = 1.0
        kappa_tilde = 1.0 / mu
    else:
        R2 = float(w.sum() + 2.0 * w.max())
        kappa_tilde = float(dist.dim + 2)
    return mu, R2, R2 / mu, kappa_tilde


def build_instance(dist: DistributionSpec, noise: Optional[NoiseModel] = None,
                   x_star: Optional[np.ndarray] = None) -> ProblemInstance:
    """Construct an instance, computing H, noise covariance and condition numbers."""
    noise = noise if noise is not None else NoiseModel()
    d = dist.dim
    if x_star is None:
        x_star = np.zeros(d)
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    if x_star.size != d:
        raise ValueError(f"x_star has dimension {x_star.size}, expected {d}")
    H = np.diag(dist.weights)
    mu, R2, kappa, kappa_tilde = _condition_numbers(dist)
    return ProblemInstance(
        dist=dist, noise=noise, x_star=x_star, H=H,
        noise_cov=noise.sigma2 * H, mu=mu, R2=R2,
        kappa=kappa, kappa_tilde=kappa_tilde,
    )


def discrete_instance(probabilities, sigma2: float = 0.0, x_star=None) -> ProblemInstance:
    return build_instance(DistributionSpec(DISCRETE, np.asarray(probabilities, float)),
                          NoiseModel(sigma2), x_star)


def gaussian_instance(eigenvalues, sigma2: float = 0.0, x_star=None) -> ProblemInstance:
    return build_instance(DistributionSpec(GAUSSIAN, np.asarray(eigenvalues, float)),
                          NoiseModel(sigma2), x_star)


def _close(a: float, b: float, rel: float = 1e-12) -> bool:
    return abs(a - b) <= rel * max(abs(a), abs(b))


@dataclass(frozen=True)
class TuningConstants:
    """Constants of the step-size family.

    Only ``c1`` and ``c4`` are free: ``c2 = sqrt(c4 / (2 - c1))`` and
    ``c3 = c2 sqrt(2 c1 - c1^2) / c1``.  Use ``from_free`` to derive the other two.
    """

    c1: float = DEFAULT_C1
    c2: float = DEFAULT_C2
    c3: float = DEFAULT_C3
    c4: float = DEFAULT_C4

    def __post_init__(self):
        if not (0.0 < self.c1 < 0.5):
            raise ValueError(f"c1 must lie in (0, 1/2), got {self.c1}")
        if not (0.0 < self.c4 < 1.0 / 6.0):
            raise ValueError(f"c4 must lie in (0, 1/6), got {self.c4}")
        if not _close(self.c2 ** 2, self.c4 / (2.0 - self.c1)):
            raise ValueError("c2 must satisfy c2^2 = c4 / (2 - c1)")
        if not _close(self.c3, self.c2 * self.root / self.c1):
            raise ValueError("c3 must satisfy c3 = c2 sqrt(2 c1 - c1^2) / c1")

    @classmethod
    def from_free(cls, c1: float, c4: float) -> "TuningConstants":
        if not (0.0 < c1 < 0.5):
            raise ValueError(f"c1 must lie in (0, 1/2), got {c1}")
        c2 = float(np.sqrt(c4 / (2.0 - c1))) if c4 > 0 else 0.0
        c3 = c2 * float(np.sqrt(2.0 * c1 - c1 ** 2)) / c1
        return cls(c1, c2, c3, c4)

    @property
    def root(self) -> float:
        """``sqrt(2 c1 - c1^2)``; equals 0.6 for the defaults."""
        return float(np.sqrt(2.0 * self.c1 - self.c1 ** 2))

    @property
    def is_default(self) -> bool:
        return (_close(self.c1, DEFAULT_C1) and _close(self.c2, DEFAULT_C2)
                and _close(self.c3, DEFAULT_C3) and _close(self.c4, DEFAULT_C4))


@dataclass(frozen=True)
class AsgdParams:
    """Step-size parameters plus the derived combinations ``c`` and ``g_hat``."""

    alpha: float
    beta: float
    gamma: float
    delta: float
    constants: TuningConstants = field(default_factory=TuningConstants)

    @property
    def c(self) -> float:
        return self.alpha * (1.0 - self.beta)

    @property
    def g_hat(self) -> float:
        return self.alpha * self.delta + (1.0 - self.alpha) * self.gamma

    @property
    def gap(self) -> float:
        """``g_hat - c*delta``, written in a cancellation-free form."""
        a, b = self.alpha, self.beta
        return a * b * self.delta + (1.0 - a) * self.gamma


def derive_asgd_params(instance: ProblemInstance,
                       constants: Optional[TuningConstants] = None) -> AsgdParams:
    """Step sizes for tail-averaged ASGD from the instance's condition numbers."""
    constants = constants if constants is not None else TuningConstants()
    s = float(np.sqrt(instance.kappa * instance.kappa_tilde))
    mu, R2 = instance.mu, instance.R2
    if constants.is_default:
        k = 3.0 * np.sqrt(5.0) * s
        alpha = k / (1.0 + k)
        beta = 1.0 / (9.0 * s)
        gamma = 1.0 / (3.0 * np.sqrt(5.0) * mu * s)
        delta = 1.0 / (5.0 * R2)
    else:
        q = constants.c2 * constants.root
        alpha = s / (q + s)
        beta = constants.c3 * q / s
        gamma = q / (mu * s)
        delta = constants.c1 / R2
    params = AsgdParams(float(alpha), float(beta), float(gamma), float(delta), constants)
    if not (0.0 < params.alpha < 1.0 and 0.0 < params.beta < 1.0
            and params.gamma > 0.0 and params.delta > 0.0):
        raise ValueError(f"derived parameters are out of range: {params}")
    return params


@dataclass(frozen=True)
class MomentEstimate:
    """Monte Carlo estimates of the smallest valid fourth-moment constants."""

    R2: float
    R2_stderr: float
    kappa_tilde: float
    kappa_tilde_stderr: float
    fourth_moment: np.ndarray
    fourth_moment_stderr: np.ndarray
    weighted_moment: np.ndarray
    weighted_moment_stderr: np.ndarray
    n_samples: int


def _largest_generalized_eig(M: np.ndarray, H: np.ndarray) -> float:
    return float(scipy.linalg.eigh(0.5 * (M + M.T), H, eigvals_only=True)[-1])


def estimate_moment_constants(instance: ProblemInstance, n_samples: int,
                              rng: np.random.Generator, n_batches: int = 20,
                              chunk: int = 100_000) -> MomentEstimate:
    """Estimate ``R^2`` and ``kappa_tilde`` from sampled inputs.

    ``R^2`` is the largest generalized eigenvalue of ``E[||a||^2 a a^T]``
    against ``H`` and ``kappa_tilde`` is that of ``E[||a||^2_{H^-1} a a^T]``.
    Standard errors come from batch means.
    """
    from .oracle import draw_inputs

    if n_samples < n_batches * 2:
        raise ValueError("too few samples for the requested number of batches")
    d = instance.dim
    H = instance.H
    h_inv = 1.0 / instance.h_diag
    sizes = np.full(n_batches, n_samples // n_batches)
    sizes[: n_samples % n_batches] += 1
    m4 = np.zeros((n_batches, d, d))
    mw = np.zeros((n_batches, d, d))
    for k, size in enumerate(sizes):
        remaining = int(size)
        while remaining > 0:
            m = min(chunk, remaining)
            a = draw_inputs(instance, rng, m)
            sq = np.einsum("ij,ij->i", a, a)
            wsq = (a * a) @ h_inv
            m4[k] += np.einsum("i,ij,ik->jk", sq, a, a)
            mw[k] += np.einsum("i,ij,ik->jk", wsq, a, a)
            remaining -= m
        m4[k] /= size
        mw[k] /= size
    weights = sizes / sizes.sum()
    full4 = np.tensordot(weights, m4, axes=1)
    fullw = np.tensordot(weights, mw, axes=1)
    se = lambda batches: batches.std(axis=0, ddof=1) / np.sqrt(n_batches)
    r2_batches = np.array([_largest_generalized_eig(m, H) for m in m4])
    kt_batches = np.array([_largest_generalized_eig(m, H) for m in mw])
    return MomentEstimate(
        R2=_largest_generalized_eig(full4, H),
        R2_stderr=float(se(r2_batches)),
        kappa_tilde=_largest_generalized_eig(fullw, H),
        kappa_tilde_stderr=float(se(kt_batches)),
        fourth_moment=full4, fourth_moment_stderr=se(m4),
        weighted_moment=fullw, weighted_moment_stderr=se(mw),
        n_samples=int(n_samples),
    )
