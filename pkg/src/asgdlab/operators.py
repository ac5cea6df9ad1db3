"""Exact expected-operator engine for the centered ASGD state.

The centered state is ``theta_j = (x_j - x*, y_j - x*)`` of length ``2d``.  Each step
applies a random linear map plus additive noise,
``theta_j = A_hat_j theta_{j-1} + zeta_j``, with

    A_hat = [[0, I - delta a a^T], [-c I, (1 + c) I - g_hat a a^T]]
    zeta  = (delta eps a, g_hat eps a)

Second moments evolve under ``S -> E[A_hat S A_hat^T]``.  Matrices ``S`` of shape
``(2d, 2d)`` are vectorized in row-major order, so ``S -> X S Y^T`` has the matrix
``kron(X, Y)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .model import AsgdParams, ProblemInstance, fourth_moment_map

MAX_OPERATOR_DIM = 8


def expected_transition(instance: ProblemInstance, params: AsgdParams) -> np.ndarray:
    """``E[A_hat]``."""
    d = instance.dim
    eye, H = np.eye(d), instance.H
    c, g = params.c, params.g_hat
    return np.block([[np.zeros((d, d)), eye - params.delta * H],
                     [-c * eye, (1.0 + c) * eye - g * H]])


def _split_factors(instance: ProblemInstance, params: AsgdParams):
    """Deterministic part ``V1`` and the mean of the data-dependent part ``V2``."""
    d = instance.dim
    eye, zero, H = np.eye(d), np.zeros((d, d)), instance.H
    c = params.c
    v1 = np.block([[zero, eye], [-c * eye, (1.0 + c) * eye]])
    v2 = np.block([[zero, -params.delta * H], [zero, -params.g_hat * H]])
    return v1, v2


def step_weights(params: AsgdParams) -> np.ndarray:
    """The 2x2 matrix ``[[delta^2, delta g], [delta g, g^2]]`` coupling the two halves."""
    dg = np.array([params.delta, params.g_hat])
    return np.outer(dg, dg)


def second_moment_map(instance: ProblemInstance, params: AsgdParams, S: np.ndarray) -> np.ndarray:
    """``E[A_hat S A_hat^T]`` evaluated in closed form."""
    d = instance.dim
    v1, v2 = _split_factors(instance, params)
    S = np.asarray(S, dtype=float)
    out = v1 @ S @ v1.T + v1 @ S @ v2.T + v2 @ S @ v1.T
    out += np.kron(step_weights(params), fourth_moment_map(instance.dist, S[d:, d:]))
    return out


def fluctuation_map(instance: ProblemInstance, params: AsgdParams, S: np.ndarray) -> np.ndarray:
    """``E[(A_hat - A) S (A_hat - A)^T]``, computed from its own closed form."""
    d = instance.dim
    S22 = np.asarray(S, dtype=float)[d:, d:]
    H = instance.H
    inner = fourth_moment_map(instance.dist, S22) - H @ S22 @ H
    return np.kron(step_weights(params), inner)


def _matrix_of(map_fn, size: int) -> np.ndarray:
    """Matrix of a linear map on ``size x size`` matrices, one basis matrix per column."""
    N = size * size
    out = np.empty((N, N))
    basis = np.zeros((size, size))
    for k in range(N):
        i, j = divmod(k, size)
        basis[i, j] = 1.0
        out[:, k] = map_fn(basis).reshape(-1)
        basis[i, j] = 0.0
    return out


@dataclass
class OperatorSet:
    """Expected-dynamics operators for one instance and parameter choice."""

    instance: ProblemInstance
    params: AsgdParams
    A: np.ndarray
    B_mat: np.ndarray
    D_mat: np.ndarray
    R_mat: np.ndarray
    Sigma_hat: np.ndarray
    P: np.ndarray
    Z: np.ndarray
    G: np.ndarray
    H_block: np.ndarray

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def apply_B(self, S: np.ndarray) -> np.ndarray:
        return (self.B_mat @ S.reshape(-1)).reshape(S.shape)

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.B_mat))))

    def resolve_A(self, S: np.ndarray) -> np.ndarray:
        """``(I - A)^{-1} S``."""
        return np.linalg.solve(np.eye(self.size) - self.A, S)

    def resolve_B(self, S: np.ndarray, power: int = 1) -> np.ndarray:
        """``(I - B)^{-power} S`` on matrices."""
        I_B = np.eye(self.B_mat.shape[0]) - self.B_mat
        v = S.reshape(-1)
        for _ in range(power):
            v = np.linalg.solve(I_B, v)
        return v.reshape(S.shape)

    def pair_op(self, S: np.ndarray) -> np.ndarray:
        """``S + (I - A)^{-1} A S + S A^T (I - A^T)^{-1}``."""
        left = self.resolve_A(self.A @ S)
        right = self.resolve_A(self.A @ S.T).T
        return S + left + right

    def potential(self, theta: np.ndarray) -> float:
        return float(theta @ self.G @ theta)


def potential_matrices(instance: ProblemInstance, params: AsgdParams):
    """``P`` maps the centered state to ``(x - x*, v - x*)``; ``Z = diag(I, mu H^{-1})``."""
    d = instance.dim
    eye, zero = np.eye(d), np.zeros((d, d))
    a = params.alpha
    P = np.block([[eye, zero], [-a / (1.0 - a) * eye, eye / (1.0 - a)]])
    Z = np.block([[eye, zero], [zero, instance.mu * np.diag(1.0 / instance.h_diag)]])
    return P, Z, P.T @ Z @ P


def build_operator_set(instance: ProblemInstance, params: AsgdParams,
                       max_dim: int = MAX_OPERATOR_DIM) -> OperatorSet:
    """Materialize ``B = D + R`` as explicit ``(2d)^2 x (2d)^2`` matrices."""
    d = instance.dim
    if d > max_dim:
        raise ValueError(f"operator matrices are limited to d <= {max_dim}, got d={d}")
    size = 2 * d
    A = expected_transition(instance, params)
    B_mat = _matrix_of(lambda S: second_moment_map(instance, params, S), size)
    D_mat = np.kron(A, A)
    R_mat = _matrix_of(lambda S: fluctuation_map(instance, params, S), size)
    sigma_hat = np.kron(step_weights(params), instance.noise_cov)
    P, Z, G = potential_matrices(instance, params)
    H_block = np.zeros((size, size))
    H_block[:d, :d] = instance.H
    return OperatorSet(instance=instance, params=params, A=A, B_mat=B_mat, D_mat=D_mat,
                       R_mat=R_mat, Sigma_hat=sigma_hat, P=P, Z=Z, G=G, H_block=H_block)


def stationary_covariance(ops: OperatorSet) -> np.ndarray:
    """Fixed point of ``S -> B(S) + Sigma_hat``, i.e. ``(I - B)^{-1} Sigma_hat``."""
    rho = ops.spectral_radius()
    if rho >= 1.0:
        raise ValueError(f"second-moment operator is not contractive (spectral radius {rho})")
    return ops.resolve_B(ops.Sigma_hat)


@dataclass(frozen=True)
class SecondMomentSolution:
    """Per-eigendirection stationary second moments ``u11, u12, u22``."""

    lam: float
    u11: float
    u12: float
    u22: float
    u11_direct: float
    u12_direct: float
    u22_direct: float

    @property
    def max_relative_gap(self) -> float:
        pairs = [(self.u11, self.u11_direct), (self.u12, self.u12_direct),
                 (self.u22, self.u22_direct)]
        return max(abs(a - b) / max(abs(b), 1e-300) for a, b in pairs)


def second_moment_system(params: AsgdParams, lam):
    """Coefficients of the linear system in ``(u12, u22)``.

    Works with floats or with ``Fraction`` inputs; the latter gives an exact system.
    """
    alpha, beta, gamma, dl = _param_values(params, type(lam))
    c = alpha * (1 - beta)
    g = alpha * dl + (1 - alpha) * gamma
    lhs = [
        [1 + c * (1 - dl * lam), g * lam - (1 + c) * (1 - dl * lam)],
        [2 * c * ((1 + c) - g * lam), 2 * ((1 + c) * (g * lam - c) + dl * lam * c * c)],
    ]
    rhs = [dl * g * lam, (g * g + c * c * dl * dl) * lam]
    return lhs, rhs


def _param_values(params: AsgdParams, kind):
    vals = (params.alpha, params.beta, params.gamma, params.delta)
    if kind is Fraction:
        return tuple(Fraction(v) for v in vals)
    return vals


def _solve_exact(params: AsgdParams, lam: float):
    """Solve the ``(u12, u22)`` system exactly in rational arithmetic.

    The float coefficients suffer cancellation when ``c`` is close to one, which
    would make a float solve far less accurate than the closed forms.
    """
    lam_q = Fraction(lam)
    (a11, a12), (a21, a22) = second_moment_system(params, lam_q)[0]
    r1, r2 = second_moment_system(params, lam_q)[1]
    det = a11 * a22 - a12 * a21
    u12 = (r1 * a22 - a12 * r2) / det
    u22 = (a11 * r2 - a21 * r1) / det
    _, _, _, dl = _param_values(params, Fraction)
    u11 = u22 * (1 - 2 * dl * lam_q) + dl * dl * lam_q
    return float(u11), float(u12), float(u22)


def solve_second_moment_direction(params: AsgdParams, lam: float) -> SecondMomentSolution:
    """Closed-form solution for one eigendirection alongside an exact direct solve."""
    if lam <= 0:
        raise ValueError("eigenvalue must be positive")
    c, g, dl = params.c, params.g_hat, params.delta
    gap = params.gap
    s = g + c * dl
    denom = 2.0 * (1.0 - c * c + c * lam * s)
    u22 = ((1.0 + c - c * dl * lam) * gap + 2.0 * c * g * dl * lam) / denom
    u12 = ((1.0 + c - lam * s) * gap + dl * lam * s) / denom
    u11 = ((1.0 + c - c * dl * lam) * gap - 2.0 * dl * lam * gap + 2.0 * dl * dl * lam) / denom
    u11_d, u12_d, u22_d = _solve_exact(params, float(lam))
    return SecondMomentSolution(float(lam), float(u11), float(u12), float(u22),
                                u11_d, u12_d, u22_d)


@dataclass(frozen=True)
class UBlocks:
    """Per-direction solutions and the assembled ``2d x 2d`` matrix ``[[U11, U12], [U12, U22]]``."""

    directions: tuple
    U: np.ndarray

    @property
    def u22(self) -> np.ndarray:
        return np.array([s.u22 for s in self.directions])


def solve_second_moment_U(instance: ProblemInstance, params: AsgdParams) -> UBlocks:
    """Solve the per-direction stationary second-moment system for every eigenvalue of H."""
    sols = tuple(solve_second_moment_direction(params, lam) for lam in instance.h_diag)
    d = instance.dim
    U = np.zeros((2 * d, 2 * d))
    idx = np.arange(d)
    U[idx, idx] = [s.u11 for s in sols]
    U[idx, idx + d] = [s.u12 for s in sols]
    U[idx + d, idx] = [s.u12 for s in sols]
    U[idx + d, idx + d] = [s.u22 for s in sols]
    return UBlocks(sols, U)


@dataclass(frozen=True)
class CovariancePrediction:
    """Exact expected second moment of the tail-averaged centered state."""

    n: int
    tail_start: int
    bias_cov: np.ndarray
    variance_cov: np.ndarray
    bias_risk: float
    variance_risk: float

    @property
    def total_cov(self) -> np.ndarray:
        return self.bias_cov + self.variance_cov

    @property
    def total_risk(self) -> float:
        return self.bias_risk + self.variance_risk


@dataclass(frozen=True)
class RiskDecomposition:
    bias: float
    variance: float
    exact_total: float
    upper_bound: float


def block_risk(ops: OperatorSet, cov: np.ndarray) -> float:
    """``0.5 <[[H, 0], [0, 0]], cov>``: expected excess risk of the averaged x."""
    return 0.5 * float(np.sum(ops.H_block * cov))


def _symmetrize_pair(ops: OperatorSet, S: np.ndarray) -> np.ndarray:
    half = ops.resolve_A(S)
    return half + half.T


def _check_window(n: int, t: int):
    if n < 1 or not (0 <= t < n):
        raise ValueError(f"need 0 <= t < n, got t={t}, n={n}")


def _tail_cov_direct(ops: OperatorSet, phi0: np.ndarray, source: Optional[np.ndarray],
                     n: int, t: int) -> np.ndarray:
    """Sum the per-step second moments and cross moments one step at a time."""
    phi = phi0.copy()
    for _ in range(t):
        phi = ops.apply_B(phi) + (source if source is not None else 0.0)
    diag_sum = np.zeros_like(phi)
    cross = np.zeros_like(phi)
    carried = np.zeros_like(phi)
    for _ in range(t + 1, n + 1):
        phi = ops.apply_B(phi) + (source if source is not None else 0.0)
        # carried = sum_{l < j} A^{j-l} phi_l
        cross += carried
        carried = ops.A @ (carried + phi)
        diag_sum += phi
    m = n - t
    return (diag_sum + cross + cross.T) / m ** 2


def _bias_closed(ops: OperatorSet, theta0: np.ndarray, n: int, t: int) -> np.ndarray:
    m = n - t
    phi = np.outer(theta0, theta0)
    for _ in range(t + 1):
        phi = ops.apply_B(phi)
    phi_first = phi
    horner = np.zeros_like(phi)
    for j in range(t + 1, n + 1):
        horner = ops.A @ (horner + phi)
        phi = ops.apply_B(phi)
    phi_last = phi  # B^{n+1} theta0 theta0^T
    main = ops.pair_op(ops.resolve_B(phi_first - phi_last))
    return (main - _symmetrize_pair(ops, horner)) / m ** 2


def _variance_closed(ops: OperatorSet, n: int, t: int) -> np.ndarray:
    m = n - t
    phi_inf = ops.resolve_B(ops.Sigma_hat)
    first = ops.pair_op(phi_inf) / m
    a_pow = np.linalg.matrix_power(ops.A, m + 1)
    edge = ops.resolve_A(ops.resolve_A((ops.A - a_pow) @ phi_inf))
    second = -(edge + edge.T) / m ** 2
    psi = phi_inf.copy()
    for _ in range(t + 1):
        psi = ops.apply_B(psi)
    psi_first = psi
    horner = np.zeros_like(psi)
    for j in range(t + 1, n + 1):
        horner = ops.A @ (horner + psi)
        psi = ops.apply_B(psi)
    third = -ops.pair_op(ops.resolve_B(psi_first - psi)) / m ** 2
    fourth = _symmetrize_pair(ops, horner) / m ** 2
    return first + second + third + fourth


def predict_tail_covariance(ops: OperatorSet, theta0, t: int, n: int,
                            method: str = "direct") -> CovariancePrediction:
    """Expected ``theta_bar theta_bar^T`` split into its bias and variance parts.

    ``method="direct"`` accumulates the per-step moments and cross moments explicitly;
    ``method="closed"`` uses the resolvent expressions.  Both are exact in exact
    arithmetic.  In floating point the closed form loses about ``cond(I - B)``
    relative accuracy, so the direct sum is the default.
    """
    _check_window(n, t)
    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    if theta0.size != ops.size:
        raise ValueError(f"theta0 must have length {ops.size}")
    if method == "closed":
        bias = _bias_closed(ops, theta0, n, t)
        variance = _variance_closed(ops, n, t)
    elif method == "direct":
        zero = np.zeros((ops.size, ops.size))
        bias = _tail_cov_direct(ops, np.outer(theta0, theta0), None, n, t)
        variance = _tail_cov_direct(ops, zero, ops.Sigma_hat, n, t)
    else:
        raise ValueError(f"unknown method {method!r}")
    bias = 0.5 * (bias + bias.T)
    variance = 0.5 * (variance + variance.T)
    return CovariancePrediction(n=n, tail_start=t, bias_cov=bias, variance_cov=variance,
                                bias_risk=block_risk(ops, bias),
                                variance_risk=block_risk(ops, variance))


def bias_variance_decompose(ops: OperatorSet, theta0, t: int, n: int) -> RiskDecomposition:
    """Bias and variance risks, their exact sum and the factor-two upper bound.

    With noise independent of the inputs the cross term has zero mean, so the sum is
    exact; the bound ``2 (bias + variance)`` holds for any noise.
    """
    prediction = predict_tail_covariance(ops, theta0, t, n)
    b, v = prediction.bias_risk, prediction.variance_risk
    return RiskDecomposition(bias=b, variance=v, exact_total=b + v, upper_bound=2.0 * (b + v))


def expected_tail_average(ops: OperatorSet, theta0, t: int, n: int) -> np.ndarray:
    """Mean of the tail-averaged centered state, ``(1/(n-t)) sum_j A^j theta0``."""
    _check_window(n, t)
    theta = np.asarray(theta0, dtype=float).reshape(-1)
    acc = np.zeros_like(theta)
    for j in range(1, n + 1):
        theta = ops.A @ theta
        if j > t:
            acc += theta
    return acc / (n - t)
