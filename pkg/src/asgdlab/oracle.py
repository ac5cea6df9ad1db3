"""Sampling, the stochastic gradient oracle and risk evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .model import DISCRETE, ProblemInstance

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Return a generator; integers and seed sequences map deterministically to streams."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_seeds(base_seed: int, count: int) -> list:
    """Independent child seed sequences, one per replicate."""
    return np.random.SeedSequence(base_seed).spawn(count)


@dataclass(frozen=True)
class Sample:
    a: np.ndarray
    b: float


def draw_inputs(instance: ProblemInstance, rng: np.random.Generator, m: int) -> np.ndarray:
    """Draw ``m`` inputs as an ``(m, d)`` array."""
    d = instance.dim
    w = instance.h_diag
    if instance.kind == DISCRETE:
        idx = rng.choice(d, size=m, p=w)
        a = np.zeros((m, d))
        a[np.arange(m), idx] = 1.0
        return a
    return rng.standard_normal((m, d)) * np.sqrt(w)


def draw_samples(instance: ProblemInstance, rng: np.random.Generator, m: int):
    """Draw ``m`` samples ``(a, b)`` with ``a`` of shape ``(m, d)`` and ``b`` of shape ``(m,)``."""
    a = draw_inputs(instance, rng, m)
    b = a @ instance.x_star
    if instance.sigma2 > 0:
        b = b + np.sqrt(instance.sigma2) * rng.standard_normal(m)
    return a, b


def draw_sample(instance: ProblemInstance, rng: np.random.Generator) -> Sample:
    a, b = draw_samples(instance, rng, 1)
    return Sample(a[0], float(b[0]))


def stochastic_gradient(sample: Sample, x: np.ndarray) -> np.ndarray:
    """Single-sample gradient ``-(b - <a, x>) a`` of the squared loss."""
    a = np.asarray(sample.a, dtype=float)
    x = np.asarray(x, dtype=float)
    if a.shape != x.shape:
        raise ValueError(f"dimension mismatch: sample has {a.shape}, point has {x.shape}")
    return -(sample.b - float(a @ x)) * a


def batch_gradients(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise gradients for stacked iterates ``x`` (m, d) and samples ``a`` (m, d), ``b`` (m,)."""
    resid = b - np.einsum("ij,ij->i", a, x)
    return -resid[:, None] * a


def excess_risk(instance: ProblemInstance, x: np.ndarray) -> np.ndarray:
    """``0.5 (x - x*)^T H (x - x*)``; accepts a single point or a stack of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != instance.dim:
        raise ValueError(f"point has dimension {x.shape[-1]}, expected {instance.dim}")
    diff = x - instance.x_star
    return 0.5 * np.sum(diff * diff * instance.h_diag, axis=-1)


def minimax_reference(d: int, sigma2: float, n: int) -> float:
    """The statistically optimal rate ``d * sigma2 / n``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return d * sigma2 / n
