"""Objective samplers and synthetic multi-well objectives with known cost.

A sampler turns a parameter vector into a noisy ``(y, z)`` measurement. The
synthetic objectives here have a closed-form expected cost ``eta`` and gradient,
so the optimizer and the certificates can be checked against ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal, Protocol, Sequence, runtime_checkable

import numpy as np

from fedgen import rng as rngmod
from fedgen.core import ObjectiveEstimate

NoiseModel = Literal["gaussian", "bernoulli"]


@runtime_checkable
class ObjectiveSampler(Protocol):
    dim: int

    def sample(self, theta: np.ndarray, rng: np.random.Generator) -> ObjectiveEstimate: ...


@dataclass(frozen=True)
class SyntheticObjective:
    """eta(theta) = clip(base + scale * min_w(|theta - c_w|^2 / s_w^2 - d_w), 0, 1).

    ``centers`` has shape (wells, dim). Each call of :meth:`sample` averages
    ``n_samples`` i.i.d. per-episode draws, mirroring a learner that averages
    ``n_env * n_init`` episodes.
    """

    kind: str
    centers: np.ndarray
    depths: np.ndarray
    widths: np.ndarray
    base: float
    scale: float
    sigma_y: float = 0.0
    sigma_z: float = 0.0
    n_samples: int = 1
    noise: NoiseModel = "gaussian"

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "depths", np.asarray(self.depths, dtype=float).reshape(-1))
        object.__setattr__(self, "widths", np.asarray(self.widths, dtype=float).reshape(-1))
        if not (len(self.depths) == len(self.widths) == centers.shape[0]):
            raise ValueError("centers, depths and widths must describe the same number of wells")
        if np.any(self.widths <= 0) or self.scale <= 0:
            raise ValueError("widths and scale must be positive")
        if self.sigma_y < 0 or self.sigma_z < 0 or self.n_samples < 1:
            raise ValueError("noise levels must be non-negative and n_samples positive")
        if self.noise not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown noise model {self.noise!r}")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def _raw(self, theta: np.ndarray) -> tuple[float, int]:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != self.dim:
            raise ValueError(f"theta has dimension {theta.size}, objective expects {self.dim}")
        terms = np.sum((theta - self.centers) ** 2, axis=1) / self.widths**2 - self.depths
        w = int(np.argmin(terms))
        return self.base + self.scale * terms[w], w

    def true_eta(self, theta: np.ndarray) -> float:
        raw, _ = self._raw(theta)
        return min(1.0, max(0.0, raw))

    def true_grad(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        raw, w = self._raw(theta)
        if raw <= 0.0 or raw >= 1.0:
            return np.zeros(self.dim)
        return 2.0 * self.scale * (theta - self.centers[w]) / self.widths[w] ** 2

    def lipschitz(self) -> tuple[float, float]:
        """(L_eta, L_grad) for the active region of each well."""
        reach = np.sqrt(np.maximum((1.0 - self.base) / self.scale + self.depths, 0.0))
        l_eta = float(np.max(2.0 * self.scale * reach / self.widths))
        l_grad = float(np.max(2.0 * self.scale / self.widths**2))
        return l_eta, l_grad

    def noise_sigma(self) -> float:
        """sqrt(E|z - grad eta|^2) for one call."""
        return self.sigma_z * math.sqrt(self.dim / self.n_samples)

    def sample(self, theta: np.ndarray, rng: np.random.Generator) -> ObjectiveEstimate:
        return synthetic_sample(self, theta, rng)

    def with_noise(self, **kw) -> "SyntheticObjective":
        return replace(self, **kw)


def synthetic_eta(obj: SyntheticObjective, theta) -> float:
    return obj.true_eta(np.atleast_1d(np.asarray(theta, dtype=float)))


def _episode_costs(obj: SyntheticObjective, eta: float, rng: np.random.Generator) -> np.ndarray:
    n = obj.n_samples
    if obj.noise == "bernoulli":
        return (rng.random(n) < eta).astype(float)
    if obj.sigma_y == 0.0:
        return np.full(n, eta)
    costs = eta + obj.sigma_y * rng.standard_normal(n)
    bad = (costs < 0.0) | (costs > 1.0)
    # truncate by resampling so every episode cost stays in [0, 1]
    while np.any(bad):
        costs[bad] = eta + obj.sigma_y * rng.standard_normal(int(bad.sum()))
        bad = (costs < 0.0) | (costs > 1.0)
    return costs


def synthetic_sample(
    obj: SyntheticObjective, theta, rng: np.random.Generator
) -> ObjectiveEstimate:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    eta = obj.true_eta(theta)
    costs = _episode_costs(obj, eta, rng)
    grad = obj.true_grad(theta)
    if obj.sigma_z > 0.0:
        grad = grad + obj.sigma_z * rng.standard_normal((obj.n_samples, obj.dim)).mean(axis=0)
    return ObjectiveEstimate(float(costs.mean()), grad)


def quadratic_well(dim: int = 1, curvature: float = 0.1, center=None, **noise) -> SyntheticObjective:
    """eta(theta) = min(1, curvature * |theta - center|^2)."""
    c = np.zeros((1, dim)) if center is None else np.asarray(center, dtype=float).reshape(1, dim)
    return SyntheticObjective("quadratic_well", c, [0.0], [1.0], 0.0, curvature, **noise)


def double_well(
    m1: float = -1.0,
    d1: float = 0.3,
    m2: float = 1.0,
    d2: float = 0.5,
    base: float = 0.6,
    a: float = 1.0,
    **noise,
) -> SyntheticObjective:
    """One-dimensional eta(theta) = clip(base + a*min((theta-m1)^2 - d1, (theta-m2)^2 - d2))."""
    return SyntheticObjective("double_well", [[m1], [m2]], [d1, d2], [1.0, 1.0], base, a, **noise)


def multi_well(
    rng: np.random.Generator,
    dim: int = 2,
    n_wells: int = 4,
    spread: float = 2.0,
    **noise,
) -> SyntheticObjective:
    """Random wells with minima spread over (0, 0.8) on a [-spread, spread] box."""
    centers = rng.uniform(-spread, spread, size=(n_wells, dim))
    minima = rng.uniform(0.0, 0.8, size=n_wells)
    widths = rng.uniform(0.5, 1.0, size=n_wells)
    base = 0.9
    # base - depth gives the well minimum
    depths = base - minima
    return SyntheticObjective("multi_well", centers, depths, widths, base, 1.0, **noise)


def estimate_sigma(
    sampler: ObjectiveSampler,
    probes: Sequence[np.ndarray],
    repeats: int,
    seed: int = 0,
) -> float:
    """Largest RMS deviation of the gradient estimate over the probe points.

    Returns sqrt(sum |z - mean z|^2 / (repeats - 1)), the empirical counterpart of
    the bound sigma with E|z - grad eta|^2 <= sigma^2.
    """
    if repeats < 2:
        raise ValueError(f"need at least two repeats, got {repeats}")
    worst = 0.0
    for p, theta in enumerate(probes):
        theta = np.asarray(theta, dtype=float)
        zs = np.stack(
            [sampler.sample(theta, rngmod.stream(seed, rngmod.VERIFY, p, r)).z for r in range(repeats)]
        )
        dev = zs - zs.mean(axis=0)
        worst = max(worst, math.sqrt(float(np.sum(dev**2)) / (repeats - 1)))
    return worst
