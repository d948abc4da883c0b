"""MLP steering policy and the natural-evolution-strategies objective sampler.

A NES learner searches over a diagonal Gaussian distribution of MLP weights
with mean ``mu`` and per-coordinate standard deviation ``sigma``. Its
parameter vector is ``concat(mu, log sigma)``: gradient steps act on log sigma
so sigma stays positive, and the sigma-block of the gradient is
``sigma * d/dsigma``. Checkpoints and reports expose sigma itself. The deployed
policy is always ``mu``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fedgen.core import ObjectiveEstimate
from fedgen.envgen import EnvironmentSpec, sample_environment, sample_initial_state
from fedgen.rollout import OBS_DIM, SimConfig, mlp_forward, pack_envs, simulate_batch

logger = logging.getLogger(__name__)

FULL_LAYERS = (OBS_DIM, 20, 20, 20, 1)
DESK_LAYERS = (OBS_DIM, 16, 16, 1)
POLICY_FORMAT = "fedgen-policy/1"


def n_params(layers: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layers[:-1], layers[1:]))


@dataclass
class MlpPolicy:
    layers: tuple[int, ...]
    params: np.ndarray

    def __post_init__(self):
        self.layers = tuple(int(w) for w in self.layers)
        self.params = np.asarray(self.params, dtype=float)
        if self.layers[-1] != 1:
            raise ValueError("the policy outputs a single steering command")
        if self.params.shape != (n_params(self.layers),):
            raise ValueError(
                f"expected {n_params(self.layers)} parameters for layers {self.layers}, "
                f"got {self.params.shape}"
            )

    def unflatten(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, off = [], 0
        for n_in, n_out in zip(self.layers[:-1], self.layers[1:]):
            W = self.params[off : off + n_in * n_out].reshape(n_out, n_in)
            off += n_in * n_out
            b = self.params[off : off + n_out]
            off += n_out
            out.append((W.copy(), b.copy()))
        return out

    @classmethod
    def from_layers(cls, weights: Sequence[tuple[np.ndarray, np.ndarray]]) -> "MlpPolicy":
        layers = [weights[0][0].shape[1]] + [W.shape[0] for W, _ in weights]
        flat = np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in weights])
        return cls(tuple(layers), flat)

    def __call__(self, obs: np.ndarray) -> float:
        return policy_forward(self, obs)


def policy_forward(p: MlpPolicy, obs: np.ndarray) -> float:
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (p.layers[0],):
        raise ValueError(f"observation must have length {p.layers[0]}, got {obs.shape}")
    width = max(p.layers)
    return float(
        mlp_forward(p.params, np.asarray(p.layers, dtype=np.int64), obs, np.empty(width), np.empty(width))
    )


def init_mu(layers: Sequence[int], gen: np.random.Generator) -> np.ndarray:
    """Uniform [-0.5, 0.5] scaled by 1/sqrt(fan-in), biases included."""
    chunks = []
    for n_in, n_out in zip(layers[:-1], layers[1:]):
        chunks.append(gen.uniform(-0.5, 0.5, n_in * n_out + n_out) / math.sqrt(n_in))
    return np.concatenate(chunks)


def nes_gradients(
    f_values: np.ndarray, eps: np.ndarray, sigma: np.ndarray, sigma_floor: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Score-function gradients of E[f(mu + sigma*eps)] w.r.t. mu and sigma.

    ``f_values[s]`` is the cost at ``mu + sigma * eps[s]``; antithetic callers
    pass both ``eps`` and ``-eps`` rows. Means are taken over all rows.
    """
    f = np.asarray(f_values, dtype=float)
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    sigma = np.asarray(sigma, dtype=float)
    if f.shape[0] != eps.shape[0]:
        raise ValueError("one cost per perturbation is required")
    if np.any(sigma < sigma_floor):
        logger.warning("sigma below floor %g; clamping", sigma_floor)
        sigma = np.maximum(sigma, sigma_floor)
    g_mu = _paired_mean(f[:, None] * eps) / sigma
    g_sigma = _paired_mean(f[:, None] * (eps * eps - 1.0)) / sigma
    return g_mu, g_sigma


def _paired_mean(terms: np.ndarray) -> np.ndarray:
    """Row mean that adds rows 2s and 2s+1 first, so mirrored terms cancel exactly."""
    n = terms.shape[0]
    if n % 2:
        return np.sum(terms, axis=0) / n
    return np.sum(terms[0::2] + terms[1::2], axis=0) / n


def antithetic(eps: np.ndarray) -> np.ndarray:
    """Interleave each row with its mirror: eps_1, -eps_1, eps_2, -eps_2, ..."""
    eps = np.atleast_2d(eps)
    out = np.empty((2 * eps.shape[0], eps.shape[1]))
    out[0::2] = eps
    out[1::2] = -eps
    return out


def finite_difference_check(f: Callable[[np.ndarray], float], theta, h: float) -> np.ndarray:
    """Central-difference gradient of a black-box scalar function."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2.0 * h)
    return g


@dataclass
class EnvBatch:
    """n_env environments with n_init start states each."""

    envs: list[EnvironmentSpec]
    starts: np.ndarray  # (n_env * n_init, 3)
    env_index: np.ndarray

    @classmethod
    def draw(
        cls, envs: Sequence[EnvironmentSpec], n_init: int, gen: np.random.Generator
    ) -> "EnvBatch":
        starts, index = [], []
        for e, env in enumerate(envs):
            for _ in range(n_init):
                starts.append(sample_initial_state(env, gen).as_array())
                index.append(e)
        return cls(list(envs), np.array(starts), np.array(index, dtype=np.int64))

    def __len__(self) -> int:
        return self.starts.shape[0]


@dataclass
class NesSampler:
    """Objective sampler over concat(mu, sigma) driven by policy rollouts.

    ``y`` is the mean pure arrival cost J of the deployed policy ``mu`` over the
    environment batch; ``z`` is the NES gradient of the surrogate cost.
    """

    layers: tuple[int, ...]
    batch: EnvBatch
    sim: SimConfig = field(default_factory=SimConfig)
    pair_count: int = 15
    sigma_floor: float = 1e-3
    resample_each_round: bool = False
    n_env: int | None = None
    n_init: int = 1
    env_factory: Callable[[np.random.Generator], EnvironmentSpec] | None = None

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self._packed = pack_envs(self.batch.envs)
        self._n = n_params(self.layers)

    @property
    def dim(self) -> int:
        return 2 * self._n

    def split(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(mu, sigma) from a learner parameter vector."""
        theta = np.asarray(theta, dtype=float)
        return theta[: self._n], np.exp(theta[self._n :])

    def join(self, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(mu, dtype=float), np.log(np.asarray(sigma, dtype=float))])

    def project(self, theta: np.ndarray) -> np.ndarray:
        theta = np.array(theta, dtype=float)
        theta[self._n :] = np.maximum(theta[self._n :], math.log(self.sigma_floor))
        return theta

    def _round_batch(self, gen: np.random.Generator) -> tuple[EnvBatch, object]:
        if not self.resample_each_round:
            return self.batch, self._packed
        factory = self.env_factory or sample_environment
        n_env = self.n_env or len(self.batch.envs)
        envs = [factory(gen) for _ in range(n_env)]
        batch = EnvBatch.draw(envs, self.n_init, gen)
        return batch, pack_envs(envs)

    def evaluate(self, params: np.ndarray, batch: EnvBatch | None = None, packed=None):
        """Per-policy mean J and mean J_hat over the batch for each row of ``params``."""
        batch = batch or self.batch
        packed = packed or self._packed
        params = np.atleast_2d(params)
        n_pol, n_ep = params.shape[0], len(batch)
        res = simulate_batch(
            packed,
            np.tile(batch.env_index, n_pol),
            np.tile(batch.starts, (n_pol, 1)),
            params,
            np.repeat(np.arange(n_pol), n_ep),
            self.layers,
            self.sim,
        )
        return res.J.reshape(n_pol, n_ep).mean(axis=1), res.J_hat.reshape(n_pol, n_ep).mean(axis=1)

    def sample(self, theta: np.ndarray, rng: np.random.Generator) -> ObjectiveEstimate:
        mu, sigma = self.split(theta)
        if np.any(sigma < self.sigma_floor):
            logger.warning("sigma below floor %g; clamping", self.sigma_floor)
            sigma = np.maximum(sigma, self.sigma_floor)
        batch, packed = self._round_batch(rng)
        eps = antithetic(rng.standard_normal((self.pair_count, self._n)))
        params = np.vstack([mu[None, :], mu + sigma * eps])
        J, J_hat = self.evaluate(params, batch, packed)
        g_mu, g_sigma = nes_gradients(J_hat[1:], eps, sigma)
        return ObjectiveEstimate(
            float(J[0]), np.concatenate([g_mu, sigma * g_sigma]), {"y_hat": float(J_hat[0])}
        )


def save_policy(path: str | Path, layers: Sequence[int], mu: np.ndarray, sigma: np.ndarray | None = None, **meta) -> None:
    payload = {
        "format": POLICY_FORMAT,
        "layers": list(layers),
        "mu": np.asarray(mu, dtype=float).tolist(),
        "sigma": None if sigma is None else np.asarray(sigma, dtype=float).tolist(),
        "meta": meta,
    }
    Path(path).write_text(json.dumps(payload))


def load_policy(path: str | Path) -> tuple[MlpPolicy, np.ndarray | None, dict]:
    """Load a policy checkpoint, refusing anything malformed."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read policy checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != POLICY_FORMAT:
        raise ValueError(f"{path}: not a {POLICY_FORMAT} checkpoint")
    try:
        layers = tuple(int(w) for w in payload["layers"])
        mu = np.asarray(payload["mu"], dtype=float)
        sigma = None if payload.get("sigma") is None else np.asarray(payload["sigma"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed checkpoint ({exc})") from exc
    if mu.shape != (n_params(layers),):
        raise ValueError(
            f"{path}: layer header {layers} needs {n_params(layers)} weights, found {mu.size}"
        )
    if sigma is not None and sigma.shape != mu.shape:
        raise ValueError(f"{path}: sigma length {sigma.size} does not match mu length {mu.size}")
    if not np.all(np.isfinite(mu)):
        raise ValueError(f"{path}: non-finite weights")
    return MlpPolicy(layers, mu), sigma, payload.get("meta", {})
