"""Random arenas: circular obstacles, a road-texture disturbance field, start states.

The arena is x1 in [-5, 5], x2 in [0, 10], walled on the left, right and
bottom; the open top edge x2 = 10 is the goal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from fedgen import rng as rngmod

X1_MIN, X1_MAX = -5.0, 5.0
X2_MIN, X2_MAX = 0.0, 10.0
WALLS = (
    ((X1_MIN, X2_MIN), (X1_MIN, X2_MAX)),
    ((X1_MAX, X2_MIN), (X1_MAX, X2_MAX)),
    ((X1_MIN, X2_MIN), (X1_MAX, X2_MIN)),
)
GOAL = ((X1_MIN, X2_MAX), (X1_MAX, X2_MAX))

N_OBS_RANGE = (15, 30)
CENTER_X2_RANGE = (2.0, 10.0)
CENTER_X2_CAP = 9.7
RADIUS_RANGE = (0.1, 0.25)
START_X1_RANGE = (-4.0, 4.0)
START_X2 = 0.5
START_CLEARANCE = 0.3
MAX_START_REJECTIONS = 1000

ENV_FORMAT = "fedgen-env/1"


class EnvironmentRejected(RuntimeError):
    """No admissible initial state could be drawn; regenerate the environment."""


@dataclass(frozen=True)
class DisturbanceParams:
    sigma: float = 0.25
    corr_len: float = 2.0
    resolution: float = 0.1
    d_max: float = 1.0

    def __post_init__(self):
        if self.sigma < 0 or self.corr_len <= 0 or self.resolution <= 0 or self.d_max < 0:
            raise ValueError(f"invalid disturbance parameters {self}")

    @property
    def shape(self) -> tuple[int, int]:
        nx = int(round((X1_MAX - X1_MIN) / self.resolution)) + 1
        ny = int(round((X2_MAX - X2_MIN) / self.resolution)) + 1
        return ny, nx


def synthesize_field(seed: int, params: DisturbanceParams) -> np.ndarray:
    """Stationary Gaussian field with a Von Karman-shaped spectrum.

    Filtered white noise on a zero-padded periodic grid, standardized to
    standard deviation ``params.sigma`` and capped at ``params.d_max``.
    Rows index x2, columns index x1.
    """
    ny, nx = params.shape
    if params.sigma == 0.0:
        return np.zeros((ny, nx))
    n = 1 << int(math.ceil(math.log2(2 * max(nx, ny))))
    gen = rngmod.stream(seed)
    white = gen.standard_normal((n, n))
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=params.resolution)
    kk = np.hypot(k[:, None], k[None, :])
    spectrum = params.sigma**2 * params.corr_len / (1.0 + (params.corr_len * kk) ** 2) ** (5.0 / 6.0)
    grid = np.fft.ifft2(np.fft.fft2(white) * np.sqrt(spectrum)).real[:ny, :nx]
    grid = grid - grid.mean()
    std = grid.std()
    if std > 0:
        grid = grid * (params.sigma / std)
    return np.clip(grid, -params.d_max, params.d_max)


@dataclass(eq=False)
class EnvironmentSpec:
    obstacles: np.ndarray  # (n, 3): center x1, center x2, radius
    disturbance_seed: int
    disturbance: DisturbanceParams = field(default_factory=DisturbanceParams)

    def __post_init__(self):
        self.obstacles = np.asarray(self.obstacles, dtype=float).reshape(-1, 3)

    @property
    def n_obstacles(self) -> int:
        return self.obstacles.shape[0]

    @cached_property
    def field(self) -> np.ndarray:
        return synthesize_field(self.disturbance_seed, self.disturbance)

    def to_dict(self) -> dict:
        return {
            "format": ENV_FORMAT,
            "obstacles": self.obstacles.tolist(),
            "disturbance_seed": self.disturbance_seed,
            "disturbance": {
                "sigma": self.disturbance.sigma,
                "corr_len": self.disturbance.corr_len,
                "resolution": self.disturbance.resolution,
                "d_max": self.disturbance.d_max,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentSpec":
        if d.get("format") != ENV_FORMAT:
            raise ValueError(f"unsupported environment format {d.get('format')!r}")
        return cls(
            np.asarray(d["obstacles"], dtype=float).reshape(-1, 3),
            int(d["disturbance_seed"]),
            DisturbanceParams(**d["disturbance"]),
        )

    def check(self) -> None:
        """Raise ValueError if the environment breaks a generation invariant."""
        n = self.n_obstacles
        if not (N_OBS_RANGE[0] <= n <= N_OBS_RANGE[1]):
            raise ValueError(f"obstacle count {n} outside {N_OBS_RANGE}")
        cx, cy, r = self.obstacles.T
        if np.any((cx < X1_MIN) | (cx > X1_MAX) | (cy < CENTER_X2_RANGE[0]) | (cy > CENTER_X2_CAP)):
            raise ValueError("obstacle center outside the sampling box")
        if np.any((r < RADIUS_RANGE[0]) | (r > RADIUS_RANGE[1])):
            raise ValueError("obstacle radius outside range")
        if np.any(cy + r >= X2_MAX):
            raise ValueError("obstacle overlaps the goal line")


def sample_environment(
    gen: np.random.Generator, disturbance: DisturbanceParams | None = None
) -> EnvironmentSpec:
    n_obs = int(gen.integers(N_OBS_RANGE[0], N_OBS_RANGE[1] + 1))
    cx = gen.uniform(X1_MIN, X1_MAX, n_obs)
    cy = gen.uniform(*CENTER_X2_RANGE, n_obs)
    # keep every obstacle clear of the goal line
    bad = cy > CENTER_X2_CAP
    while np.any(bad):
        cy[bad] = gen.uniform(*CENTER_X2_RANGE, int(bad.sum()))
        bad = cy > CENTER_X2_CAP
    r = gen.uniform(*RADIUS_RANGE, n_obs)
    seed = int(gen.integers(0, 2**62))
    return EnvironmentSpec(np.column_stack([cx, cy, r]), seed, disturbance or DisturbanceParams())


def disturbance_at(env: EnvironmentSpec, x1: float, x2: float) -> float:
    from fedgen.rollout import bilinear

    return float(bilinear(env.field, env.disturbance.resolution, x1, x2))


def sample_initial_state(env: EnvironmentSpec, gen: np.random.Generator):
    from fedgen.rollout import RobotState

    for _ in range(MAX_START_REJECTIONS):
        x1 = float(gen.uniform(*START_X1_RANGE))
        if env.n_obstacles == 0:
            return RobotState(x1, START_X2, math.pi / 2)
        cx, cy, r = env.obstacles.T
        if np.all(np.hypot(cx - x1, cy - START_X2) >= r + START_CLEARANCE):
            return RobotState(x1, START_X2, math.pi / 2)
    raise EnvironmentRejected(f"no admissible start after {MAX_START_REJECTIONS} draws")


def generate_environments(
    count: int,
    seed: int,
    domain: int = rngmod.TRAIN_ENVS,
    *key: int,
    disturbance: DisturbanceParams | None = None,
) -> list[EnvironmentSpec]:
    """``count`` environments; environment ``l`` comes from stream (seed, domain, *key, l)."""
    return [
        sample_environment(rngmod.stream(seed, domain, *key, l), disturbance) for l in range(count)
    ]


def save_environment(path: str | Path, env: EnvironmentSpec) -> None:
    Path(path).write_text(json.dumps(env.to_dict(), indent=1))


def load_environment(path: str | Path) -> EnvironmentSpec:
    return EnvironmentSpec.from_dict(json.loads(Path(path).read_text()))


def write_corpus(directory: str | Path, envs: Sequence[EnvironmentSpec]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for l, env in enumerate(envs):
        path = directory / f"env_{l:05d}.json"
        save_environment(path, env)
        paths.append(path)
    return paths


def read_corpus(directory: str | Path) -> list[EnvironmentSpec]:
    paths = sorted(Path(directory).glob("env_*.json"))
    if not paths:
        raise FileNotFoundError(f"no env_*.json files in {directory}")
    return [load_environment(p) for p in paths]
