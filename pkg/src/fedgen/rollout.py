"""Episode simulation: car kinematics, depth sensing and cost evaluation.

The per-step helpers are compiled with numba and shared by the scalar
:func:`rollout` (any Python policy) and the batched :func:`simulate_batch`
(MLP policies), so both paths perform identical floating-point operations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numba as nb
import numpy as np

from fedgen.envgen import X1_MAX, X1_MIN, X2_MAX, X2_MIN, EnvironmentSpec

logger = logging.getLogger(__name__)

SPEED = 2.5
CAR_LENGTH = 0.08
U_MAX = math.pi / 4
N_BEAMS = 20
SENSOR_RANGE = 5.0
OBS_DIM = 4 + N_BEAMS

ARRIVED, COLLIDED, TIMEOUT = 0, 1, 2
OUTCOME_NAMES = ("arrived", "collided", "timeout")

SensorFan = Literal["stepped", "symmetric"]


def beam_offsets(fan: SensorFan = "stepped") -> np.ndarray:
    """Beam angles relative to the heading.

    ``stepped``: 20 beams from -60 degrees in 3-degree steps, all on the right
    of the heading. ``symmetric``: 20 beams spread evenly over +-60 degrees.
    """
    if fan == "stepped":
        return -math.pi / 3 + np.arange(N_BEAMS) * (math.pi / 60)
    if fan == "symmetric":
        return np.linspace(-math.pi / 3, math.pi / 3, N_BEAMS)
    raise ValueError(f"unknown sensor fan {fan!r}")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05
    t_max: float = 20.0
    alpha: float = 1.0
    sensor_fan: SensorFan = "stepped"
    inflation: float = 0.0
    speed: float = SPEED
    length: float = CAR_LENGTH

    def __post_init__(self):
        if self.dt <= 0 or self.t_max <= 0 or self.alpha <= 0:
            raise ValueError("dt, t_max and alpha must be positive")
        if abs(self.t_max / self.dt - round(self.t_max / self.dt)) > 1e-9:
            raise ValueError(f"t_max={self.t_max} is not a multiple of dt={self.dt}")
        beam_offsets(self.sensor_fan)

    @property
    def max_steps(self) -> int:
        return int(round(self.t_max / self.dt))


@dataclass(frozen=True)
class RobotState:
    x1: float
    x2: float
    x3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.x3])


@dataclass(frozen=True)
class RolloutResult:
    outcome: str
    steps: int
    arrival_time: float
    J: float
    rho: float
    J_hat: float
    trajectory: list | None = None


def kruzkov(t: float, alpha: float = 1.0) -> float:
    """Map an arrival time in [0, inf] to a cost in [0, 1]."""
    if t < 0:
        raise ValueError(f"arrival time must be non-negative, got {t}")
    if math.isinf(t):
        return 1.0
    return -math.expm1(-alpha * t)


@nb.njit(cache=True)
def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return math.pi - ((math.pi - a) % (2.0 * math.pi))


@nb.njit(cache=True)
def goal_distance(x1, x2):
    dx = 0.0
    if x1 < X1_MIN:
        dx = X1_MIN - x1
    elif x1 > X1_MAX:
        dx = x1 - X1_MAX
    return math.hypot(dx, X2_MAX - x2)


def distance_to_goal(p, env: EnvironmentSpec | None = None) -> float:
    """Euclidean distance from ``p`` to the goal segment x2 = 10, x1 in [-5, 5]."""
    return float(goal_distance(float(p[0]), float(p[1])))


@nb.njit(cache=True)
def bilinear(grid, res, x1, x2):
    ny, nx = grid.shape
    fx = (min(max(x1, X1_MIN), X1_MAX) - X1_MIN) / res
    fy = (min(max(x2, X2_MIN), X2_MAX) - X2_MIN) / res
    # queries within rounding of a node return the node value exactly
    if abs(fx - round(fx)) < 1e-9:
        fx = round(fx)
    if abs(fy - round(fy)) < 1e-9:
        fy = round(fy)
    j = min(int(math.floor(fx)), nx - 2)
    i = min(int(math.floor(fy)), ny - 2)
    tx = fx - j
    ty = fy - i
    return (
        (1.0 - ty) * ((1.0 - tx) * grid[i, j] + tx * grid[i, j + 1])
        + ty * ((1.0 - tx) * grid[i + 1, j] + tx * grid[i + 1, j + 1])
    )


@nb.njit(cache=True)
def ray_distance(px, py, ang, obstacles, n_obs, max_range):
    dx = math.cos(ang)
    dy = math.sin(ang)
    best = max_range
    for k in range(n_obs):
        fx = px - obstacles[k, 0]
        fy = py - obstacles[k, 1]
        r = obstacles[k, 2]
        c = fx * fx + fy * fy - r * r
        if c <= 0.0:
            return 0.0
        b = fx * dx + fy * dy
        disc = b * b - c
        if disc >= 0.0:
            t = -b - math.sqrt(disc)
            if 0.0 <= t < best:
                best = t
    if dx < 0.0:
        t = (X1_MIN - px) / dx
        y = py + t * dy
        if 0.0 <= t < best and X2_MIN <= y <= X2_MAX:
            best = t
    elif dx > 0.0:
        t = (X1_MAX - px) / dx
        y = py + t * dy
        if 0.0 <= t < best and X2_MIN <= y <= X2_MAX:
            best = t
    if dy < 0.0:
        t = (X2_MIN - py) / dy
        x = px + t * dx
        if 0.0 <= t < best and X1_MIN <= x <= X1_MAX:
            best = t
    return max(best, 0.0)


@nb.njit(cache=True)
def sense_into(out, x1, x2, x3, obstacles, n_obs, offsets, max_range):
    out[0] = x1
    out[1] = x2
    out[2] = math.sin(x3)
    out[3] = math.cos(x3)
    for b in range(offsets.shape[0]):
        out[4 + b] = ray_distance(x1, x2, x3 + offsets[b], obstacles, n_obs, max_range)


@nb.njit(cache=True)
def step_state(x1, x2, x3, u, d, dt, speed, length):
    u = min(max(u, -math.pi / 4), math.pi / 4)
    nx1 = x1 + dt * (speed * math.cos(x3) + d)
    nx2 = x2 + dt * speed * math.sin(x3)
    nx3 = wrap_angle(x3 + dt * math.tan(u) / length)
    return nx1, nx2, nx3


@nb.njit(cache=True)
def classify(x1, x2, x3, obstacles, n_obs, inflation):
    """ARRIVED, COLLIDED or -1 (still running) for a post-step state."""
    if not (math.isfinite(x1) and math.isfinite(x2) and math.isfinite(x3)):
        return COLLIDED
    if x2 >= X2_MAX and X1_MIN <= x1 <= X1_MAX:
        return ARRIVED
    if x1 < X1_MIN or x1 > X1_MAX or x2 < X2_MIN or x2 >= X2_MAX:
        return COLLIDED
    for k in range(n_obs):
        rr = obstacles[k, 2] + inflation
        ddx = x1 - obstacles[k, 0]
        ddy = x2 - obstacles[k, 1]
        if ddx * ddx + ddy * ddy <= rr * rr:
            return COLLIDED
    return -1


@nb.njit(cache=True)
def mlp_forward(params, layers, x, buf_a, buf_b):
    """ReLU hidden layers, (pi/4) * tanh output. Weights stored (out, in) row-major, then bias."""
    n_layers = layers.shape[0] - 1
    cur = buf_a
    nxt = buf_b
    for i in range(layers[0]):
        cur[i] = x[i]
    off = 0
    for li in range(n_layers):
        n_in = layers[li]
        n_out = layers[li + 1]
        boff = off + n_in * n_out
        for o in range(n_out):
            acc = params[boff + o]
            row = off + o * n_in
            for i in range(n_in):
                acc += params[row + i] * cur[i]
            if li < n_layers - 1 and acc < 0.0:
                acc = 0.0
            nxt[o] = acc
        off = boff + n_out
        tmp = cur
        cur = nxt
        nxt = tmp
    return (math.pi / 4) * math.tanh(cur[0])


@nb.njit(cache=True)
def _simulate(
    starts, env_index, pol_index, obstacles, n_obs, fields, res,
    params, layers, offsets, max_range, dt, max_steps, speed, length, inflation,
):
    n = starts.shape[0]
    outcome = np.empty(n, dtype=np.int64)
    steps = np.empty(n, dtype=np.int64)
    final = np.empty((n, 2))
    width = 0
    for w in layers:
        width = max(width, w)
    obs = np.empty(layers[0])
    buf_a = np.empty(width)
    buf_b = np.empty(width)
    for r in range(n):
        e = env_index[r]
        p = params[pol_index[r]]
        x1 = starts[r, 0]
        x2 = starts[r, 1]
        x3 = starts[r, 2]
        status = TIMEOUT
        k = 0
        while k < max_steps:
            sense_into(obs, x1, x2, x3, obstacles[e], n_obs[e], offsets, max_range)
            u = mlp_forward(p, layers, obs, buf_a, buf_b)
            d = bilinear(fields[e], res, x1, x2)
            x1, x2, x3 = step_state(x1, x2, x3, u, d, dt, speed, length)
            k += 1
            c = classify(x1, x2, x3, obstacles[e], n_obs[e], inflation)
            if c >= 0:
                status = c
                break
        outcome[r] = status
        steps[r] = k
        final[r, 0] = x1
        final[r, 1] = x2
    return outcome, steps, final


@dataclass(frozen=True)
class PackedEnvs:
    obstacles: np.ndarray
    n_obs: np.ndarray
    fields: np.ndarray
    resolution: float

    def __len__(self) -> int:
        return self.n_obs.shape[0]


def pack_envs(envs: Sequence[EnvironmentSpec]) -> PackedEnvs:
    if not envs:
        raise ValueError("need at least one environment")
    resolutions = {env.disturbance.resolution for env in envs}
    if len(resolutions) != 1:
        raise ValueError("all environments in a batch must share the field resolution")
    max_obs = max(1, max(env.n_obstacles for env in envs))
    obstacles = np.zeros((len(envs), max_obs, 3))
    n_obs = np.zeros(len(envs), dtype=np.int64)
    for e, env in enumerate(envs):
        obstacles[e, : env.n_obstacles] = env.obstacles
        n_obs[e] = env.n_obstacles
    fields = np.stack([env.field for env in envs])
    return PackedEnvs(obstacles, n_obs, fields, resolutions.pop())


@dataclass(frozen=True)
class BatchResult:
    outcome: np.ndarray
    steps: np.ndarray
    rho: np.ndarray
    J: np.ndarray
    J_hat: np.ndarray


def costs_from(outcome: np.ndarray, steps: np.ndarray, final: np.ndarray, cfg: SimConfig):
    arrived = outcome == ARRIVED
    J = np.where(arrived, -np.expm1(-cfg.alpha * steps * cfg.dt), 1.0)
    dx = np.maximum(0.0, np.maximum(X1_MIN - final[:, 0], final[:, 0] - X1_MAX))
    rho = np.where(arrived, 0.0, np.hypot(dx, X2_MAX - final[:, 1]))
    # numerical blow-up: counted as a collision, charged the arena diagonal
    blown = ~np.all(np.isfinite(final), axis=1)
    if np.any(blown):
        logger.warning("%d episode(s) ended in a non-finite state", int(blown.sum()))
    rho = np.where(np.isfinite(rho), rho, math.hypot(X1_MAX - X1_MIN, X2_MAX - X2_MIN))
    return J, rho, 0.1 * rho + J


def simulate_batch(
    packed: PackedEnvs,
    env_index: np.ndarray,
    starts: np.ndarray,
    params: np.ndarray,
    pol_index: np.ndarray,
    layers: Sequence[int],
    cfg: SimConfig,
) -> BatchResult:
    """Roll out ``len(starts)`` episodes of MLP policies ``params[pol_index]``."""
    layers_arr = np.asarray(layers, dtype=np.int64)
    params = np.ascontiguousarray(np.atleast_2d(params), dtype=float)
    outcome, steps, final = _simulate(
        np.ascontiguousarray(starts, dtype=float),
        np.asarray(env_index, dtype=np.int64),
        np.asarray(pol_index, dtype=np.int64),
        packed.obstacles,
        packed.n_obs,
        packed.fields,
        packed.resolution,
        params,
        layers_arr,
        beam_offsets(cfg.sensor_fan),
        SENSOR_RANGE,
        cfg.dt,
        cfg.max_steps,
        cfg.speed,
        cfg.length,
        cfg.inflation,
    )
    J, rho, J_hat = costs_from(outcome, steps, final, cfg)
    return BatchResult(outcome, steps, rho, J, J_hat)


def integrate_step(
    s: RobotState, u: float, env: EnvironmentSpec | None, dt: float, cfg: SimConfig | None = None
) -> RobotState:
    """One explicit Euler step; the disturbance pushes along x1 only."""
    cfg = cfg or SimConfig()
    d = 0.0 if env is None else float(bilinear(env.field, env.disturbance.resolution, s.x1, s.x2))
    return RobotState(*step_state(s.x1, s.x2, s.x3, float(u), d, dt, cfg.speed, cfg.length))


def sense(s: RobotState, env: EnvironmentSpec, fan: SensorFan = "stepped") -> np.ndarray:
    """Observation (x1, x2, sin x3, cos x3, d_1 .. d_20), every d in [0, 5]."""
    out = np.empty(OBS_DIM)
    obstacles = env.obstacles if env.n_obstacles else np.zeros((1, 3))
    sense_into(out, s.x1, s.x2, s.x3, obstacles, env.n_obstacles, beam_offsets(fan), SENSOR_RANGE)
    return out


def rollout(
    env: EnvironmentSpec,
    policy: Callable[[np.ndarray], float],
    x_init: RobotState,
    cfg: SimConfig | None = None,
    *,
    record: bool = False,
) -> RolloutResult:
    """Simulate one episode: sense, act, integrate, then check the post-step state."""
    cfg = cfg or SimConfig()
    obstacles = env.obstacles if env.n_obstacles else np.zeros((1, 3))
    offsets = beam_offsets(cfg.sensor_fan)
    field, res = env.field, env.disturbance.resolution
    obs = np.empty(OBS_DIM)
    x1, x2, x3 = x_init.x1, x_init.x2, x_init.x3
    status = TIMEOUT
    traj = [] if record else None
    k = 0
    while k < cfg.max_steps:
        sense_into(obs, x1, x2, x3, obstacles, env.n_obstacles, offsets, SENSOR_RANGE)
        u = float(policy(obs))
        if record:
            traj.append((k * cfg.dt, x1, x2, x3, min(max(u, -U_MAX), U_MAX)))
        d = bilinear(field, res, x1, x2)
        x1, x2, x3 = step_state(x1, x2, x3, u, d, cfg.dt, cfg.speed, cfg.length)
        k += 1
        c = classify(x1, x2, x3, obstacles, env.n_obstacles, cfg.inflation)
        if c >= 0:
            status = c
            break
    if record:
        traj.append((k * cfg.dt, x1, x2, x3, float("nan")))
    J, rho, J_hat = costs_from(
        np.array([status]), np.array([k]), np.array([[x1, x2]]), cfg
    )
    return RolloutResult(
        OUTCOME_NAMES[status],
        k,
        k * cfg.dt if status == ARRIVED else math.inf,
        float(J[0]),
        float(rho[0]),
        float(J_hat[0]),
        traj,
    )


def write_trajectory(path, trajectory) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x1", "x2", "x3", "u"])
        for row in trajectory:
            w.writerow([repr(float(v)) for v in row])
