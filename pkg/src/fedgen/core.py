"""Learner update, cloud update and learner fusion.

One round ``k`` of the federated loop:

1. every learner that is not stopped measures ``(y, z)`` at its current
   parameters, submits ``(theta, y)`` to the cloud and either takes a gradient
   step (``||z|| >= q``) or freezes and marks itself stopped;
2. the cloud keeps the running minimum of ``y + b`` over every submission it
   has ever received and broadcasts the minimizer;
3. a learner that was already stopped before this round switches to the
   broadcast parameters when the broadcast's certified cost beats both its own
   lower-adjusted cost and every value it adopted before.

The loop is written against an abstract sampler (see
:mod:`fedgen.objective`), so it serves the synthetic objectives and the
motion-planning stack alike.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from fedgen import rng as rngmod
from fedgen.bounds import local_bias

if TYPE_CHECKING:
    from fedgen.objective import ObjectiveSampler

logger = logging.getLogger(__name__)

ROUND_LOG_COLUMNS = ("round", "learner", "y", "z_norm", "zeta", "stopped", "adopted_from")
RUN_CHECKPOINT_FORMAT = "fedgen-run/1"


class SamplerError(RuntimeError):
    """A learner's objective sampler failed; carries the learner id and round."""

    def __init__(self, learner: int, round: int, cause: BaseException):
        super().__init__(f"sampler failed for learner {learner} in round {round}: {cause!r}")
        self.learner = learner
        self.round = round


@dataclass(frozen=True)
class ObjectiveEstimate:
    """Empirical cost ``y`` and gradient ``z`` measured at one parameter vector."""

    y: float
    z: np.ndarray
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        object.__setattr__(self, "z", z)
        if z.ndim != 1:
            raise ValueError(f"gradient estimate must be a flat vector, got shape {z.shape}")
        if not math.isfinite(self.y) or not np.all(np.isfinite(z)):
            raise ValueError("objective estimate contains non-finite values")

    @property
    def z_norm(self) -> float:
        return float(np.linalg.norm(self.z))


@dataclass(frozen=True)
class LearnerConfig:
    r: float = 0.01
    rho: float = 0.8
    q: float = 0.04
    n_env: int = 10
    n_init: int = 1
    gamma: float = 0.01

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"step size r must be positive, got {self.r}")
        if not (2.0 / 3.0 < self.rho < 1.0):
            raise ValueError(f"step exponent rho must lie in (2/3, 1), got {self.rho}")
        if not self.q > 0:
            raise ValueError(f"gradient threshold q must be positive, got {self.q}")
        if self.n_env < 1 or self.n_init < 1:
            raise ValueError("n_env and n_init must be positive integers")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def b_gamma(self) -> float:
        return local_bias(self.gamma, self.n_env, self.n_init)


@dataclass
class LearnerState:
    id: int
    theta: np.ndarray
    estimate: ObjectiveEstimate | None = None
    zeta: float = 1.0
    stopped: bool = False
    k_fs: int | None = None
    theta_fs: np.ndarray | None = None
    adopt_events: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        if self.theta.ndim != 1 or not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be a finite flat vector")


@dataclass(frozen=True)
class Submission:
    """What a learner uploads, and what the cloud broadcasts back."""

    learner: int
    iteration: int
    theta: np.ndarray
    y: float
    b: float

    @property
    def key(self) -> tuple[float, int, int]:
        # ties: lowest learner id, then earliest iteration
        return (self.y + self.b, self.learner, self.iteration)


@dataclass
class CloudLedger:
    best: Submission | None = None
    history: list[tuple[int, int, float, float]] | None = None

    @classmethod
    def with_history(cls) -> "CloudLedger":
        return cls(history=[])


@dataclass(frozen=True)
class RoundOutcome:
    """Result of one learner-based update, before fusion is applied."""

    theta_hat: np.ndarray
    submission: Submission
    estimate: ObjectiveEstimate
    was_stopped: bool
    stopped: bool
    sampled: bool


@dataclass(frozen=True)
class RoundRecord:
    round: int
    learner: int
    y: float
    z_norm: float
    zeta: float
    stopped: bool
    adopted_from: int | None
    theta: np.ndarray | None = None


@dataclass
class RunResult:
    learners: list[LearnerState]
    ledger: CloudLedger
    records: list[RoundRecord]
    theta0: list[np.ndarray]
    rounds: int
    converged_at: int | None

    def trajectory(self, learner: int) -> list[RoundRecord]:
        return [rec for rec in self.records if rec.learner == learner]

    def adoption_counts(self) -> dict[int, int]:
        return {st.id: len(st.adopt_events) for st in self.learners}


def step_size(cfg: LearnerConfig, k: int) -> float:
    if k < 1:
        raise ValueError(f"iteration index must be >= 1, got {k}")
    return cfg.r / k**cfg.rho


def learner_round(
    state: LearnerState,
    cfg: LearnerConfig,
    sampler: "ObjectiveSampler",
    k: int,
    rng: np.random.Generator | None = None,
) -> RoundOutcome:
    """Learner-based update of round ``k``. Does not mutate ``state``."""
    if k < 1:
        raise ValueError(f"round index must be >= 1, got {k}")
    was_stopped = state.stopped
    theta = state.theta
    if was_stopped:
        estimate = state.estimate
        if estimate is None:
            raise RuntimeError(f"learner {state.id} is stopped but holds no estimate")
    else:
        if rng is None:
            rng = rngmod.stream(0, rngmod.LEARNER_ROUND, state.id, k)
        try:
            estimate = sampler.sample(theta, rng)
        except Exception as exc:
            raise SamplerError(state.id, k, exc) from exc
        if estimate.z.shape != theta.shape:
            raise ValueError(
                f"sampler returned gradient of length {estimate.z.size}, expected {theta.size}"
            )

    if not was_stopped and estimate.z_norm >= cfg.q:
        theta_hat = theta - step_size(cfg, k) * estimate.z
        project = getattr(sampler, "project", None)
        if project is not None:
            theta_hat = project(theta_hat)
        stopped = False
    else:
        theta_hat = theta.copy()
        stopped = True

    submission = Submission(state.id, k - 1, theta.copy(), float(estimate.y), cfg.b_gamma)
    return RoundOutcome(theta_hat, submission, estimate, was_stopped, stopped, not was_stopped)


def cloud_update(ledger: CloudLedger, submissions: Sequence[Submission]) -> Submission | None:
    """Fold ``submissions`` into the running minimum; return the broadcast."""
    for sub in submissions:
        if ledger.history is not None:
            ledger.history.append((sub.learner, sub.iteration, sub.y, sub.b))
        if ledger.best is None or sub.key < ledger.best.key:
            ledger.best = sub
    return ledger.best


def brute_force_argmin(history: Sequence[tuple[int, int, float, float]]) -> tuple[int, int] | None:
    """Recompute the cloud's choice from the full submission log."""
    if not history:
        return None
    learner, iteration, _, _ = min(history, key=lambda h: (h[2] + h[3], h[0], h[1]))
    return learner, iteration


def fusion_predicate(
    learner: int, y_own: float, b_own: float, zeta: float, was_stopped: bool, broadcast: Submission
) -> bool:
    return (
        broadcast.learner != learner
        and broadcast.y + broadcast.b < min(y_own - b_own, zeta)
        and was_stopped
    )


def fusion_decide(
    state: LearnerState,
    outcome: RoundOutcome,
    broadcast: Submission | None,
    cfg: LearnerConfig,
    k: int,
) -> bool:
    """Apply round ``k``'s update to ``state``, adopting the broadcast if warranted.

    Returns True when the learner adopted the broadcast parameters.
    """
    if outcome.sampled and outcome.stopped and state.k_fs is None:
        state.k_fs = k - 1
        state.theta_fs = state.theta.copy()

    adopt = broadcast is not None and fusion_predicate(
        state.id, outcome.estimate.y, cfg.b_gamma, state.zeta, outcome.was_stopped, broadcast
    )
    if adopt:
        state.theta = broadcast.theta.copy()
        state.zeta = broadcast.y
        state.stopped = False
        # the stored estimate belongs to the old parameters; re-measure next round
        state.estimate = None
        state.adopt_events.append((k, broadcast.learner))
    else:
        state.theta = outcome.theta_hat
        state.stopped = outcome.stopped
        state.estimate = outcome.estimate
    return adopt


def run(
    learners: Sequence[LearnerState],
    cfgs: Sequence[LearnerConfig],
    samplers: Sequence["ObjectiveSampler"],
    K: int,
    seed: int = 0,
    *,
    workers: int | None = None,
    keep_theta: bool = False,
    keep_history: bool = False,
    on_round: Callable[[int, list[RoundRecord]], None] | None = None,
) -> RunResult:
    """Run ``K`` rounds of the federated loop, mutating ``learners`` in place."""
    if not (len(learners) == len(cfgs) == len(samplers)):
        raise ValueError("learners, cfgs and samplers must have equal length")
    if not learners:
        raise ValueError("need at least one learner")
    ids = [st.id for st in learners]
    if len(set(ids)) != len(ids):
        raise ValueError(f"learner ids must be unique, got {ids}")
    dims = {st.theta.size for st in learners}
    if len(dims) != 1:
        raise ValueError(f"all learners must share the parameter dimension, got {sorted(dims)}")

    ledger = CloudLedger.with_history() if keep_history else CloudLedger()
    records: list[RoundRecord] = []
    theta0 = [st.theta.copy() for st in learners]
    all_stopped_since: int | None = None
    pool = ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None

    def one(idx: int, k: int) -> RoundOutcome:
        st = learners[idx]
        return learner_round(
            st, cfgs[idx], samplers[idx], k, rngmod.stream(seed, rngmod.LEARNER_ROUND, st.id, k)
        )

    try:
        for k in range(1, K + 1):
            if pool is not None:
                outcomes = list(pool.map(lambda i: one(i, k), range(len(learners))))
            else:
                outcomes = [one(i, k) for i in range(len(learners))]
            broadcast = cloud_update(ledger, [o.submission for o in outcomes])
            round_records = []
            for st, cfg, out in zip(learners, cfgs, outcomes):
                adopted = fusion_decide(st, out, broadcast, cfg, k)
                round_records.append(
                    RoundRecord(
                        round=k,
                        learner=st.id,
                        y=out.estimate.y,
                        z_norm=out.estimate.z_norm,
                        zeta=st.zeta,
                        stopped=st.stopped,
                        adopted_from=broadcast.learner if adopted else None,
                        theta=st.theta.copy() if keep_theta else None,
                    )
                )
            records.extend(round_records)
            if all(st.stopped for st in learners):
                if all_stopped_since is None:
                    all_stopped_since = k
            else:
                all_stopped_since = None
            if on_round is not None:
                on_round(k, round_records)
    finally:
        if pool is not None:
            pool.shutdown()

    bmin = min(cfg.b_gamma for cfg in cfgs)
    limit = math.floor(1.0 / bmin)
    for st in learners:
        if len(st.adopt_events) > limit:
            # impossible for costs in [0, 1]; flags a sampler that leaves that range
            logger.error(
                "learner %d adopted %d times, above the bound %d", st.id, len(st.adopt_events), limit
            )

    return RunResult(list(learners), ledger, records, theta0, K, all_stopped_since)


def validate_config(
    cfgs: Sequence[LearnerConfig],
    sigma_estimates: Sequence[float],
    grad_lipschitz: float | None = None,
) -> list[str]:
    """Check the sufficient conditions for convergence; never blocks a run."""
    if len(cfgs) != len(sigma_estimates):
        raise ValueError("need one sigma estimate per learner config")
    warnings = []
    for i, (cfg, sigma) in enumerate(zip(cfgs, sigma_estimates)):
        if cfg.q < 4.0 * sigma:
            warnings.append(f"learner {i}: q < 4σ (q={cfg.q:g}, σ̂={sigma:g})")
        if grad_lipschitz is not None and cfg.r > 1.0 / (2.0 * grad_lipschitz):
            warnings.append(
                f"learner {i}: r > 1/(2·L_∇η) (r={cfg.r:g}, bound={1.0 / (2.0 * grad_lipschitz):g})"
            )
    for w in warnings:
        logger.warning(w)
    return warnings


def write_round_log(path: str | Path, records: Sequence[RoundRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUND_LOG_COLUMNS)
        for rec in records:
            writer.writerow(
                [
                    rec.round,
                    rec.learner,
                    repr(rec.y),
                    repr(rec.z_norm),
                    repr(rec.zeta),
                    int(rec.stopped),
                    "" if rec.adopted_from is None else rec.adopted_from,
                ]
            )


def save_run_checkpoint(path: str | Path, result: RunResult) -> None:
    best = result.ledger.best
    payload = {
        "format": RUN_CHECKPOINT_FORMAT,
        "rounds": result.rounds,
        "learners": [
            {
                "id": st.id,
                "theta": st.theta.tolist(),
                "zeta": st.zeta,
                "stopped": st.stopped,
                "k_fs": st.k_fs,
                "adopt_events": st.adopt_events,
            }
            for st in result.learners
        ],
        "ledger": None
        if best is None
        else {
            "learner": best.learner,
            "iteration": best.iteration,
            "y": best.y,
            "b": best.b,
            "theta": best.theta.tolist(),
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_run_checkpoint(path: str | Path) -> tuple[list[LearnerState], CloudLedger]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read run checkpoint {path}: {exc}") from exc
    if payload.get("format") != RUN_CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    learners = [
        LearnerState(
            id=d["id"],
            theta=np.asarray(d["theta"], dtype=float),
            zeta=d["zeta"],
            stopped=d["stopped"],
            k_fs=d["k_fs"],
            adopt_events=[tuple(e) for e in d["adopt_events"]],
        )
        for d in payload["learners"]
    ]
    ledger = CloudLedger()
    if payload["ledger"] is not None:
        b = payload["ledger"]
        ledger.best = Submission(b["learner"], b["iteration"], np.asarray(b["theta"]), b["y"], b["b"])
    return learners, ledger
