"""Training, evaluation and learner-count sweeps.

Every run writes one directory: the resolved config, the per-round log,
per-learner checkpoints at initialization, first stop and the final round,
and evaluation CSVs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedgen import rng as rngmod
from fedgen.bounds import generalization_upper_bound, safe_arrival_lower_bound
from fedgen.config import RunConfig, dump_config
from fedgen.core import LearnerState, RunResult, run, save_run_checkpoint, validate_config, write_round_log
from fedgen.envgen import (
    EnvironmentRejected,
    EnvironmentSpec,
    generate_environments,
    read_corpus,
    sample_environment,
    sample_initial_state,
)
from fedgen.objective import SyntheticObjective, double_well, multi_well, quadratic_well
from fedgen.policy import EnvBatch, MlpPolicy, NesSampler, init_mu, load_policy, save_policy
from fedgen.rollout import ARRIVED, pack_envs, simulate_batch

logger = logging.getLogger(__name__)

PHASES = ("init", "fs", "final")
EVAL_COLUMNS = (
    "label", "learner", "phase", "M", "seed", "mean_J", "mean_rho10", "rate", "rate_ci",
    "J_ci", "y_train", "b_gamma", "gamma", "cost_upper", "arrival_lower",
)
EPISODE_COLUMNS = ("label", "episode", "outcome", "steps", "J", "rho")
SWEEP_COLUMNS = (
    "learners", "blocks", "policies", "mean_rho10", "std_rho10", "mean_J", "std_J",
    "mean_rate", "std_rate",
)
Z95 = 1.959963984540054


# --------------------------------------------------------------------------- build


def build_synthetic_objective(cfg: RunConfig) -> SyntheticObjective:
    s = cfg.synthetic
    noise = dict(
        sigma_y=s.sigma_y,
        sigma_z=s.sigma_z,
        n_samples=cfg.learner.n_env * cfg.learner.n_init,
        noise=s.noise,
    )
    if s.kind == "double_well":
        return double_well(s.m1, s.d1, s.m2, s.d2, s.base, s.a, **noise)
    if s.kind == "quadratic_well":
        return quadratic_well(s.dim, s.curvature, **noise)
    return multi_well(rngmod.stream(cfg.run.seed, rngmod.SYNTHETIC), s.dim, s.n_wells, **noise)


def training_corpus(cfg: RunConfig, learner: int) -> list[EnvironmentSpec]:
    n_env = cfg.learner.n_env
    if cfg.motion.corpus:
        envs = read_corpus(cfg.motion.corpus)
        need = cfg.run.learners * n_env
        if len(envs) < need:
            raise ValueError(f"corpus {cfg.motion.corpus} has {len(envs)} specs, need {need}")
        return envs[learner * n_env : (learner + 1) * n_env]
    return generate_environments(
        n_env, cfg.run.seed, rngmod.TRAIN_ENVS, learner, disturbance=cfg.disturbance
    )


def build_motion_learner(cfg: RunConfig, learner: int) -> tuple[LearnerState, NesSampler]:
    envs = training_corpus(cfg, learner)
    batch = EnvBatch.draw(envs, cfg.learner.n_init, rngmod.stream(cfg.run.seed, rngmod.TRAIN_STARTS, learner))
    sampler = NesSampler(
        cfg.motion.layers,
        batch,
        cfg.sim,
        pair_count=cfg.motion.pairs,
        sigma_floor=cfg.motion.sigma_floor,
        resample_each_round=cfg.motion.resample_each_round,
        n_env=cfg.learner.n_env,
        n_init=cfg.learner.n_init,
        env_factory=lambda g: sample_environment(g, cfg.disturbance),
    )
    mu = init_mu(cfg.motion.layers, rngmod.stream(cfg.run.seed, rngmod.THETA_INIT, learner))
    theta = sampler.join(mu, np.full(mu.size, cfg.motion.sigma_init))
    return LearnerState(learner, theta), sampler


def build_learners(cfg: RunConfig):
    if cfg.run.mode == "synthetic":
        obj = build_synthetic_objective(cfg)
        states = []
        for i in range(cfg.run.learners):
            g = rngmod.stream(cfg.run.seed, rngmod.THETA_INIT, i)
            states.append(LearnerState(i, g.uniform(cfg.synthetic.init_low, cfg.synthetic.init_high, obj.dim)))
        return states, [obj] * cfg.run.learners
    pairs = [build_motion_learner(cfg, i) for i in range(cfg.run.learners)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


# --------------------------------------------------------------------------- train


@dataclass
class PhaseSnapshot:
    learner: int
    phase: str
    round: int | None
    theta: np.ndarray
    y: float


@dataclass
class TrainResult:
    config: RunConfig
    result: RunResult
    snapshots: dict[tuple[int, str], PhaseSnapshot]
    out: Path | None
    warnings: list[str]

    def adopters(self) -> list[int]:
        return [st.id for st in self.result.learners if st.adopt_events]


def _final_y(state: LearnerState, sampler, seed: int, rounds: int) -> float:
    if state.stopped and state.estimate is not None:
        return state.estimate.y
    # theta after the last step has not been measured yet
    return sampler.sample(state.theta, rngmod.stream(seed, rngmod.LEARNER_ROUND, state.id, rounds + 1)).y


def cmd_train(cfg: RunConfig, out: str | Path | None = None, *, sigma_probe_repeats: int = 0) -> TrainResult:
    """Run the federated loop and write the run directory (if ``out`` is given)."""
    out_dir = Path(out) if out is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.cfg").write_text(dump_config(cfg))
    states, samplers = build_learners(cfg)
    cfgs = [cfg.learner] * len(states)

    warnings: list[str] = []
    if sigma_probe_repeats >= 2:
        from fedgen.objective import estimate_sigma

        sigmas = [
            estimate_sigma(s, [st.theta], sigma_probe_repeats, seed=cfg.run.seed)
            for st, s in zip(states, samplers)
        ]
        lip = cfg.motion.grad_lipschitz or None
        if cfg.run.mode == "synthetic":
            lip = samplers[0].lipschitz()[1]
        warnings = validate_config(cfgs, sigmas, lip)

    result = run(states, cfgs, samplers, cfg.run.rounds, cfg.run.seed, workers=cfg.run.workers)

    snapshots: dict[tuple[int, str], PhaseSnapshot] = {}
    for st, sampler, th0 in zip(result.learners, samplers, result.theta0):
        traj = result.trajectory(st.id)
        snapshots[(st.id, "init")] = PhaseSnapshot(st.id, "init", 0, th0, traj[0].y)
        if st.k_fs is not None:
            snapshots[(st.id, "fs")] = PhaseSnapshot(st.id, "fs", st.k_fs, st.theta_fs, traj[st.k_fs].y)
        y_final = _final_y(st, sampler, cfg.run.seed, cfg.run.rounds)
        snapshots[(st.id, "final")] = PhaseSnapshot(st.id, "final", cfg.run.rounds, st.theta.copy(), y_final)

    if out_dir is not None:
        write_round_log(out_dir / "rounds.csv", result.records)
        save_run_checkpoint(out_dir / "run_checkpoint.json", result)
        ckpt = out_dir / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        for (i, phase), snap in sorted(snapshots.items()):
            save_snapshot(ckpt / f"learner{i}_{phase}.json", cfg, samplers[0], snap)
        summary = {
            "converged_at": result.converged_at,
            "adoptions": {str(st.id): st.adopt_events for st in result.learners},
            "k_fs": {str(st.id): st.k_fs for st in result.learners},
            "warnings": warnings,
        }
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return TrainResult(cfg, result, snapshots, out_dir, warnings)


def save_snapshot(path: Path, cfg: RunConfig, sampler, snap: PhaseSnapshot) -> None:
    meta = dict(
        learner=snap.learner,
        phase=snap.phase,
        round=snap.round,
        y_train=snap.y,
        b_gamma=cfg.learner.b_gamma,
        gamma=cfg.learner.gamma,
        mode=cfg.run.mode,
    )
    if cfg.run.mode == "motion":
        mu, sigma = sampler.split(snap.theta)
        save_policy(path, cfg.motion.layers, mu, sigma, **meta)
    else:
        path.write_text(json.dumps({"format": "fedgen-theta/1", "theta": snap.theta.tolist(), "meta": meta}))


# --------------------------------------------------------------------------- eval


@dataclass(frozen=True)
class EvalReport:
    label: str
    learner: int | None
    phase: str | None
    M: int
    seed: int
    mean_J: float
    mean_rho10: float
    rate: float
    rate_ci: float
    J_ci: float
    y_train: float
    b_gamma: float
    gamma: float
    cost_upper: float
    arrival_lower: float

    def row(self) -> list:
        return [getattr(self, c) for c in EVAL_COLUMNS]


@dataclass(frozen=True)
class EvalSet:
    packed: object
    starts: np.ndarray
    env_index: np.ndarray
    seed: int


def build_eval_set(
    M: int, seed: int, cfg: RunConfig, corpus: Sequence[EnvironmentSpec] | None = None
) -> EvalSet:
    """M unseen environments, one start state each, from the evaluation stream.

    With ``corpus`` the first M stored environments are used instead of fresh
    draws; start states still come from the evaluation stream.
    """
    if corpus is not None and len(corpus) < M:
        raise ValueError(f"corpus holds {len(corpus)} environments, M={M} requested")
    envs, starts = [], []
    for l in range(M):
        attempt = 0
        while True:
            if corpus is not None:
                env = corpus[l]
            else:
                env = sample_environment(rngmod.stream(seed, rngmod.EVAL_ENVS, 0, l, attempt), cfg.disturbance)
            try:
                start = sample_initial_state(env, rngmod.stream(seed, rngmod.EVAL_ENVS, 1, l, attempt))
                break
            except EnvironmentRejected:
                if corpus is not None:
                    raise
                attempt += 1
        envs.append(env)
        starts.append(start.as_array())
    return EvalSet(pack_envs(envs), np.array(starts), np.arange(M, dtype=np.int64), seed)


def evaluate_policy(policy: MlpPolicy, eval_set: EvalSet, cfg: RunConfig):
    return simulate_batch(
        eval_set.packed,
        eval_set.env_index,
        eval_set.starts,
        policy.params,
        np.zeros(len(eval_set.env_index), dtype=np.int64),
        policy.layers,
        cfg.sim,
    )


def report_from(label, learner, phase, res, eval_set, y_train, b, gamma) -> EvalReport:
    M = len(res.J)
    rate = float(np.mean(res.outcome == ARRIVED))
    J_std = float(np.std(res.J, ddof=1)) if M > 1 else 0.0
    if y_train is None or not (0.0 <= y_train <= 1.0):
        cost_ub = arrival_lb = float("nan")
    else:
        cost_ub = generalization_upper_bound(y_train, b, gamma).value
        arrival_lb = safe_arrival_lower_bound(y_train, b, gamma).value
    return EvalReport(
        label=label,
        learner=learner,
        phase=phase,
        M=M,
        seed=eval_set.seed,
        mean_J=float(np.mean(res.J)),
        mean_rho10=float(np.mean(0.1 * res.rho)),
        rate=rate,
        rate_ci=Z95 * math.sqrt(rate * (1.0 - rate) / M),
        J_ci=Z95 * J_std / math.sqrt(M),
        y_train=float("nan") if y_train is None else float(y_train),
        b_gamma=b,
        gamma=gamma,
        cost_upper=cost_ub,
        arrival_lower=arrival_lb,
    )


def cmd_eval(
    checkpoints: Sequence[str | Path],
    cfg: RunConfig,
    M: int | None = None,
    seed: int | None = None,
    out: str | Path | None = None,
    eval_set: EvalSet | None = None,
) -> list[EvalReport]:
    """Evaluate policy checkpoints on M fresh environments."""
    M = M or cfg.run.eval_size
    seed = cfg.run.eval_seed if seed is None else seed
    eval_set = eval_set or build_eval_set(M, seed, cfg)
    reports, episodes = [], []
    for path in checkpoints:
        policy, _, meta = load_policy(path)
        res = evaluate_policy(policy, eval_set, cfg)
        label = Path(path).stem
        reports.append(
            report_from(
                label,
                meta.get("learner"),
                meta.get("phase"),
                res,
                eval_set,
                meta.get("y_train"),
                meta.get("b_gamma", cfg.learner.b_gamma),
                meta.get("gamma", cfg.learner.gamma),
            )
        )
        for e in range(len(res.J)):
            episodes.append((label, e, int(res.outcome[e]), int(res.steps[e]), repr(float(res.J[e])), repr(float(res.rho[e]))))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_reports(out / "eval.csv", reports)
        with open(out / "eval_episodes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EPISODE_COLUMNS)
            w.writerows(episodes)
    return reports


def write_reports(path: Path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for r in reports:
            w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in r.row()])


def eval_train_result(tr: TrainResult, eval_set: EvalSet) -> list[EvalReport]:
    """Evaluate every stored phase snapshot of a motion run on ``eval_set``."""
    cfg = tr.config
    reports = []
    sampler_n = sum(a * b + b for a, b in zip(cfg.motion.layers[:-1], cfg.motion.layers[1:]))
    for (i, phase), snap in sorted(tr.snapshots.items(), key=lambda kv: (kv[0][0], PHASES.index(kv[0][1]))):
        policy = MlpPolicy(cfg.motion.layers, snap.theta[:sampler_n])
        res = evaluate_policy(policy, eval_set, cfg)
        reports.append(
            report_from(f"learner{i}_{phase}", i, phase, res, eval_set, snap.y, cfg.learner.b_gamma, cfg.learner.gamma)
        )
    return reports


# --------------------------------------------------------------------------- sweep


def block_seed(base: int, learners: int, block: int) -> int:
    """Seed of one training block; distinct learner counts never share a block."""
    return int(np.random.SeedSequence([base, rngmod.SWEEP, learners, block]).generate_state(1, np.uint32)[0])


@dataclass
class SweepBlock:
    learners: int
    block: int
    seed: int
    train: TrainResult
    reports: list[EvalReport]

    def phase(self, phase: str) -> list[EvalReport]:
        return [r for r in self.reports if r.phase == phase]


def cmd_sweep_learners(
    cfg: RunConfig,
    counts: Sequence[int],
    blocks: int = 1,
    out: str | Path | None = None,
    on_block=None,
) -> tuple[list[list], list[SweepBlock]]:
    """Train independently for each learner count; aggregate final-policy metrics."""
    if not counts:
        raise ValueError("counts must be non-empty")
    if cfg.run.mode != "motion":
        raise ValueError("sweep-learners evaluates motion policies; set run.mode = motion")
    out_dir = Path(out) if out is not None else None
    eval_set = build_eval_set(cfg.run.eval_size, cfg.run.eval_seed, cfg)
    rows, all_blocks = [], []
    for count in counts:
        finals = []
        for b in range(blocks):
            seed = block_seed(cfg.run.seed, count, b)
            sub = cfg.with_run(learners=count, seed=seed)
            block_out = None if out_dir is None else out_dir / f"V{count}_block{b}"
            tr = cmd_train(sub, block_out)
            reports = eval_train_result(tr, eval_set)
            if block_out is not None:
                write_reports(block_out / "eval.csv", reports)
            blk = SweepBlock(count, b, seed, tr, reports)
            all_blocks.append(blk)
            finals.extend(blk.phase("final"))
            if on_block is not None:
                on_block(blk)
        rho = np.array([r.mean_rho10 for r in finals])
        J = np.array([r.mean_J for r in finals])
        rate = np.array([r.rate for r in finals])
        rows.append([count, blocks, len(finals), rho.mean(), rho.std(), J.mean(), J.std(), rate.mean(), rate.std()])
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_COLUMNS)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return rows, all_blocks
