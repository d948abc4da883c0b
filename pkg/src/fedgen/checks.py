"""Verification campaigns with fixed seeds.

Each check compares the implementation against an independent reference
(closed forms, brute force, Monte Carlo or ray marching) and returns a
:class:`CheckResult`. ``run_suite`` groups them the way the ``verify``
subcommand exposes them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from typing import Callable

import numpy as np

from fedgen import rng as rngmod
from fedgen.bounds import consensus_gap_bound, improvement_bound, local_bias
from fedgen.core import (
    CloudLedger,
    LearnerConfig,
    LearnerState,
    Submission,
    brute_force_argmin,
    cloud_update,
    run,
)
from fedgen.envgen import X1_MAX, X1_MIN, X2_MAX, X2_MIN, sample_environment
from fedgen.objective import double_well, estimate_sigma, multi_well
from fedgen.policy import antithetic, finite_difference_check, nes_gradients
from fedgen.rollout import SENSOR_RANGE, RobotState, beam_offsets, sense

Z95 = 1.959963984540054


@dataclass
class CheckResult:
    name: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.summary}"


# --------------------------------------------------------------------------- bounds


def decimal_bias(gamma: str, n_env: int, n_init: int, digits: int = 40) -> Decimal:
    """sqrt(ln(2/gamma) / (2 n)) in decimal arithmetic; ``gamma`` is a decimal string."""
    with localcontext() as ctx:
        ctx.prec = digits
        return ((Decimal(2) / Decimal(gamma)).ln() / (2 * n_env * n_init)).sqrt()


def check_bias_formula(tol: float = 1e-9) -> CheckResult:
    cases = [("0.01", 10, 1), ("0.1", 10, 5), ("0.05", 50, 1), ("0.2", 3, 7)]
    worst = 0.0
    for g, n_env, n_init in cases:
        worst = max(worst, abs(local_bias(float(g), n_env, n_init) - float(decimal_bias(g, n_env, n_init))))
    value = local_bias(0.01, 10, 1)
    return CheckResult(
        "bias formula",
        worst <= tol,
        f"b(0.01,10,1)={value:.10f}, max deviation from decimal reference {worst:.1e}",
        {"value": value, "max_error": worst},
    )


def check_hoeffding_calibration(
    draws: int = 10_000, sizes=(5, 20), gammas=(0.01, 0.1), seed: int = 0
) -> CheckResult:
    """Violation rate of eta <= y + b over random (theta, sample) draws."""
    base = multi_well(rngmod.stream(seed, rngmod.VERIFY, 1), dim=2, noise="bernoulli")
    rates, failures = {}, []
    for n in sizes:
        obj = base.with_noise(n_samples=n)
        gen = rngmod.stream(seed, rngmod.VERIFY, 2, n)
        thetas = gen.uniform(-2.5, 2.5, size=(draws, 2))
        eta = np.array([obj.true_eta(t) for t in thetas])
        y = np.array([obj.sample(t, gen).y for t in thetas])
        for g in gammas:
            b = local_bias(g, n, 1)
            rate = float(np.mean(eta > y + b))
            limit = g + 3.0 * math.sqrt(g / draws)
            rates[(n, g)] = (rate, limit)
            if rate > limit:
                failures.append(f"n={n} gamma={g}: violation rate {rate:.4f} > {limit:.4f}")
    summary = ", ".join(f"n={n},γ={g}: {r:.4f}≤{lim:.4f}" for (n, g), (r, lim) in rates.items())
    return CheckResult("upper-bound calibration", not failures, summary, {"rates": rates}, failures)


# --------------------------------------------------------------------------- optimizer


def check_cloud_recursion(streams: int = 100, seed: int = 0) -> CheckResult:
    """Recursive cloud minimum equals the brute-force argmin after every round."""
    failures = []
    for s in range(streams):
        gen = rngmod.stream(seed, rngmod.VERIFY, 3, s)
        n_learners = int(gen.integers(1, 9))
        rounds = int(gen.integers(1, 60))
        # coarse grids make ties common so tie-breaking is exercised
        biases = gen.choice([0.05, 0.1, 0.2], size=n_learners)
        ledger = CloudLedger.with_history()
        for k in range(1, rounds + 1):
            subs = [
                Submission(i, k - 1, np.zeros(1), float(gen.integers(0, 21)) / 20.0, float(biases[i]))
                for i in gen.permutation(n_learners)
            ]
            best = cloud_update(ledger, subs)
            expect = brute_force_argmin(ledger.history)
            if (best.learner, best.iteration) != expect:
                failures.append(f"stream {s} round {k}: recursive {(best.learner, best.iteration)} != {expect}")
                break
    return CheckResult(
        "cloud recursion",
        not failures,
        f"{streams} streams, {len(failures)} mismatches",
        {"streams": streams},
        failures,
    )


@dataclass
class RandomRun:
    learners: int
    adoptions: dict[int, int]
    limit: int
    converged_at: int | None
    first_stops: dict[int, int | None]
    freeze_violations: int


def _freeze_violations(result) -> int:
    """Rounds where a stopped learner's theta moved without an adoption."""
    bad = 0
    for st in result.learners:
        prev = None
        for rec in result.trajectory(st.id):
            if prev is not None and prev.stopped and rec.adopted_from is None:
                if not np.array_equal(prev.theta, rec.theta):
                    bad += 1
            prev = rec
    return bad


def random_synthetic_run(index: int, seed: int = 0, K: int = 500, step_factor: float = 1.5) -> RandomRun:
    """One randomized multi-well run with q set to four times the estimated noise.

    The learner count, dimension, wells, starting points and per-learner sample
    sizes are drawn from the run's own stream. The step is ``step_factor / L``
    with ``L`` the gradient Lipschitz constant of the objective.
    """
    gen = rngmod.stream(seed, rngmod.VERIFY, 4, index)
    n_learners = int(gen.integers(2, 7))
    dim = int(gen.integers(1, 3))
    obj = multi_well(gen, dim=dim, n_wells=4, spread=2.0, noise="bernoulli", sigma_z=0.05)
    r = step_factor / obj.lipschitz()[1]
    states, cfgs, samplers = [], [], []
    for i in range(n_learners):
        n = int(gen.integers(20, 201))
        sampler = obj.with_noise(n_samples=n)
        theta = gen.uniform(-2.0, 2.0, dim)
        sigma = estimate_sigma(sampler, [theta], 20, seed=seed * 1_000_003 + index)
        cfgs.append(LearnerConfig(r=r, rho=0.8, q=4.0 * sigma, n_env=n, n_init=1, gamma=0.1))
        samplers.append(sampler)
        states.append(LearnerState(i, theta))
    result = run(states, cfgs, samplers, K, seed=seed * 1_000_003 + index, keep_theta=True)
    return RandomRun(
        learners=n_learners,
        adoptions=result.adoption_counts(),
        limit=math.floor(1.0 / min(c.b_gamma for c in cfgs)),
        converged_at=result.converged_at,
        first_stops={st.id: st.k_fs for st in result.learners},
        freeze_violations=_freeze_violations(result),
    )


def random_run_campaign(runs: int = 200, seed: int = 0, K: int = 500) -> list[RandomRun]:
    return [random_synthetic_run(i, seed, K) for i in range(runs)]


def check_adoption_bound(campaign: list[RandomRun]) -> CheckResult:
    failures = [
        f"run {i} learner {j}: {n} adoptions > {r.limit}"
        for i, r in enumerate(campaign)
        for j, n in r.adoptions.items()
        if n > r.limit
    ]
    total = sum(sum(r.adoptions.values()) for r in campaign)
    worst = max(max(r.adoptions.values()) / r.limit for r in campaign)
    return CheckResult(
        "adoption count bound",
        not failures,
        f"{len(campaign)} runs, {total} adoptions, max count/limit {worst:.2f}",
        {"adoptions": total, "worst_ratio": worst},
        failures,
    )


def check_convergence(campaign: list[RandomRun], min_fraction: float = 0.95) -> CheckResult:
    failures = []
    for i, r in enumerate(campaign):
        never = [j for j, k in r.first_stops.items() if k is None]
        if never:
            failures.append(f"run {i}: learners {never} never stopped")
        if r.freeze_violations:
            failures.append(f"run {i}: {r.freeze_violations} stopped rounds changed theta")
    fraction = float(np.mean([r.converged_at is not None for r in campaign]))
    if fraction < min_fraction:
        failures.append(f"all-stopped fraction {fraction:.3f} < {min_fraction}")
    return CheckResult(
        "convergence",
        not failures,
        f"all-stopped before K in {fraction:.1%} of runs",
        {"fraction": fraction},
        failures,
    )


@dataclass
class DoubleWellCampaign:
    gaps: np.ndarray
    improvements: np.ndarray
    b: float
    converged: int


def double_well_campaign(seeds: int = 50, learners: int = 4, K: int = 500, seed: int = 0) -> DoubleWellCampaign:
    """Shallow well near -1 (cost 0.6), deep well near +1 (cost 0.05)."""
    n = 50
    obj = double_well(m1=-1.0, d1=0.1, m2=1.0, d2=0.65, base=0.7, a=1.0, noise="bernoulli", sigma_z=0.01, n_samples=n)
    cfg = LearnerConfig(r=0.2, rho=0.8, q=0.04, n_env=n, n_init=1, gamma=0.1)
    gaps, imps, converged = [], [], 0
    for s in range(seeds):
        gen = rngmod.stream(seed, rngmod.VERIFY, 5, s)
        states = [LearnerState(i, gen.uniform(-2.0, 2.0, size=1)) for i in range(learners)]
        res = run(states, [cfg] * learners, [obj] * learners, K, seed=seed * 1_000_003 + s)
        converged += res.converged_at is not None
        etas = [obj.true_eta(st.theta) for st in states]
        gaps.append(max(etas) - min(etas))
        for st in states:
            if st.theta_fs is not None and not np.array_equal(st.theta, st.theta_fs):
                imps.append(obj.true_eta(st.theta) - obj.true_eta(st.theta_fs))
    return DoubleWellCampaign(np.array(gaps), np.array(imps), cfg.b_gamma, converged)


def _half_width(x: np.ndarray) -> float:
    return Z95 * float(np.std(x, ddof=1)) / math.sqrt(len(x)) if len(x) > 1 else float("inf")


def check_consensus(c: DoubleWellCampaign) -> CheckResult:
    mean, hw = float(np.mean(c.gaps)), _half_width(c.gaps)
    bound = consensus_gap_bound([c.b])
    return CheckResult(
        "almost consensus",
        mean <= bound + hw,
        f"mean spread {mean:.4f} <= {bound:.4f} + {hw:.4f}",
        {"mean": mean, "bound": bound, "half_width": hw},
    )


def check_improvement(c: DoubleWellCampaign) -> CheckResult:
    if len(c.improvements) == 0:
        return CheckResult("pareto improvement", False, "no learner adopted; nothing to test")
    mean, hw = float(np.mean(c.improvements)), _half_width(c.improvements)
    bound = improvement_bound([c.b])
    return CheckResult(
        "pareto improvement",
        mean <= bound + hw,
        f"{len(c.improvements)} adopters, mean change {mean:.4f} <= {bound:.4f} + {hw:.4f}",
        {"mean": mean, "bound": bound, "half_width": hw, "count": len(c.improvements)},
    )


# --------------------------------------------------------------------------- nes


def check_nes_estimator(dim: int = 10, pairs: int = 10_000, seed: int = 0) -> CheckResult:
    """Mean NES gradient vs finite differences of the Gaussian-smoothed quadratic."""
    gen = rngmod.stream(seed, rngmod.VERIFY, 6)
    B = gen.standard_normal((dim, dim))
    A = B @ B.T / dim + np.eye(dim)
    c = gen.standard_normal(dim)
    mu = gen.standard_normal(dim)
    sigma = gen.uniform(0.05, 0.5, dim)

    def f(theta):
        d = theta - c
        return float(d @ A @ d)

    def smoothed(m):
        # E f(m + sigma*eps) for eps ~ N(0, I)
        return f(m) + float(np.sum(np.diag(A) * sigma**2))

    eps = gen.standard_normal((pairs, dim))
    per_pair = np.empty((pairs, dim))
    for p in range(pairs):
        e = antithetic(eps[p : p + 1])
        values = np.array([f(mu + sigma * row) for row in e])
        per_pair[p] = nes_gradients(values, e, sigma)[0]
    mean = per_pair.mean(axis=0)
    se = per_pair.std(axis=0, ddof=1) / math.sqrt(pairs)
    fd = finite_difference_check(smoothed, mu, 1e-5)
    z = np.abs(mean - fd) / se
    failures = [f"coordinate {i}: {z[i]:.2f} standard errors" for i in np.flatnonzero(z > 3.0)]

    # odd cost around mu: mirrored samples cancel in the sigma gradient
    w = gen.standard_normal(dim)
    odd_eps = antithetic(gen.standard_normal((pairs, dim)))
    def h(x):
        return float(w @ x + np.sum(x**3) + np.exp(x[0]))

    # h(x) - h(-x) is odd bit for bit, unlike most closed forms under rounding
    odd_values = np.array([h(sigma * e) - h(-(sigma * e)) for e in odd_eps])
    g_sigma = nes_gradients(odd_values, odd_eps, sigma)[1]
    if np.any(g_sigma != 0.0):
        failures.append(f"odd cost: sigma gradient not exactly zero (max {np.max(np.abs(g_sigma)):.2e})")
    return CheckResult(
        "nes estimator",
        not failures,
        f"max |mean - fd| = {float(np.max(z)):.2f} SE over {dim} coordinates; odd-cost sigma gradient exactly 0: {not np.any(g_sigma)}",
        {"z": z, "g_sigma_odd": g_sigma},
        failures,
    )


# --------------------------------------------------------------------------- sensor


def _blocked(px: np.ndarray, py: np.ndarray, obstacles: np.ndarray) -> np.ndarray:
    hit = (py < X2_MIN) | (((px < X1_MIN) | (px > X1_MAX)) & (py <= X2_MAX))
    for cx, cy, r in obstacles:
        hit |= (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    return hit


def marched_distance(
    x1: float, x2: float, angle: float, obstacles: np.ndarray, step: float = 1e-4, chunk: int = 5000
) -> float:
    """First blocked point along a ray, walking in steps of ``step``."""
    dx, dy = math.cos(angle), math.sin(angle)
    # only circles that come within their radius of the ray line can matter
    fx, fy = obstacles[:, 0] - x1, obstacles[:, 1] - x2
    near = obstacles[np.abs(fx * dy - fy * dx) <= obstacles[:, 2] + step]
    n_steps = int(round(SENSOR_RANGE / step))
    for start in range(0, n_steps + 1, chunk):
        t = np.arange(start, min(start + chunk, n_steps + 1)) * step
        hit = np.flatnonzero(_blocked(x1 + t * dx, x2 + t * dy, near))
        if hit.size:
            return float(t[hit[0]])
    return SENSOR_RANGE


def check_sensor(scenes: int = 500, step: float = 1e-4, tol: float = 1e-3, seed: int = 0) -> CheckResult:
    offsets = beam_offsets("stepped")
    worst, failures = 0.0, []
    for s in range(scenes):
        gen = rngmod.stream(seed, rngmod.VERIFY, 7, s)
        env = sample_environment(gen)
        while True:
            p = gen.uniform([X1_MIN, X2_MIN], [X1_MAX, X2_MAX])
            if not np.any(np.hypot(*(env.obstacles[:, :2] - p).T) <= env.obstacles[:, 2]):
                break
        heading = gen.uniform(-math.pi, math.pi)
        got = sense(RobotState(p[0], p[1], heading), env)[4:]
        for b, off in enumerate(offsets):
            ref = marched_distance(p[0], p[1], heading + off, env.obstacles, step)
            err = abs(got[b] - ref)
            worst = max(worst, err)
            if err > tol:
                failures.append(f"scene {s} beam {b + 1}: {got[b]:.6f} vs marched {ref:.6f}")
    return CheckResult(
        "sensor vs ray marching",
        not failures,
        f"{scenes} scenes x {len(offsets)} beams, max deviation {worst:.2e} (tolerance {tol:g})",
        {"max_error": worst},
        failures,
    )


# --------------------------------------------------------------------------- suites


def _optimizer_suite(seed: int) -> list[CheckResult]:
    campaign = random_run_campaign(seed=seed)
    dw = double_well_campaign(seed=seed)
    return [
        check_cloud_recursion(seed=seed),
        check_adoption_bound(campaign),
        check_convergence(campaign),
        check_consensus(dw),
        check_improvement(dw),
    ]


SUITES: dict[str, Callable[[int], list[CheckResult]]] = {
    "bounds": lambda seed: [check_bias_formula(), check_hoeffding_calibration(seed=seed)],
    "optimizer": _optimizer_suite,
    "nes": lambda seed: [check_nes_estimator(seed=seed)],
    "sensor": lambda seed: [check_sensor(seed=seed)],
}


def run_suite(name: str, seed: int = 0) -> list[CheckResult]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name](seed)
