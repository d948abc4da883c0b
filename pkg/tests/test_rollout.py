"""Dynamics, sensing and episode costs."""

import csv
import math

import numpy as np
import pytest

from fedgen import rng as rngmod
from fedgen.checks import marched_distance
from fedgen.envgen import DisturbanceParams, EnvironmentSpec, sample_environment, sample_initial_state
from fedgen.policy import MlpPolicy, init_mu
from fedgen.rollout import (
    COLLIDED,
    OBS_DIM,
    RobotState,
    SimConfig,
    beam_offsets,
    classify,
    distance_to_goal,
    integrate_step,
    kruzkov,
    pack_envs,
    rollout,
    sense,
    simulate_batch,
    wrap_angle,
    write_trajectory,
)

CALM = DisturbanceParams(sigma=0.0)


def corridor(obstacles=()):
    return EnvironmentSpec(np.asarray(obstacles, dtype=float).reshape(-1, 3), 0, CALM)


def with_constant_field(env, value):
    env.__dict__["field"] = np.full(env.disturbance.shape, float(value))
    return env


def zero(obs):
    return 0.0


class TestIntegrateStep:
    def test_straight(self):
        s = integrate_step(RobotState(0, 0, 0), 0.0, None, 0.1)
        assert (s.x1, s.x2, s.x3) == pytest.approx((0.25, 0.0, 0.0), abs=1e-15)

    def test_full_lock_turn(self):
        s = integrate_step(RobotState(0, 0, 0), math.pi / 4, None, 0.1)
        assert s.x3 == pytest.approx(1.25, abs=1e-12)

    def test_control_clamped(self):
        a = integrate_step(RobotState(0, 0, 0), 3.0, None, 0.1)
        b = integrate_step(RobotState(0, 0, 0), math.pi / 4, None, 0.1)
        assert a == b

    def test_constant_disturbance_adds_to_x1_only(self):
        env = with_constant_field(corridor(), 0.3)
        calm = integrate_step(RobotState(1, 2, 0.4), 0.1, None, 0.05)
        pushed = integrate_step(RobotState(1, 2, 0.4), 0.1, env, 0.05)
        assert pushed.x1 - calm.x1 == pytest.approx(0.3 * 0.05, abs=1e-15)
        assert (pushed.x2, pushed.x3) == (calm.x2, calm.x3)

    @pytest.mark.parametrize("a", [0.0, math.pi, -math.pi, 3 * math.pi, 7.0, -7.0, 1e-3])
    def test_wrap_range(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-12)
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-12)


class TestSense:
    def test_layout(self):
        obs = sense(RobotState(1.0, 2.0, 0.3), corridor())
        assert obs.shape == (OBS_DIM,)
        assert obs[:4] == pytest.approx([1.0, 2.0, math.sin(0.3), math.cos(0.3)])

    def test_open_field_reads_range(self):
        obs = sense(RobotState(0.0, 5.0, math.pi / 2), corridor())
        np.testing.assert_array_equal(obs[4:], 5.0)

    def test_single_obstacle(self):
        obs = sense(RobotState(0.0, 0.0, 5 * math.pi / 6), corridor([[0.0, 3.0, 0.5]]))
        assert obs[4] == pytest.approx(2.5, abs=1e-12)
        assert obs[4] == pytest.approx(marched_distance(0.0, 0.0, math.pi / 2, np.array([[0.0, 3.0, 0.5]])), abs=1e-4)

    def test_fans(self):
        stepped = beam_offsets("stepped")
        assert stepped[0] == pytest.approx(-math.pi / 3) and stepped[-1] == pytest.approx(-math.pi / 60)
        sym = beam_offsets("symmetric")
        assert sym[0] == pytest.approx(-math.pi / 3) and sym[-1] == pytest.approx(math.pi / 3)
        with pytest.raises(ValueError):
            beam_offsets("wide")

    def test_readings_in_range_and_match_marching(self):
        gen = rngmod.stream(0, 55)
        for s in range(20):
            env = sample_environment(gen)
            p = RobotState(gen.uniform(-5, 5), gen.uniform(0, 10), gen.uniform(-math.pi, math.pi))
            obs = sense(p, env)
            assert np.all((obs[4:] >= 0) & (obs[4:] <= 5))
            for b, off in enumerate(beam_offsets()):
                ref = marched_distance(p.x1, p.x2, p.x3 + off, env.obstacles)
                assert abs(obs[4 + b] - ref) <= 1e-3

    def test_inside_obstacle_reads_zero(self):
        obs = sense(RobotState(0.0, 3.0, 0.0), corridor([[0.0, 3.0, 0.5]]))
        np.testing.assert_array_equal(obs[4:], 0.0)


class TestRollout:
    def test_corridor_crossing(self):
        res = rollout(corridor(), zero, RobotState(0.0, 0.5, math.pi / 2), SimConfig(alpha=1.0))
        assert res.outcome == "arrived"
        assert res.steps == math.ceil(9.5 / 0.125) == 76
        assert res.arrival_time == pytest.approx(3.8)
        assert res.J == pytest.approx(1 - math.exp(-3.8), abs=1e-12)
        assert res.J == pytest.approx(0.97763, abs=1e-5)
        assert res.rho == 0.0 and res.J_hat == res.J

    def test_halving_dt(self):
        a = rollout(corridor(), zero, RobotState(0.0, 0.5, math.pi / 2), SimConfig(dt=0.05))
        b = rollout(corridor(), zero, RobotState(0.0, 0.5, math.pi / 2), SimConfig(dt=0.025))
        assert abs(a.arrival_time - b.arrival_time) < 0.05

    def test_immediate_collision(self):
        env = corridor([[0.0, 5.1, 0.2]])
        res = rollout(env, zero, RobotState(0.0, 4.875, math.pi / 2))
        assert res.outcome == "collided" and res.steps == 1
        assert res.J == 1.0 and res.rho == pytest.approx(5.0) and res.J_hat == pytest.approx(1.5)
        assert math.isinf(res.arrival_time)

    def test_wall_collision(self):
        res = rollout(corridor(), zero, RobotState(4.9, 5.0, 0.0))
        assert res.outcome == "collided" and res.steps == 1

    def test_timeout_charges_final_distance(self):
        res = rollout(corridor(), lambda o: math.pi / 4, RobotState(0.0, 5.0, math.pi / 2), record=True)
        assert res.outcome == "timeout" and res.steps == 400 and res.J == 1.0
        x1, x2 = res.trajectory[-1][1:3]
        assert res.rho == pytest.approx(distance_to_goal((x1, x2)))

    def test_tailwind_arrives_sooner_in_x1(self):
        env = with_constant_field(corridor(), 0.5)
        res = rollout(env, zero, RobotState(-4.0, 0.5, math.pi / 2), record=True)
        assert res.outcome == "arrived"
        assert res.trajectory[-1][1] == pytest.approx(-4.0 + 0.5 * 0.05 * 76, abs=1e-9)

    def test_trichotomy_and_costs(self):
        layers = (24, 8, 1)
        gen = rngmod.stream(3, 3)
        seen = set()
        for i in range(60):
            env = sample_environment(gen)
            pol = MlpPolicy(layers, init_mu(layers, gen) * 4)
            res = rollout(env, pol, sample_initial_state(env, gen), SimConfig(alpha=0.1))
            seen.add(res.outcome)
            assert 0.0 <= res.J <= 1.0
            assert (res.J < 1.0) == (res.outcome == "arrived")
            assert res.J_hat == 0.1 * res.rho + res.J
        assert "collided" in seen

    def test_deterministic(self):
        env = sample_environment(rngmod.stream(9))
        pol = MlpPolicy((24, 8, 1), init_mu((24, 8, 1), rngmod.stream(10)))
        start = sample_initial_state(env, rngmod.stream(11))
        assert rollout(env, pol, start) == rollout(env, pol, start)

    def test_batch_matches_scalar(self):
        layers = (24, 8, 8, 1)
        gen = rngmod.stream(4, 4)
        envs = [sample_environment(gen) for _ in range(6)]
        starts = np.array([sample_initial_state(e, gen).as_array() for e in envs])
        params = np.stack([init_mu(layers, gen) * 3 for _ in range(2)])
        cfg = SimConfig(alpha=0.1)
        idx = np.repeat(np.arange(6), 2)
        pol = np.tile(np.arange(2), 6)
        batch = simulate_batch(pack_envs(envs), idx, starts[idx], params, pol, layers, cfg)
        for r in range(12):
            res = rollout(envs[idx[r]], MlpPolicy(layers, params[pol[r]]), RobotState(*starts[idx[r]]), cfg)
            assert res.steps == batch.steps[r]
            assert res.J == batch.J[r] and res.rho == batch.rho[r]

    def test_non_finite_state_is_collision(self):
        assert classify(math.nan, 1.0, 0.0, np.zeros((1, 3)), 0, 0.0) == COLLIDED

    def test_trajectory_dump(self, tmp_path):
        res = rollout(corridor(), zero, RobotState(0.0, 0.5, math.pi / 2), record=True)
        write_trajectory(tmp_path / "t.csv", res.trajectory)
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["t", "x1", "x2", "x3", "u"]
        assert len(rows) == 1 + 77


class TestCosts:
    def test_kruzkov(self):
        assert kruzkov(0.0) == 0.0
        assert kruzkov(math.inf) == 1.0
        assert kruzkov(math.log(2.0)) == pytest.approx(0.5, abs=1e-15)
        assert kruzkov(10.0, alpha=0.1) == pytest.approx(1 - math.exp(-1.0))
        with pytest.raises(ValueError):
            kruzkov(-1.0)

    @pytest.mark.parametrize("p,d", [((0, 5), 5.0), ((6, 10), 1.0), ((3, 9), 1.0), ((-8, 6), 5.0)])
    def test_distance_to_goal(self, p, d):
        assert distance_to_goal(p) == pytest.approx(d)

    def test_sim_config_checks(self):
        with pytest.raises(ValueError):
            SimConfig(dt=0.03, t_max=1.0)
        with pytest.raises(ValueError):
            SimConfig(alpha=0.0)
        assert SimConfig().max_steps == 400
