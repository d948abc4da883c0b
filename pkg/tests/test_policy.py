"""MLP policy, NES gradients and the rollout-driven objective sampler."""

import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedgen import rng as rngmod
from fedgen.checks import check_nes_estimator
from fedgen.envgen import DisturbanceParams, EnvironmentSpec, sample_environment
from fedgen.policy import (
    EnvBatch,
    MlpPolicy,
    NesSampler,
    antithetic,
    finite_difference_check,
    init_mu,
    load_policy,
    n_params,
    nes_gradients,
    policy_forward,
    save_policy,
)
from fedgen.rollout import SimConfig

QUARTER = math.pi / 4


class TestForward:
    def test_zero_weights(self):
        layers = (24, 20, 20, 20, 1)
        assert policy_forward(MlpPolicy(layers, np.zeros(n_params(layers))), np.ones(24)) == 0.0

    def test_hand_computed_two_two_one(self):
        W1, b1 = np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.1, -3.0])
        W2, b2 = np.array([[0.5, 4.0]]), np.array([0.2])
        p = MlpPolicy.from_layers([(W1, b1), (W2, b2)])
        # hidden = relu([2 - 1 + 0.1, 1 + 2 - 3]) = [1.1, 0]; out = 0.55 + 0.2
        assert p(np.array([2.0, 1.0])) == pytest.approx(QUARTER * math.tanh(0.75), abs=1e-15)

    def test_final_layer_scaling_monotone(self):
        layers = (24, 8, 1)
        gen = rngmod.stream(1)
        params = init_mu(layers, gen)
        obs = gen.uniform(0, 5, 24)
        head = slice(n_params(layers) - 9, n_params(layers))
        prev = 0.0
        for t in np.linspace(0, 50, 51):
            q = params.copy()
            q[head] *= t
            out = abs(MlpPolicy(layers, q)(obs))
            assert prev <= out <= QUARTER
            prev = out

    def test_output_clamped(self):
        layers = (24, 4, 1)
        gen = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100_000):
            p = MlpPolicy(layers, gen.normal(0, 10, n_params(layers)))
            worst = max(worst, abs(p(gen.normal(0, 10, 24))))
        assert worst <= QUARTER

    def test_flatten_round_trip(self):
        gen = rngmod.stream(2)
        for _ in range(100):
            layers = (24, int(gen.integers(1, 21)), int(gen.integers(1, 21)), 1)
            p = MlpPolicy(layers, gen.normal(size=n_params(layers)))
            back = MlpPolicy.from_layers(p.unflatten())
            assert back.layers == p.layers
            assert back.params.tobytes() == p.params.tobytes()

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            MlpPolicy((24, 2), np.zeros(50))
        with pytest.raises(ValueError):
            MlpPolicy((24, 1), np.zeros(3))
        with pytest.raises(ValueError):
            policy_forward(MlpPolicy((24, 1), np.zeros(25)), np.zeros(5))


class TestNesGradients:
    def test_linear_single_pair(self):
        eps = antithetic(np.array([[0.5]]))
        f = eps[:, 0]  # f(theta) = theta at mu = 0, sigma = 1
        g_mu, g_sigma = nes_gradients(f, eps, np.array([1.0]))
        assert g_mu[0] == pytest.approx(0.25, abs=1e-15)
        assert g_sigma[0] == 0.0

    def test_constant_cost(self):
        eps = antithetic(rngmod.stream(3).standard_normal((15, 7)))
        g_mu, _ = nes_gradients(np.full(30, 0.37), eps, np.full(7, 0.05))
        assert np.all(g_mu == 0.0)

    @settings(max_examples=100)
    @given(arrays(np.float64, (6, 3), elements=st.floats(-3, 3)), arrays(np.float64, 6, elements=st.floats(-1, 1)))
    def test_odd_cost_zeroes_sigma_gradient(self, eps, a):
        pairs = antithetic(eps)
        f = np.empty(12)
        f[0::2], f[1::2] = a, -a
        _, g_sigma = nes_gradients(f, pairs, np.full(3, 0.2))
        assert np.all(g_sigma == 0.0)

    def test_interleaving(self):
        eps = np.arange(6.0).reshape(3, 2)
        out = antithetic(eps)
        np.testing.assert_array_equal(out[0::2], eps)
        np.testing.assert_array_equal(out[1::2], -eps)

    def test_sigma_floor_clamps_with_warning(self, caplog):
        eps = antithetic(np.array([[1.0]]))
        with caplog.at_level(logging.WARNING, logger="fedgen.policy"):
            g_mu, _ = nes_gradients(np.array([1.0, 0.0]), eps, np.array([1e-6]), sigma_floor=1e-3)
        assert "floor" in caplog.text
        assert g_mu[0] == pytest.approx(0.5 / 1e-3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            nes_gradients(np.zeros(3), np.zeros((2, 1)), np.ones(1))

    def test_quadratic_agrees_with_smoothed_gradient(self):
        res = check_nes_estimator(dim=4, pairs=2000, seed=5)
        assert res.passed, res.details


class TestFiniteDifference:
    def test_squared_norm(self):
        g = finite_difference_check(lambda t: float(t @ t), [1.0, 2.0], 1e-4)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)

    def test_linear_exact(self):
        c = np.array([3.0, -2.0, 5.0])
        g = finite_difference_check(lambda t: float(c @ t), [1.0, 2.0, 4.0], 0.5)
        np.testing.assert_array_equal(g, c)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            finite_difference_check(lambda t: 0.0, [0.0], 0.0)


def open_corridor_sampler(pairs=15, layers=(24, 1)):
    """Short horizon in an empty corridor: every episode times out, so the cost is smooth in mu."""
    env = EnvironmentSpec(np.zeros((0, 3)), 0, DisturbanceParams(sigma=0.0))
    starts = np.array([[x, 0.5, math.pi / 2] for x in (-1.0, 0.0, 1.0)])
    batch = EnvBatch([env], starts, np.zeros(3, dtype=np.int64))
    return NesSampler(layers, batch, SimConfig(t_max=0.5, dt=0.05), pair_count=pairs, sigma_floor=1e-5)


def desk_sampler(n_env=3, n_init=2, seed=0):
    gen = rngmod.stream(seed, 77)
    envs = [sample_environment(gen) for _ in range(n_env)]
    return NesSampler((24, 8, 1), EnvBatch.draw(envs, n_init, gen), SimConfig(alpha=0.1))


class TestNesSampler:
    def test_split_join_project(self):
        s = desk_sampler()
        mu, sigma = np.arange(s.dim // 2, dtype=float), np.full(s.dim // 2, 0.05)
        theta = s.join(mu, sigma)
        m2, s2 = s.split(theta)
        np.testing.assert_array_equal(m2, mu)
        np.testing.assert_allclose(s2, sigma, rtol=1e-15)
        low = s.project(s.join(mu, np.full(s.dim // 2, 1e-9)))
        assert np.all(s.split(low)[1] >= s.sigma_floor * (1 - 1e-12))
        np.testing.assert_array_equal(low[: s.dim // 2], mu)

    def test_estimate_contract(self):
        s = desk_sampler()
        theta = s.join(init_mu(s.layers, rngmod.stream(1)), np.full(s.dim // 2, 0.05))
        a = s.sample(theta, rngmod.stream(2))
        b = s.sample(theta, rngmod.stream(2))
        assert 0.0 <= a.y <= 1.0
        assert a.extras["y_hat"] >= a.y
        assert a.z.shape == (s.dim,)
        assert a.y == b.y and a.z.tobytes() == b.z.tobytes()

    def test_y_is_cost_of_mean_policy(self):
        s = desk_sampler()
        mu = init_mu(s.layers, rngmod.stream(1))
        est = s.sample(s.join(mu, np.full(s.dim // 2, 0.5)), rngmod.stream(3))
        J, J_hat = s.evaluate(mu)
        assert est.y == J[0] and est.extras["y_hat"] == J_hat[0]

    def test_mu_block_matches_local_linearization(self):
        s = open_corridor_sampler(pairs=200)
        n = s.dim // 2
        mu = init_mu(s.layers, rngmod.stream(4)) * 0.2
        sigma = np.full(n, s.sigma_floor)
        J, _ = s.evaluate(mu)
        assert J[0] == 1.0  # timeout everywhere
        grad = finite_difference_check(lambda m: s.evaluate(m)[1][0], mu, 1e-5)
        gen = rngmod.stream(6)
        est = s.sample(s.join(mu, sigma), gen)
        eps = antithetic(rngmod.stream(6).standard_normal((200, n)))
        expect = np.mean((eps @ grad)[:, None] * eps, axis=0)
        # beam readings saturate at the sensor range, so the cost has kinks; a tiny
        # sigma keeps almost every perturbation on one smooth piece
        np.testing.assert_allclose(est.z[:n], expect, atol=10 * s.sigma_floor)
        assert np.linalg.norm(grad) > 10 * s.sigma_floor  # the comparison is not vacuous

    def test_sigma_below_floor_warns(self, caplog):
        s = desk_sampler()
        theta = s.join(np.zeros(s.dim // 2), np.full(s.dim // 2, 1e-6))
        with caplog.at_level(logging.WARNING, logger="fedgen.policy"):
            s.sample(theta, rngmod.stream(1))
        assert "floor" in caplog.text

    def test_resampling_draws_new_environments(self):
        s = desk_sampler()
        s.resample_each_round = True
        theta = s.join(init_mu(s.layers, rngmod.stream(1)), np.full(s.dim // 2, 0.05))
        fixed = desk_sampler().sample(theta, rngmod.stream(9))
        fresh = s.sample(theta, rngmod.stream(9))
        assert fresh.z.tobytes() != fixed.z.tobytes()

    def test_batch_layout(self):
        s = desk_sampler(n_env=3, n_init=2)
        assert len(s.batch) == 6
        np.testing.assert_array_equal(s.batch.env_index, [0, 0, 1, 1, 2, 2])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        layers = (24, 5, 1)
        mu = init_mu(layers, rngmod.stream(1))
        sigma = np.full(mu.size, 0.05)
        save_policy(tmp_path / "p.json", layers, mu, sigma, learner=2)
        p, s, meta = load_policy(tmp_path / "p.json")
        assert p.layers == layers and p.params.tobytes() == mu.tobytes()
        np.testing.assert_array_equal(s, sigma)
        assert meta == {"learner": 2}

    def test_sigma_optional(self, tmp_path):
        save_policy(tmp_path / "p.json", (24, 1), np.zeros(25))
        assert load_policy(tmp_path / "p.json")[1] is None

    @pytest.mark.parametrize(
        "payload",
        [
            "{not json",
            json.dumps({"format": "other"}),
            json.dumps({"format": "fedgen-policy/1", "layers": [24, 1], "mu": [0.0] * 24}),
            json.dumps({"format": "fedgen-policy/1", "layers": [24, 1], "mu": [0.0] * 25, "sigma": [1.0]}),
            json.dumps({"format": "fedgen-policy/1", "layers": [24, 1]}),
            json.dumps({"format": "fedgen-policy/1", "layers": [24, 1], "mu": [float("nan")] * 25}),
        ],
    )
    def test_refuses_bad_files(self, tmp_path, payload):
        (tmp_path / "p.json").write_text(payload)
        with pytest.raises(ValueError):
            load_policy(tmp_path / "p.json")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValueError):
            load_policy(tmp_path / "absent.json")
