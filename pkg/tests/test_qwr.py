import numpy as np
import pytest

from qwrlab import awr as awr_mod
from qwrlab import qwr as qwr_mod
from qwrlab.backup import QNet, q_value
from qwrlab.config import TrainerConfig
from qwrlab.envs import BitFlipEnv, PointEnv
from qwrlab.exceptions import TrainingDivergenceError
from qwrlab.netcore import Adam
from qwrlab.policies import CATEGORICAL, GAUSSIAN, ActorNet, log_prob
from qwrlab.qwr import QWRTrainer, actor_step, critic_step
from qwrlab.replay import ReplayBuffer, buffer_from_dataset
from qwrlab.training import (
    advantage_weights,
    collect,
    normalize_advantages,
    train,
    weighted_regression_step,
)

SMALL = dict(hidden=(16,), batch_size=32, n_actor_steps=20, n_critic_steps=20,
             interactions_per_iteration=100, n_iterations=2, eval_episodes=3)


def small_cfg(**kw):
    return TrainerConfig(**{**SMALL, **kw})


def one_hot_buffer(rng, n_states=6, n_actions=3, terminal=True, reward=None):
    buf = ReplayBuffer(1000)
    for i in range(n_states):
        s = np.eye(n_states)[i]
        nxt = np.eye(n_states)[(i + 1) % n_states]
        r = rng.normal() if reward is None else reward
        buf.append_arrays([s], [int(rng.integers(n_actions))], [r], [nxt], [terminal],
                          rng.normal(size=(1, n_actions)))
    return buf


class TestCollect:
    def test_bitflip_trajectory_count(self):
        env = BitFlipEnv(8)
        actor = ActorNet.build(9, 8, CATEGORICAL, hidden=(8,))
        buf = ReplayBuffer()
        trajs = collect(actor, env, 1000, buf, np.random.default_rng(0))
        assert len(trajs) == 200 and len(buf) == 1000

    @pytest.mark.parametrize("env,variant", [(BitFlipEnv(8), CATEGORICAL), (PointEnv(), GAUSSIAN)])
    def test_stored_mu_is_actor_output(self, env, variant):
        width = env.n_actions if env.discrete else env.action_dim
        actor = ActorNet.build(env.obs_dim, width, variant, hidden=(8,), rng_seed=3)
        buf = ReplayBuffer()
        collect(actor, env, 60, buf, np.random.default_rng(1))
        for t in buf:
            assert np.isfinite(log_prob(t.mu_params, t.action))
            assert t.mu_params == actor.policy_params(t.state)

    def test_deterministic(self):
        env = BitFlipEnv(10)
        actor = ActorNet.build(11, 10, CATEGORICAL, hidden=(8,))
        a, b = ReplayBuffer(), ReplayBuffer()
        collect(actor, env, 300, a, np.random.default_rng(5))
        collect(actor, env, 300, b, np.random.default_rng(5))
        for key in ("states", "actions", "rewards", "mu_values", "dones"):
            assert a.arrays[key].tobytes() == b.arrays[key].tobytes()


class TestCriticStep:
    def test_fixed_point(self):
        rng = np.random.default_rng(0)
        buf = one_hot_buffer(rng, reward=0.7)
        q = QNet.build(6, 3, hidden=(8,), discrete=True, rng_seed=1)
        q.embed.params[:] = 0.0
        q.head.params[-1] = 0.7
        before = q.params.copy()
        opt = Adam(q.n_params, 1e-2)
        loss = critic_step(buf, q, q.copy(), small_cfg(T=1), rng, opt)
        assert loss == 0.0
        np.testing.assert_array_equal(q.params, before)

    def test_single_transition_loss(self):
        rng = np.random.default_rng(2)
        buf = ReplayBuffer()
        s, nxt = np.array([0.2, -0.4]), np.array([1.0, 0.5])
        mu_logits = np.array([0.1, -0.3, 0.7])
        buf.append_arrays([s, nxt], [1, 2], [0.9, 0.0], [nxt, nxt], [False, True], [rng.normal(size=3), mu_logits])
        q = QNet.build(2, 3, hidden=(8,), discrete=True, rng_seed=4)
        target = QNet.build(2, 3, hidden=(8,), discrete=True, rng_seed=5)
        cfg = small_cfg(T=1, batch_size=1, backup="mean", gamma=0.9)

        class FirstOnly:
            def integers(self, lo, hi, size):
                return np.zeros(size, dtype=np.int64)

        mu = np.exp(mu_logits) / np.exp(mu_logits).sum()
        f = sum(mu[a] * q_value(target, nxt, a) for a in range(3))
        expected = (0.9 + 0.9 * f - q_value(q, s, 1)) ** 2
        loss = critic_step(buf, q, target, cfg, FirstOnly(), Adam(q.n_params, 1e-3))
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_loss_trend_decreases(self):
        rng = np.random.default_rng(3)
        buf = one_hot_buffer(rng, n_states=10, terminal=False)
        q = QNet.build(10, 3, hidden=(32,), discrete=True, rng_seed=0)
        target = q.copy()
        cfg = small_cfg(batch_size=10, gamma=0.5)
        opt = Adam(q.n_params, 5e-3)
        losses = [critic_step(buf, q, target, cfg, rng, opt) for _ in range(200)]
        slope = np.polyfit(np.arange(200), losses, 1)[0]
        assert slope < 0

    def test_target_untouched(self):
        rng = np.random.default_rng(0)
        buf = one_hot_buffer(rng)
        q = QNet.build(6, 3, hidden=(8,), discrete=True)
        target = q.copy()
        before = target.params.copy()
        opt = Adam(q.n_params, 1e-2)
        for _ in range(5):
            critic_step(buf, q, target, small_cfg(), rng, opt)
        np.testing.assert_array_equal(target.params, before)
        assert not np.array_equal(q.params, before)


class TestAdvantages:
    def test_population_normalization(self):
        norm, std, skipped = normalize_advantages(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(norm, [-np.sqrt(1.5), 0.0, np.sqrt(1.5)], rtol=0, atol=1e-15)
        assert std == pytest.approx(np.sqrt(2 / 3)) and not skipped

    def test_constant_skips(self):
        norm, std, skipped = normalize_advantages(np.full(4, 2.0))
        np.testing.assert_array_equal(norm, 0.0)
        assert skipped

    def test_weighted_matches_repetition(self):
        adv = np.array([[1.0, -2.0], [0.5, 3.0]])
        w = np.array([[1.0, 3.0], [2.0, 2.0]])
        norm, std, _ = normalize_advantages(adv, weights=w)
        # rows are per-state distributions; repeat entries by mass to get the same statistics
        rep = np.array([1.0, -2.0, -2.0, -2.0, 0.5, 0.5, 3.0, 3.0])
        assert std == pytest.approx(rep.std(), rel=1e-14)
        np.testing.assert_allclose(norm, (adv - rep.mean()) / rep.std(), rtol=1e-14)

    def test_exponent(self):
        xi, clipped = advantage_weights(np.array([1.0]), beta=1.0)
        assert xi[0] == pytest.approx(np.e, abs=1e-15) and clipped == 0

    def test_clip(self):
        xi, clipped = advantage_weights(np.array([30.0, 0.0]), beta=1.0, clip=20.0)
        assert xi[0] == np.exp(20.0) and clipped == 1

    def test_large_beta_is_behavior_cloning(self):
        rng = np.random.default_rng(0)
        actor = ActorNet.build(3, 2, GAUSSIAN, hidden=(8,), rng_seed=0)
        states = rng.normal(size=(16, 3))
        actions = rng.normal(size=(16, 4, 2))
        adv, _, _ = normalize_advantages(rng.normal(size=(16, 4)))
        xi, _ = advantage_weights(adv, beta=1e6)
        _, g_xi = actor.weighted_log_prob_grad(states, actions, xi)
        _, g_bc = actor.weighted_log_prob_grad(states, actions, np.ones_like(xi))
        cos = g_xi @ g_bc / (np.linalg.norm(g_xi) * np.linalg.norm(g_bc))
        assert cos >= 0.999


class TestActorStep:
    def test_constant_q_regresses_toward_mu(self):
        rng = np.random.default_rng(0)
        buf = one_hot_buffer(rng)
        q = QNet.build(6, 3, hidden=(8,), discrete=True)
        q.embed.params[:] = 0.0
        actor = ActorNet.build(6, 3, CATEGORICAL, hidden=(8,), rng_seed=2)
        twin = actor.copy()
        cfg = small_cfg(batch_size=8)
        res = actor_step(buf, actor, q, cfg, np.random.default_rng(7), Adam(actor.net.n_params, 1e-2))
        assert res.normalization_skipped and res.xi_clipped == 0
        # replay the same sample with uniform weights on the mu-enumerated actions
        batch = buf.gather(buf.sample_indices(8, np.random.default_rng(7)))
        mu = np.exp(batch.mu_values) / np.exp(batch.mu_values).sum(1, keepdims=True)
        actions = np.broadcast_to(np.arange(3), mu.shape)
        weighted_regression_step(twin, Adam(twin.net.n_params, 1e-2), batch.states, actions, mu / 8)
        np.testing.assert_allclose(actor.net.params, twin.net.params, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("discrete", [True, False])
    def test_critic_untouched(self, discrete):
        rng = np.random.default_rng(1)
        if discrete:
            buf = one_hot_buffer(rng)
            actor = ActorNet.build(6, 3, CATEGORICAL, hidden=(8,))
        else:
            trajs = [{"states": rng.normal(size=(6, 6)), "actions": rng.normal(size=(6, 1)), "rewards": rng.normal(size=6)}]
            buf = buffer_from_dataset(trajs, discrete=False)
            actor = ActorNet.build(6, 1, GAUSSIAN, hidden=(8,))
        q = QNet.build(6, 3 if discrete else 1, hidden=(8,), discrete=discrete)
        before = q.params.copy()
        actor_before = actor.net.params.copy()
        opt = Adam(actor.net.n_params, 1e-2)
        for _ in range(3):
            actor_step(buf, actor, q, small_cfg(batch_size=4), rng, opt)
        np.testing.assert_array_equal(q.params, before)
        assert not np.array_equal(actor.net.params, actor_before)

    def test_shares_regression_path_with_awr(self, monkeypatch):
        calls = []

        def spy(actor, opt, states, actions, weights):
            calls.append((np.shape(states), np.shape(weights)))
            return weighted_regression_step(actor, opt, states, actions, weights)

        monkeypatch.setattr(qwr_mod, "weighted_regression_step", spy)
        monkeypatch.setattr(awr_mod, "weighted_regression_step", spy)
        rng = np.random.default_rng(0)
        trajs = [{"states": rng.normal(size=(8, 2)), "actions": rng.normal(size=(8, 1)), "rewards": rng.normal(size=8)}]
        buf = buffer_from_dataset(trajs, discrete=False)
        cfg = small_cfg(k=1, batch_size=5)
        actor = ActorNet.build(2, 1, GAUSSIAN, hidden=(4,))
        q = QNet.build(2, 1, hidden=(4,))
        v = awr_mod.ValueNet.build(2, hidden=(4,))
        actor_step(buf, actor, q, cfg, rng, Adam(actor.net.n_params, 1e-3))
        awr_mod.awr_actor_step(buf, actor, v, cfg, rng, Adam(actor.net.n_params, 1e-3),
                               awr_mod.buffer_returns(buf, v, 0.9, 0.9))
        (s_q, w_q), (s_a, w_a) = calls
        assert s_q == s_a and np.prod(w_q) == np.prod(w_a)


class TestTrainer:
    def test_zero_iterations(self):
        cfg = small_cfg(n_iterations=0)
        fresh = QWRTrainer(cfg, env=BitFlipEnv(6))
        result = train(cfg, env=BitFlipEnv(6), algorithm="qwr")
        assert result.metrics == []
        np.testing.assert_array_equal(result.actor.net.params, fresh.actor.net.params)
        np.testing.assert_array_equal(result.critic.params, fresh.critic.params)

    @pytest.mark.parametrize("steps,expected", [(300, 4), (1000, 11), (100, 2)])
    def test_sync_count_multiples(self, steps, expected):
        trainer = QWRTrainer(small_cfg(n_critic_steps=steps, batch_size=4, hidden=(4,)), env=BitFlipEnv(5))
        collect(trainer.actor, trainer.env, 20, trainer.buffer, trainer.rng_collect)
        trainer.critic_loop()
        assert trainer.sync_count == expected == steps // 100 + 1

    def test_sync_count_partial(self):
        trainer = QWRTrainer(small_cfg(n_critic_steps=250, batch_size=4, hidden=(4,)), env=BitFlipEnv(5))
        collect(trainer.actor, trainer.env, 20, trainer.buffer, trainer.rng_collect)
        trainer.critic_loop()
        # one sync before the loop, then at i = 0, 100, 200
        assert trainer.sync_count == 4

    def test_target_frozen_within_99_steps(self):
        trainer = QWRTrainer(small_cfg(n_critic_steps=99, batch_size=4, hidden=(4,)), env=BitFlipEnv(5))
        collect(trainer.actor, trainer.env, 20, trainer.buffer, trainer.rng_collect)
        start = trainer.critic.params.copy()
        trainer.critic_loop()
        np.testing.assert_array_equal(trainer.critic_target.params, start)
        assert not np.array_equal(trainer.critic.params, start)

    def test_determinism(self):
        cfg = small_cfg(seed=3)
        a = train(cfg, env=BitFlipEnv(6), algorithm="qwr").metrics
        b = train(cfg, env=BitFlipEnv(6), algorithm="qwr").metrics
        assert [m.to_record() for m in a] == [m.to_record() for m in b]

    def test_eval_bounded_on_bitflip(self):
        for m in train(small_cfg(n_iterations=3), env=BitFlipEnv(7), algorithm="qwr").metrics:
            assert -5.0 <= m.eval_return_mean <= 5.0

    def test_point_env_runs(self):
        metrics = train(small_cfg(backup="lse"), env=PointEnv(), algorithm="qwr").metrics
        assert len(metrics) == 2 and all(np.isfinite(m.critic_loss_mean) for m in metrics)
        assert metrics[-1].env_steps_total == 200

    def test_divergence_reported(self):
        trajs = [{"states": np.zeros((3, 2)), "actions": np.zeros((3, 1)), "rewards": np.array([0.0, np.nan, 0.0])}]
        with pytest.raises(TrainingDivergenceError) as info:
            train(small_cfg(offline=True), dataset=trajs, algorithm="qwr")
        assert info.value.step == 0

    def test_needs_env_or_dataset(self):
        with pytest.raises(ValueError):
            QWRTrainer(small_cfg())
        with pytest.raises(ValueError):
            QWRTrainer(small_cfg(offline=True), env=BitFlipEnv(5))
