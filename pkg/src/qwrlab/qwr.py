"""Q-value weighted regression: Q-learning critic with a generalized backup and
an actor regressed toward several actions per state drawn from the stored
sampling policy."""

from __future__ import annotations

import numpy as np

from .backup import QNet, batch_multistep_targets, sync_target
from .config import TrainerConfig
from .exceptions import TrainingDivergenceError
from .netcore import Adam
from .policies import CATEGORICAL, ActorNet, log_softmax
from .replay import ReplayBuffer
from .training import (
    ActorStepResult,
    BaseTrainer,
    advantage_weights,
    normalize_advantages,
    weighted_regression_step,
)


def critic_step(buf: ReplayBuffer, qnet: QNet, qnet_target: QNet, cfg: TrainerConfig, rng,
                optimizer: Adam):
    """One Adam step on the mean squared error to multi-step targets.

    Targets come from the frozen ``qnet_target`` and are constants. Returns the
    loss measured before the step.
    """
    index = buf.sample_indices(cfg.batch_size, rng)
    targets, _ = batch_multistep_targets(
        buf, index, qnet_target, cfg.backup_operator, cfg.k, cfg.gamma, cfg.lam, cfg.T, rng,
        weighting=cfg.td_weighting,
    )
    batch = buf.gather(index)
    q = qnet.forward(batch.states, batch.actions)
    diff = q - targets
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise TrainingDivergenceError("non-finite critic loss", step=optimizer.step_count + 1)
    grad = qnet.grad(batch.states, batch.actions, 2.0 * diff / diff.size)
    qnet.params = optimizer.update(qnet.params, grad)
    return loss


def actor_step(buf: ReplayBuffer, actor: ActorNet, qnet: QNet, cfg: TrainerConfig, rng,
               optimizer: Adam) -> ActorStepResult:
    """One Adam step of advantage-weighted regression toward sampled actions.

    Categorical sampling policies are enumerated exactly (every action with
    its mu-probability); Gaussian ones contribute ``cfg.k`` samples per state.
    The baseline is the mu-expectation of Q at the state.
    """
    batch = buf.gather(buf.sample_indices(cfg.batch_size, rng))
    B = batch.states.shape[0]
    if buf.mu_variant == CATEGORICAL:
        mu = np.exp(log_softmax(batch.mu_values))
        q = qnet.q_all(batch.states)
        adv = q - np.sum(mu * q, axis=1, keepdims=True)
        adv_n, adv_std, skipped = normalize_advantages(adv, weights=mu)
        xi, n_clipped = advantage_weights(adv_n, cfg.beta, cfg.xi_clip)
        actions = np.broadcast_to(np.arange(q.shape[1]), q.shape)
        weights = mu * xi / B
    else:
        noise = rng.standard_normal((B, cfg.k, batch.mu_values.shape[1]))
        actions = batch.mu_values[:, None, :] + batch.mu_std[:, None, None] * noise
        q = qnet.q_samples(batch.states, actions)
        adv = q - q.mean(axis=1, keepdims=True)
        adv_n, adv_std, skipped = normalize_advantages(adv)
        xi, n_clipped = advantage_weights(adv_n, cfg.beta, cfg.xi_clip)
        weights = xi / (B * cfg.k)
    loss = weighted_regression_step(actor, optimizer, batch.states, actions, weights)
    return ActorStepResult(loss, adv_std, skipped, n_clipped)


class QWRTrainer(BaseTrainer):
    algorithm = "qwr"

    def build_critic(self, obs_dim, width, discrete, seed):
        self.critic_target = None
        qnet = QNet.build(obs_dim, width, hidden=self.cfg.hidden, discrete=discrete, rng_seed=seed)
        self.critic_target = qnet.copy()
        self.sync_count = 0
        return qnet

    def critic_n_params(self):
        return self.critic.n_params

    def sync(self):
        sync_target(self.critic, self.critic_target)
        self.sync_count += 1

    def critic_loop(self):
        cfg = self.cfg
        losses = []
        self.sync()
        for i in range(cfg.n_critic_steps):
            if i % cfg.update_frequency == 0:
                self.sync()
            losses.append(critic_step(self.buffer, self.critic, self.critic_target, cfg,
                                      self.rng_critic, self.critic_opt))
        return losses

    def actor_loop(self):
        return [
            actor_step(self.buffer, self.actor, self.critic, self.cfg, self.rng_actor, self.actor_opt)
            for _ in range(self.cfg.n_actor_steps)
        ]
