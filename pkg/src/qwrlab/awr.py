"""Advantage weighted regression baseline: state-value critic regressed to
TD(lambda) returns, actor regressed toward the stored action only."""

from __future__ import annotations

import numpy as np

from .config import TrainerConfig
from .exceptions import TrainingDivergenceError
from .netcore import Adam, Net
from .policies import ActorNet
from .replay import ReplayBuffer
from .training import (
    ActorStepResult,
    BaseTrainer,
    advantage_weights,
    normalize_advantages,
    weighted_regression_step,
)


class ValueNet:
    """Scalar state-value network."""

    def __init__(self, net: Net):
        if net.output_width != 1:
            raise ValueError("value head must have width 1")
        self.net = net

    @classmethod
    def build(cls, obs_dim, hidden=(256, 256), rng_seed=0):
        return cls(Net.mlp([obs_dim, *hidden, 1], rng_seed=rng_seed))

    @property
    def params(self):
        return self.net.params

    @params.setter
    def params(self, value):
        self.net.params = np.asarray(value, dtype=np.float64)

    @property
    def n_params(self):
        return self.net.n_params

    @property
    def nets(self):
        return {"value": self.net}

    def copy(self):
        return ValueNet(self.net.copy())

    def __call__(self, states):
        return self.net.forward(states)[..., 0]

    def grad(self, states, cotangent):
        return self.net.backward(states, np.asarray(cotangent, dtype=np.float64)[..., None])


def lambda_returns(rewards, next_values, terminal, gamma, lam):
    """Recursive TD(lambda) return for one trajectory.

    ``G_t = r_t + gamma * ((1 - lam) V(s_{t+1}) + lam G_{t+1})`` with the
    final step bootstrapping to ``V(s_L)``, or to 0 when ``terminal``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    L = rewards.size
    G = np.empty(L)
    tail = 0.0 if terminal else next_values[-1]
    G[-1] = rewards[-1] + gamma * tail
    for t in range(L - 2, -1, -1):
        G[t] = rewards[t] + gamma * ((1.0 - lam) * next_values[t] + lam * G[t + 1])
    return G


def td_lambda_returns(trajectory, vnet: ValueNet, gamma, lam):
    """TD(lambda) return for every step of ``trajectory`` (a dict of arrays)."""
    next_values = vnet(np.asarray(trajectory["next_states"], dtype=np.float64))
    terminal = bool(np.asarray(trajectory["dones"])[-1])
    return lambda_returns(trajectory["rewards"], next_values, terminal, gamma, lam)


def buffer_returns(buf: ReplayBuffer, vnet: ValueNet, gamma, lam):
    """TD(lambda) returns for the whole buffer, aligned with its flat arrays.

    Processes all trajectories at once, one step offset at a time from the end.
    """
    f = buf.arrays
    next_values = vnet(f["next_states"])
    rewards, dones = f["rewards"], f["dones"]
    remaining = f["traj_len"] - f["step_index"] - 1
    G = np.zeros(rewards.size)
    last = remaining == 0
    G[last] = rewards[last] + gamma * np.where(dones[last], 0.0, next_values[last])
    for offset in range(1, int(remaining.max()) + 1 if remaining.size else 0):
        idx = np.flatnonzero(remaining == offset)
        G[idx] = rewards[idx] + gamma * ((1.0 - lam) * next_values[idx] + lam * G[idx + 1])
    return G


def awr_critic_step(buf: ReplayBuffer, vnet: ValueNet, cfg: TrainerConfig, rng, optimizer: Adam,
                    returns):
    """One Adam step regressing ``V(s)`` toward the precomputed ``returns``."""
    index = buf.sample_indices(cfg.batch_size, rng)
    states = buf.arrays["states"][index]
    diff = vnet(states) - returns[index]
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise TrainingDivergenceError("non-finite critic loss", step=optimizer.step_count + 1)
    vnet.params = optimizer.update(vnet.params, vnet.grad(states, 2.0 * diff / diff.size))
    return loss


def awr_actor_step(buf: ReplayBuffer, actor: ActorNet, vnet: ValueNet, cfg: TrainerConfig, rng,
                   optimizer: Adam, returns) -> ActorStepResult:
    """One Adam step of ``exp(A / beta)``-weighted regression toward the stored actions."""
    batch = buf.gather(buf.sample_indices(cfg.batch_size, rng))
    adv = returns[batch.index] - vnet(batch.states)
    adv_n, adv_std, skipped = normalize_advantages(adv)
    xi, n_clipped = advantage_weights(adv_n, cfg.beta, cfg.xi_clip)
    B = adv.size
    loss = weighted_regression_step(actor, optimizer, batch.states, batch.actions, xi / B)
    return ActorStepResult(loss, adv_std, skipped, n_clipped)


class AWRTrainer(BaseTrainer):
    algorithm = "awr"

    def build_critic(self, obs_dim, width, discrete, seed):
        return ValueNet.build(obs_dim, hidden=self.cfg.hidden, rng_seed=seed)

    def critic_n_params(self):
        return self.critic.n_params

    @property
    def return_lambda(self):
        return 1.0 if self.cfg.awr_returns == "monte_carlo" else self.cfg.lam

    def refresh_returns(self):
        self.returns = buffer_returns(self.buffer, self.critic, self.cfg.gamma, self.return_lambda)
        return self.returns

    def critic_loop(self):
        self.refresh_returns()
        return [
            awr_critic_step(self.buffer, self.critic, self.cfg, self.rng_critic, self.critic_opt, self.returns)
            for _ in range(self.cfg.n_critic_steps)
        ]

    def actor_loop(self):
        self.refresh_returns()
        return [
            awr_actor_step(self.buffer, self.actor, self.critic, self.cfg, self.rng_actor,
                           self.actor_opt, self.returns)
            for _ in range(self.cfg.n_actor_steps)
        ]
