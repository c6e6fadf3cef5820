"""Machinery shared by the QWR and AWR trainers: rollouts, evaluation,
advantage weighting and the outer iteration loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import TrainerConfig
from .exceptions import InvalidParameterError, ProtocolError, TrainingDivergenceError
from .netcore import Adam
from .policies import CATEGORICAL, GAUSSIAN, ActorNet
from .replay import ReplayBuffer, buffer_from_dataset

log = logging.getLogger(__name__)

ADV_STD_EPS = 1e-8


@dataclass
class IterationMetrics:
    iteration: int
    env_steps_total: int
    eval_return_mean: float
    eval_return_median: float
    critic_loss_mean: float
    actor_loss_mean: float
    advantage_std: float
    normalization_skipped: int = 0
    xi_clipped: int = 0
    wall_time: float = 0.0

    def to_record(self):
        """JSON-ready dict without ``wall_time`` (kept out so runs compare byte-for-byte)."""
        record = asdict(self)
        record.pop("wall_time")
        for key, value in record.items():
            if isinstance(value, float) and not math.isfinite(value):
                record[key] = None
        return record


@dataclass
class ActorStepResult:
    loss: float
    advantage_std: float
    normalization_skipped: bool = False
    xi_clipped: int = 0


@dataclass
class TrainResult:
    actor: ActorNet
    critic: object
    metrics: list = field(default_factory=list)
    buffer: ReplayBuffer | None = None


def greedy_action(actor: ActorNet, obs):
    head = actor.head(obs)
    if actor.variant == CATEGORICAL:
        return int(np.argmax(head))
    return head


def collect(actor: ActorNet, env, n_interactions, buf: ReplayBuffer, rng):
    """Roll complete episodes with ``pi_theta`` until at least ``n_interactions`` steps.

    The actor's per-state distribution parameters are stored alongside each
    step as its sampling policy. Returns the appended trajectories as dicts.
    """
    trajectories = []
    steps = 0
    while steps < n_interactions:
        obs = env.reset(rng)
        states, actions, rewards, next_states, dones, mu = [], [], [], [], [], []
        done = False
        while not done:
            head = actor.head(obs)
            if actor.variant == CATEGORICAL:
                z = head - head.max()
                p = np.exp(z)
                p /= p.sum()
                action = int(rng.choice(p.size, p=p))
            else:
                action = head + actor.std * rng.standard_normal(head.size)
            nxt, reward, done = env.step(action)
            states.append(obs)
            actions.append(action)
            rewards.append(reward)
            next_states.append(nxt)
            dones.append(done)
            mu.append(head)
            obs = nxt
        L = len(rewards)
        traj = {
            "states": np.array(states), "actions": np.array(actions), "rewards": np.array(rewards),
            "next_states": np.array(next_states), "dones": np.array(dones), "mu_values": np.array(mu),
        }
        traj["traj_id"] = buf.append_arrays(
            traj["states"], traj["actions"], traj["rewards"], traj["next_states"], traj["dones"],
            traj["mu_values"], mu_std=np.full(L, actor.std), mu_variant=actor.variant,
        )
        trajectories.append(traj)
        steps += L
    return trajectories


def evaluate(actor: ActorNet, env, episodes, rng):
    """Returns of ``episodes`` runs of the deterministic (argmax / mean) policy."""
    returns = np.zeros(episodes)
    for i in range(episodes):
        obs = env.reset(rng)
        done = False
        while not done:
            obs, reward, done = env.step(greedy_action(actor, obs))
            returns[i] += reward
    return returns


def normalize_advantages(adv, weights=None):
    """Standardize advantages over the whole batch (population statistics).

    ``weights`` (rows summing to anything positive) turn the statistics into
    per-state expectations, for the exact categorical form. Returns
    ``(normalized, std, skipped)``; when the std is below 1e-8 only the mean
    is removed and ``skipped`` is true.
    """
    adv = np.asarray(adv, dtype=np.float64)
    if weights is None:
        mean = adv.mean()
        std = float(np.sqrt(np.mean((adv - mean) ** 2)))
    else:
        w = weights / weights.sum(axis=-1, keepdims=True)
        n_rows = adv.size / adv.shape[-1]
        mean = np.sum(w * adv) / n_rows
        std = float(np.sqrt(np.sum(w * (adv - mean) ** 2) / n_rows))
    skipped = std < ADV_STD_EPS
    return (adv - mean) / (1.0 if skipped else std), std, skipped


def advantage_weights(normalized_adv, beta, clip=20.0):
    """``xi = exp(A / beta)`` with the exponent capped at ``clip``; also returns the number capped."""
    z = np.asarray(normalized_adv, dtype=np.float64) / beta
    clipped = int(np.count_nonzero(z > clip))
    return np.exp(np.minimum(z, clip)), clipped


def weighted_regression_step(actor: ActorNet, optimizer: Adam, states, actions, weights):
    """One ascent step on ``sum(weights * log pi(actions | states))``; returns the loss (negated objective)."""
    value, grad = actor.weighted_log_prob_grad(states, actions, weights)
    if not np.isfinite(value):
        raise TrainingDivergenceError("non-finite actor loss", step=optimizer.step_count + 1)
    actor.net.params = optimizer.update(actor.net.params, -grad)
    return -value


def infer_spaces(env=None, dataset=None):
    """``(obs_dim, discrete, n_actions or action_dim)`` from an env or a dataset."""
    if env is not None:
        return env.obs_dim, env.discrete, env.n_actions if env.discrete else env.action_dim
    if not dataset:
        raise InvalidParameterError("need an environment or a non-empty dataset")
    obs_dim = np.asarray(dataset[0]["states"]).shape[1]
    first = np.asarray(dataset[0]["actions"])
    discrete = np.issubdtype(first.dtype, np.integer) and first.ndim == 1
    if discrete:
        return obs_dim, True, int(max(np.max(t["actions"]) for t in dataset)) + 1
    return obs_dim, False, first.reshape(len(first), -1).shape[1]


class BaseTrainer:
    """Outer loop: collect (online only), critic loop, actor loop, evaluate."""

    algorithm = None

    def __init__(self, cfg: TrainerConfig, env=None, dataset=None):
        if cfg.offline and dataset is None:
            raise InvalidParameterError("offline training needs a dataset")
        if not cfg.offline and env is None:
            raise InvalidParameterError("online training needs an environment")
        self.cfg = cfg
        self.env = env
        obs_dim, discrete, width = infer_spaces(env, dataset)
        self.obs_dim, self.discrete, self.action_width = obs_dim, discrete, width
        seeds = np.random.SeedSequence(cfg.seed).spawn(6)
        init_actor, init_critic = (int(s.generate_state(1, np.uint64)[0] >> np.uint64(1)) for s in seeds[:2])
        self.rng_collect, self.rng_critic, self.rng_actor, self.rng_eval = (
            np.random.default_rng(s) for s in seeds[2:]
        )
        self.actor = ActorNet.build(
            obs_dim, width, CATEGORICAL if discrete else GAUSSIAN,
            hidden=cfg.hidden, std=cfg.policy_std, rng_seed=init_actor,
        )
        self.critic = self.build_critic(obs_dim, width, discrete, init_critic)
        self.actor_opt = Adam(self.actor.net.n_params, cfg.actor_lr)
        self.critic_opt = Adam(self.critic_n_params(), cfg.critic_lr)
        if cfg.offline:
            self.buffer = buffer_from_dataset(
                dataset, discrete, n_actions=width if discrete else None,
                std=cfg.policy_std, epsilon=cfg.offline_epsilon,
            )
        else:
            self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.env_steps_total = 0
        self.iteration = 0
        self.metrics = []

    # hooks -------------------------------------------------------------------

    def build_critic(self, obs_dim, width, discrete, seed):
        raise NotImplementedError

    def critic_n_params(self):
        raise NotImplementedError

    def critic_loop(self):
        """Run the critic steps of one iteration; returns the list of losses."""
        raise NotImplementedError

    def actor_loop(self):
        """Run the actor steps of one iteration; returns a list of ActorStepResult."""
        raise NotImplementedError

    # loop ----------------------------------------------------------------------

    def run_iteration(self):
        start = time.perf_counter()
        cfg = self.cfg
        if not cfg.offline:
            trajs = collect(self.actor, self.env, cfg.interactions_per_iteration, self.buffer, self.rng_collect)
            self.env_steps_total += sum(len(t["rewards"]) for t in trajs)
        if len(self.buffer) == 0:
            raise ProtocolError("replay buffer is empty")
        critic_losses = self.critic_loop()
        actor_results = self.actor_loop()
        if self.env is not None and cfg.eval_episodes > 0:
            returns = evaluate(self.actor, self.env, cfg.eval_episodes, self.rng_eval)
            eval_mean, eval_median = float(returns.mean()), float(np.median(returns))
        else:
            eval_mean = eval_median = float("nan")
        m = IterationMetrics(
            iteration=self.iteration,
            env_steps_total=self.env_steps_total,
            eval_return_mean=eval_mean,
            eval_return_median=eval_median,
            critic_loss_mean=float(np.mean(critic_losses)) if critic_losses else float("nan"),
            actor_loss_mean=float(np.mean([r.loss for r in actor_results])) if actor_results else float("nan"),
            advantage_std=float(np.mean([r.advantage_std for r in actor_results])) if actor_results else float("nan"),
            normalization_skipped=sum(r.normalization_skipped for r in actor_results),
            xi_clipped=sum(r.xi_clipped for r in actor_results),
            wall_time=time.perf_counter() - start,
        )
        if m.normalization_skipped:
            log.warning("iteration %d: advantage std ~ 0 in %d actor steps", self.iteration, m.normalization_skipped)
        if m.xi_clipped:
            log.info("iteration %d: %d advantage weights hit the exp(%g) cap", self.iteration, m.xi_clipped, cfg.xi_clip)
        self.metrics.append(m)
        self.iteration += 1
        return m

    def run(self, n_iterations=None, callback=None):
        n = self.cfg.n_iterations if n_iterations is None else n_iterations
        for _ in range(n):
            iteration = self.iteration
            try:
                m = self.run_iteration()
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"iteration {iteration}: {exc}", step=iteration) from exc
            if callback is not None:
                callback(m)
        return TrainResult(self.actor, self.critic, list(self.metrics), self.buffer)


def train(cfg: TrainerConfig, env=None, dataset=None, algorithm="qwr", callback=None) -> TrainResult:
    """Train QWR or AWR for ``cfg.n_iterations`` and return nets plus metrics."""
    from .awr import AWRTrainer
    from .qwr import QWRTrainer

    trainers = {"qwr": QWRTrainer, "awr": AWRTrainer}
    if algorithm not in trainers:
        raise InvalidParameterError(f"unknown algorithm {algorithm!r}")
    return trainers[algorithm](cfg, env=env, dataset=dataset).run(callback=callback)
