"""scikit-learn style wrappers around the QWR and AWR trainers.

``fit`` accepts an environment (instance, name or ``{"env": ..., **params}``
dict) for online training, or a dataset (JSONL path or list of trajectory
dicts) for offline training. ``predict`` maps observations to greedy actions.
"""

from __future__ import annotations

import os

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .config import TrainerConfig
from .envs import make_env
from .policies import CATEGORICAL, log_softmax
from .replay import read_dataset
from .training import evaluate, train

_DEFAULTS = TrainerConfig()


def _resolve_input(X):
    """``(env, dataset)`` from whatever was passed to ``fit``."""
    if isinstance(X, (str, os.PathLike)) and str(X).endswith(".jsonl"):
        return None, read_dataset(X)
    if isinstance(X, (str, dict)):
        return make_env(X), None
    if isinstance(X, list):
        return None, X
    if hasattr(X, "reset") and hasattr(X, "step"):
        return X, None
    raise TypeError(f"cannot train from {type(X).__name__}; pass an env, env spec or dataset")


class _RegressionPolicyEstimator(BaseEstimator):
    algorithm = None

    def __init__(
        self,
        k=_DEFAULTS.k,
        T=_DEFAULTS.T,
        beta=_DEFAULTS.beta,
        gamma=_DEFAULTS.gamma,
        lam=_DEFAULTS.lam,
        actor_lr=_DEFAULTS.actor_lr,
        critic_lr=_DEFAULTS.critic_lr,
        batch_size=_DEFAULTS.batch_size,
        buffer_capacity=_DEFAULTS.buffer_capacity,
        n_actor_steps=_DEFAULTS.n_actor_steps,
        n_critic_steps=_DEFAULTS.n_critic_steps,
        update_frequency=_DEFAULTS.update_frequency,
        interactions_per_iteration=_DEFAULTS.interactions_per_iteration,
        n_iterations=_DEFAULTS.n_iterations,
        backup=_DEFAULTS.backup,
        tau=_DEFAULTS.tau,
        scale=_DEFAULTS.scale,
        hidden=_DEFAULTS.hidden,
        policy_std=_DEFAULTS.policy_std,
        eval_episodes=_DEFAULTS.eval_episodes,
        td_weighting=_DEFAULTS.td_weighting,
        awr_returns=_DEFAULTS.awr_returns,
        offline_epsilon=_DEFAULTS.offline_epsilon,
        xi_clip=_DEFAULTS.xi_clip,
        random_state=0,
    ):
        self.k = k
        self.T = T
        self.beta = beta
        self.gamma = gamma
        self.lam = lam
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.batch_size = batch_size
        self.buffer_capacity = buffer_capacity
        self.n_actor_steps = n_actor_steps
        self.n_critic_steps = n_critic_steps
        self.update_frequency = update_frequency
        self.interactions_per_iteration = interactions_per_iteration
        self.n_iterations = n_iterations
        self.backup = backup
        self.tau = tau
        self.scale = scale
        self.hidden = hidden
        self.policy_std = policy_std
        self.eval_episodes = eval_episodes
        self.td_weighting = td_weighting
        self.awr_returns = awr_returns
        self.offline_epsilon = offline_epsilon
        self.xi_clip = xi_clip
        self.random_state = random_state

    def _config(self, offline):
        params = self.get_params()
        seed = params.pop("random_state")
        return TrainerConfig.from_dict({**params, "seed": seed, "offline": offline})

    def fit(self, X, y=None, *, eval_env=None, callback=None):
        """Train on an environment or an offline dataset.

        ``eval_env`` supplies evaluation episodes for offline runs.
        """
        env, dataset = _resolve_input(X)
        offline = dataset is not None
        if offline and eval_env is not None:
            env = make_env(eval_env) if isinstance(eval_env, (str, dict)) else eval_env
        cfg = self._config(offline)
        result = train(cfg, env=env, dataset=dataset, algorithm=self.algorithm, callback=callback)
        self.config_ = cfg
        self.actor_ = result.actor
        self.critic_ = result.critic
        self.metrics_ = result.metrics
        self.n_features_in_ = result.actor.net.input_width
        self.discrete_ = result.actor.variant == CATEGORICAL
        return self

    def _heads(self, X):
        check_is_fitted(self, "actor_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.actor_.head(X)

    def predict(self, X):
        """Greedy actions: argmax for discrete actions, the Gaussian mean otherwise."""
        head = self._heads(X)
        return np.argmax(head, axis=1) if self.discrete_ else head

    def predict_proba(self, X):
        if not getattr(self, "discrete_", True):
            raise AttributeError("predict_proba is only defined for discrete actions")
        return np.exp(log_softmax(self._heads(X)))

    def score(self, X, y=None, episodes=None, seed=0):
        """Mean return of the greedy policy on environment ``X``."""
        check_is_fitted(self, "actor_")
        env = make_env(X) if isinstance(X, (str, dict)) else X
        n = self.eval_episodes if episodes is None else episodes
        return float(evaluate(self.actor_, env, n, np.random.default_rng(seed)).mean())


class QWR(_RegressionPolicyEstimator):
    """Q-value weighted regression."""

    algorithm = "qwr"


class AWR(_RegressionPolicyEstimator):
    """Advantage weighted regression baseline (``k``, ``T`` and the backup are unused)."""

    algorithm = "awr"
