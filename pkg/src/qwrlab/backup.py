"""Backup operators, the Q-network and multi-step bootstrapped Q targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import (
    InvalidParameterError,
    ProtocolError,
    RejectedInputError,
    TargetDivergenceError,
)
from .netcore import LayerSpec, Net
from .policies import CATEGORICAL, PolicyParams, log_softmax

SCALE_EPS = 1e-8
SCALE_ALIASES = {"mad": "mean_abs_dev", "mean_abs_dev": "mean_abs_dev",
                 "std": "std_dev", "std_dev": "std_dev"}


@dataclass(frozen=True)
class BackupOperator:
    """Aggregation ``F`` of the Q-values of several next actions.

    ``kind`` is ``"mean"``, ``"max"`` or ``"lse"``. The log-sum-exp variant is
    normalized by a scale statistic of its input::

        F(X) = tau * s(X) * log(mean(exp(x / (tau * s(X)))))

    and falls back to the mean when ``s(X) < 1e-8``.
    """

    kind: str = "lse"
    tau: float = 0.3
    scale: str = "mean_abs_dev"

    def __post_init__(self):
        if self.kind not in ("mean", "max", "lse"):
            raise InvalidParameterError(f"unknown backup operator {self.kind!r}")
        if self.scale not in SCALE_ALIASES:
            raise InvalidParameterError(f"unknown scale statistic {self.scale!r}")
        object.__setattr__(self, "scale", SCALE_ALIASES[self.scale])
        if self.kind == "lse" and not self.tau > 0:
            raise InvalidParameterError(f"lse temperature must be positive, got {self.tau}")

    @classmethod
    def from_config(cls, cfg):
        """Accept ``{"backup": "lse", "tau": 0.3, "scale": "mad"}``-style dicts."""
        return cls(cfg.get("backup", "lse"), float(cfg.get("tau", 0.3)), cfg.get("scale", "mad"))

    def to_config(self):
        return {"backup": self.kind, "tau": self.tau,
                "scale": "mad" if self.scale == "mean_abs_dev" else "std"}

    def __call__(self, values, weights=None, axis=-1):
        return apply_backup(self, values, weights=weights, axis=axis)


def scale_statistic(values, kind, weights=None, axis=-1):
    """Population mean absolute deviation or standard deviation along ``axis``."""
    x = np.asarray(values, dtype=np.float64)
    if weights is None:
        centre = x.mean(axis=axis, keepdims=True)
        dev = x - centre
        if kind == "mean_abs_dev":
            return np.abs(dev).mean(axis=axis)
        return np.sqrt((dev * dev).mean(axis=axis))
    w = weights / weights.sum(axis=axis, keepdims=True)
    centre = (w * x).sum(axis=axis, keepdims=True)
    dev = x - centre
    if kind == "mean_abs_dev":
        return (w * np.abs(dev)).sum(axis=axis)
    return np.sqrt((w * dev * dev).sum(axis=axis))


def apply_backup(op: BackupOperator, values, weights=None, axis=-1):
    """Apply ``op`` along ``axis``.

    With ``weights`` (a distribution over the same axis) the uniform average
    inside mean/lse becomes the weighted expectation and max ranges over the
    support. This is the exact form used for categorical sampling policies.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise ProtocolError("backup operator needs at least one value")
    if not np.all(np.isfinite(x)):
        raise TargetDivergenceError("non-finite Q-value passed to the backup operator")
    if weights is not None:
        weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), x.shape)
        weights = weights / weights.sum(axis=axis, keepdims=True)

    if op.kind == "max":
        if weights is None:
            return x.max(axis=axis)
        return np.where(weights > 0, x, -np.inf).max(axis=axis)

    mean = x.mean(axis=axis) if weights is None else (weights * x).sum(axis=axis)
    if op.kind == "mean":
        return mean

    s = scale_statistic(x, op.scale, weights, axis=axis)
    degenerate = s < SCALE_EPS
    c = op.tau * np.where(degenerate, 1.0, s)
    c_keep = np.expand_dims(c, axis)
    top = x.max(axis=axis, keepdims=True)
    e = np.exp((x - top) / c_keep)
    avg = e.mean(axis=axis) if weights is None else (weights * e).sum(axis=axis)
    lse = np.squeeze(top, axis=axis) + c * np.log(avg)
    out = np.where(degenerate, mean, lse)
    return out if np.ndim(out) else float(out)


# -- Q network ----------------------------------------------------------------


class QNet:
    """``Q(s, a) = head(tower(s) * tanh(embed(a)))``.

    ``tower`` is an MLP ending in a ReLU layer of width ``H``, ``embed`` a
    single linear layer from the action (one-hot for discrete spaces) to ``H``,
    and ``head`` a linear layer ``H -> 1``.
    """

    def __init__(self, tower: Net, embed: Net, head: Net, n_actions=None):
        if embed.output_width != tower.output_width or head.input_width != tower.output_width:
            raise RejectedInputError("tower, embedding and head widths do not agree")
        if head.output_width != 1 or len(head.layers) != 1 or len(embed.layers) != 1:
            raise RejectedInputError("embedding and head must be single linear layers")
        self.tower, self.embed, self.head = tower, embed, head
        self.n_actions = n_actions

    @classmethod
    def build(cls, obs_dim, action_dim, hidden=(256, 256), discrete=False, rng_seed=0):
        hidden = tuple(int(h) for h in hidden)
        if not hidden:
            raise InvalidParameterError("QNet needs at least one hidden layer")
        rng = np.random.default_rng(rng_seed)
        seeds = rng.integers(0, 2**63 - 1, size=3)
        tower = Net.mlp([obs_dim, *hidden], out_activation="relu", rng_seed=int(seeds[0]))
        embed = Net([LayerSpec(action_dim, hidden[-1], "identity")], rng_seed=int(seeds[1]))
        head = Net([LayerSpec(hidden[-1], 1, "identity")], rng_seed=int(seeds[2]))
        return cls(tower, embed, head, n_actions=action_dim if discrete else None)

    @property
    def discrete(self):
        return self.n_actions is not None

    @property
    def nets(self):
        return {"q_tower": self.tower, "q_embed": self.embed, "q_head": self.head}

    @property
    def params(self):
        return np.concatenate([self.tower.params, self.embed.params, self.head.params])

    @params.setter
    def params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise RejectedInputError(f"expected {self.n_params} parameters, got {flat.shape}")
        a = self.tower.n_params
        b = a + self.embed.n_params
        self.tower.params = flat[:a].copy()
        self.embed.params = flat[a:b].copy()
        self.head.params = flat[b:].copy()

    @property
    def n_params(self):
        return self.tower.n_params + self.embed.n_params + self.head.n_params

    def copy(self):
        return QNet(self.tower.copy(), self.embed.copy(), self.head.copy(), self.n_actions)

    def encode_actions(self, actions):
        if self.discrete:
            actions = np.asarray(actions)
            if np.any(actions < 0) or np.any(actions >= self.n_actions):
                raise RejectedInputError(f"discrete action out of range [0, {self.n_actions})")
            return np.eye(self.n_actions)[actions]
        actions = np.asarray(actions, dtype=np.float64)
        if actions.ndim == 1 and self.embed.input_width == 1 and actions.size != 1:
            actions = actions[:, None]
        return actions

    def forward(self, states, actions):
        """Batched Q-values, shape ``(B,)`` (or a float for a single pair)."""
        o = self.tower.forward(states)
        g = np.tanh(self.embed.forward(self.encode_actions(actions)))
        if o.shape != g.shape:
            raise RejectedInputError(f"state batch {o.shape} and action batch {g.shape} differ")
        q = self.head.forward(o * g)[..., 0]
        return q if np.ndim(q) else float(q)

    __call__ = forward

    def q_all(self, states):
        """Discrete only: ``Q(s, a)`` for every action, shape ``(B, n_actions)``."""
        if not self.discrete:
            raise ProtocolError("q_all needs a discrete action space")
        o = self.tower.forward(np.atleast_2d(states))
        (E, e_b), = self.embed.weights()
        (w, c), = self.head.weights()
        gates = np.tanh(E + e_b)  # row a = tanh(embed(onehot(a)))
        return o @ (gates * w[:, 0]).T + c[0]

    def q_samples(self, states, actions):
        """``Q`` for ``k`` actions per state: ``states (B, obs)``, ``actions (B, k[, d])``."""
        o = self.tower.forward(states)
        enc = self.encode_actions(actions)
        g = np.tanh(self.embed.forward(enc.reshape(-1, enc.shape[-1])))
        g = g.reshape(enc.shape[:-1] + (g.shape[-1],))
        return self.head.forward(o[:, None, :] * g)[..., 0]

    def grad(self, states, actions, cotangent):
        """Flat gradient of ``sum(cotangent * Q(states, actions))``."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        enc = np.atleast_2d(self.encode_actions(actions))
        cot = np.asarray(cotangent, dtype=np.float64).reshape(-1)
        o = self.tower.forward(states)
        pre = self.embed.forward(enc)
        g = np.tanh(pre)
        z = o * g
        head_grad, dz = self.head.vjp(z, cot[:, None], input_grad=True)
        do = dz * g
        d_pre = dz * o * (1.0 - g * g)
        return np.concatenate([
            self.tower.backward(states, do),
            self.embed.backward(enc, d_pre),
            head_grad,
        ])


def q_value(qnet: QNet, state, action) -> float:
    if qnet.discrete:
        return float(qnet.forward(np.asarray(state)[None, :], np.array([int(action)]))[0])
    return float(qnet.forward(np.asarray(state)[None, :], np.asarray(action, dtype=np.float64)[None, :])[0])


def sync_target(qnet: QNet, qnet_target: QNet):
    """Hard copy of the live parameters into the frozen target copy."""
    for name, src in qnet.nets.items():
        dst = qnet_target.nets[name]
        if src.layers != dst.layers:
            raise RejectedInputError(f"cannot sync {name}: layer shapes differ")
        dst.params = src.params.copy()


# -- multi-step targets -------------------------------------------------------


@dataclass
class QTarget:
    value: float
    horizon_used: int
    traj_id: int
    start_index: int


def horizon_weights(h, lam, weighting="normalized"):
    """TD(lambda) weights over horizons ``1..h``.

    ``normalized`` gives ``(1 - lam) lam^(t-1)`` to ``t < h`` and the remaining
    ``lam^(h-1)`` to ``t = h`` so the weights sum to one. ``literal`` uses
    ``(1 - lam) lam^(t-1)`` for every horizon.
    """
    t = np.arange(1, h + 1)
    w = (1.0 - lam) * lam ** (t - 1.0)
    if weighting == "normalized":
        w[-1] = lam ** (h - 1.0)
    elif weighting != "literal":
        raise InvalidParameterError(f"unknown TD(lambda) weighting {weighting!r}")
    return w


def blend_horizons(rewards, bootstrap_values, terminal, gamma, lam, weighting="normalized"):
    """Blend the ``t``-step targets ``sum_{j<t} gamma^j r_j + gamma^t F_t``.

    ``bootstrap_values[t-1]`` is ``F_t``; the final one is ignored when the
    window ends at a terminal step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    f = np.asarray(bootstrap_values, dtype=np.float64)
    h = rewards.size
    if h == 0:
        raise ProtocolError("empty multi-step window")
    disc = gamma ** np.arange(h)
    returns = np.cumsum(disc * rewards)
    boot = gamma ** np.arange(1, h + 1) * f
    if terminal:
        boot[-1] = 0.0
    return float(np.dot(horizon_weights(h, lam, weighting), returns + boot))


def _bootstrap_value(qnet_target, op, state, mu: PolicyParams, k, rng):
    state = np.asarray(state, dtype=np.float64)
    if mu.variant == CATEGORICAL:
        q = qnet_target.q_all(state[None, :])[0]
        return apply_backup(op, q, weights=np.exp(log_softmax(mu.values)))
    actions = mu.values + mu.std * rng.standard_normal((k, mu.values.size))
    q = qnet_target.q_samples(state[None, :], actions[None, :, :])[0]
    return apply_backup(op, q)


def multistep_target(window, qnet_target: QNet, op: BackupOperator, k, gamma, lam, rng,
                     weighting="normalized") -> QTarget:
    """Truncated TD(lambda) Q target for one window.

    The horizon-``t`` bootstrap uses the sampling policy stored at the state
    reached after ``t`` steps: exact expectation for categorical policies,
    ``k`` samples for Gaussian ones.
    """
    h = len(window)
    if h == 0:
        raise ProtocolError("empty multi-step window")
    rewards = [tr.reward for tr in window.transitions]
    f = np.zeros(h)
    for t in range(1, h + 1):
        if t < h:
            nxt = window.transitions[t]
            f[t - 1] = _bootstrap_value(qnet_target, op, nxt.state, nxt.mu_params, k, rng)
        elif not window.truncated_by_terminal:
            f[t - 1] = _bootstrap_value(qnet_target, op, window.bootstrap_state,
                                        window.bootstrap_mu, k, rng)
    value = blend_horizons(rewards, f, window.truncated_by_terminal, gamma, lam, weighting)
    if not np.isfinite(value):
        raise TargetDivergenceError("non-finite multi-step target")
    first = window.transitions[0]
    return QTarget(value, h, first.traj_id, first.step_index)


def batch_multistep_targets(buf, index, qnet_target: QNet, op: BackupOperator, k, gamma, lam,
                            T, rng, weighting="normalized"):
    """Vectorized :func:`multistep_target` for windows starting at flat ``index``.

    Returns ``(targets, lengths)``.
    """
    f = buf.arrays
    index = np.asarray(index, dtype=np.int64)
    B = index.size
    h = buf.window_lengths(index, T)
    t = np.arange(1, T + 1)
    valid = t[None, :] <= h[:, None]
    src = np.where(valid, index[:, None] + t[None, :] - 1, index[:, None])
    rewards = np.where(valid, f["rewards"][src], 0.0)
    terminal = f["dones"][src] & valid
    has_next = (f["step_index"][src] + 1 < f["traj_len"][src]) & valid
    mu_src = np.where(has_next, src + 1, src)

    need = (valid & ~terminal).ravel()
    boot = np.zeros(B * T)
    if need.any():
        states = f["next_states"][src.ravel()[need]]
        mu = f["mu_values"][mu_src.ravel()[need]]
        if buf.mu_variant == CATEGORICAL:
            q = qnet_target.q_all(states)
            boot[need] = apply_backup(op, q, weights=np.exp(log_softmax(mu)))
        else:
            std = f["mu_std"][mu_src.ravel()[need]]
            actions = mu[:, None, :] + std[:, None, None] * rng.standard_normal((mu.shape[0], k, mu.shape[1]))
            boot[need] = apply_backup(op, qnet_target.q_samples(states, actions))
    boot = boot.reshape(B, T)

    returns = np.cumsum(gamma ** (t - 1.0) * rewards, axis=1)
    horizon_vals = returns + np.where(terminal, 0.0, gamma ** t * boot)
    weights = np.where(valid, (1.0 - lam) * lam ** (t - 1.0), 0.0)
    if weighting == "normalized":
        last = t[None, :] == h[:, None]
        weights = np.where(last, lam ** (h[:, None] - 1.0), weights)
    elif weighting != "literal":
        raise InvalidParameterError(f"unknown TD(lambda) weighting {weighting!r}")
    targets = np.sum(weights * horizon_vals, axis=1)
    if not np.all(np.isfinite(targets)):
        raise TargetDivergenceError("non-finite multi-step target")
    return targets, h
