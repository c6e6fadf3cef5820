"""Categorical and fixed-std Gaussian action distributions and the actor network."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import DecodeError, InvalidActionError, InvalidParameterError, RejectedInputError
from .netcore import Net

DEFAULT_STD = 0.4
CATEGORICAL, GAUSSIAN = "categorical", "gaussian"
_VARIANT_BYTES = {CATEGORICAL: 0, GAUSSIAN: 1}
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Per-state distribution parameters.

    ``values`` holds logits for a categorical distribution and the mean for a
    Gaussian one; ``std`` is only meaningful for the Gaussian variant.
    """

    variant: str
    values: np.ndarray
    std: float = DEFAULT_STD

    def __post_init__(self):
        if self.variant not in _VARIANT_BYTES:
            raise InvalidParameterError(f"unknown policy variant {self.variant!r}")
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        if self.variant == GAUSSIAN:
            if not np.all(np.isfinite(values)):
                raise InvalidParameterError("gaussian mean must be finite")
            if not self.std > 0:
                raise InvalidParameterError(f"std must be positive, got {self.std}")
        elif np.any(np.isnan(values)) or np.any(values == np.inf):
            raise InvalidParameterError("logits must be finite")

    @classmethod
    def categorical(cls, logits):
        return cls(CATEGORICAL, logits)

    @classmethod
    def gaussian(cls, mean, std=DEFAULT_STD):
        return cls(GAUSSIAN, mean, float(std))

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return (
            self.variant == other.variant
            and self.values.tobytes() == other.values.tobytes()
            and (self.variant == CATEGORICAL or self.std == other.std)
        )

    @property
    def mean(self):
        return self.values

    @property
    def logits(self):
        return self.values

    def probs(self):
        if self.variant != CATEGORICAL:
            raise InvalidParameterError("probs() is only defined for categorical params")
        return np.exp(log_softmax(self.values))


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def gaussian_log_density(actions, mean, std):
    """Sum over the last axis of the normal log-density."""
    z = (np.asarray(actions, dtype=np.float64) - mean) / std
    return np.sum(-0.5 * z * z - np.log(std) - _LOG_SQRT_2PI, axis=-1)


def log_prob(params: PolicyParams, action) -> float:
    if params.variant == CATEGORICAL:
        n = params.values.size
        if np.ndim(action) != 0 or not (0 <= int(action) < n) or int(action) != action:
            raise InvalidActionError(f"categorical action must be an int in [0, {n}), got {action!r}")
        return float(log_softmax(params.values)[int(action)])
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.size != params.values.size:
        raise InvalidActionError(
            f"gaussian action has dimension {action.size}, expected {params.values.size}"
        )
    return float(gaussian_log_density(action, params.values, params.std))


def sample(params: PolicyParams, rng, n=1):
    """Draw ``n`` i.i.d. actions: an int array for categorical, ``(n, dim)`` for Gaussian."""
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    if params.variant == CATEGORICAL:
        return rng.choice(params.values.size, size=n, p=params.probs())
    return params.values + params.std * rng.standard_normal((n, params.values.size))


def serialize_params(params: PolicyParams) -> bytes:
    """1 variant byte, little-endian uint32 float count, then little-endian float64s.

    Gaussian payloads store the mean followed by the std.
    """
    payload = params.values
    if params.variant == GAUSSIAN:
        payload = np.append(payload, params.std)
    return (
        struct.pack("<BI", _VARIANT_BYTES[params.variant], payload.size)
        + payload.astype("<f8").tobytes()
    )


def deserialize_params(blob: bytes) -> PolicyParams:
    if len(blob) < 5:
        raise DecodeError("policy params blob is shorter than its header")
    variant_byte, count = struct.unpack_from("<BI", blob)
    variants = {v: k for k, v in _VARIANT_BYTES.items()}
    if variant_byte not in variants:
        raise DecodeError(f"unknown variant byte {variant_byte}")
    if len(blob) != 5 + 8 * count:
        raise DecodeError(f"length field says {count} floats but payload has {len(blob) - 5} bytes")
    values = np.frombuffer(blob, dtype="<f8", offset=5).astype(np.float64)
    variant = variants[variant_byte]
    try:
        if variant == GAUSSIAN:
            if count < 2:
                raise DecodeError("gaussian payload needs a mean and a std")
            return PolicyParams(GAUSSIAN, values[:-1], float(values[-1]))
        return PolicyParams(CATEGORICAL, values)
    except InvalidParameterError as exc:
        raise DecodeError(str(exc)) from None


def smoothed_one_hot(action, n_actions, epsilon=0.05):
    """Logits of ``(1 - eps) * onehot(action) + eps / n`` for offline discrete data."""
    probs = np.full(n_actions, epsilon / n_actions)
    probs[int(action)] += 1.0 - epsilon
    return PolicyParams.categorical(np.log(probs))


class ActorNet:
    """An MLP whose head is routed into :class:`PolicyParams`.

    Categorical heads emit logits (width ``n_actions``), Gaussian heads emit
    the mean (width ``action_dim``) with a constant ``std``.
    """

    def __init__(self, net: Net, variant, std=DEFAULT_STD):
        if variant not in _VARIANT_BYTES:
            raise InvalidParameterError(f"unknown policy variant {variant!r}")
        self.net = net
        self.variant = variant
        self.std = float(std)

    @classmethod
    def build(cls, obs_dim, head_width, variant, hidden=(256, 256), std=DEFAULT_STD, rng_seed=0):
        net = Net.mlp([obs_dim, *hidden, head_width], rng_seed=rng_seed)
        return cls(net, variant, std)

    @property
    def discrete(self):
        return self.variant == CATEGORICAL

    @property
    def head_width(self):
        return self.net.output_width

    def copy(self):
        return ActorNet(self.net.copy(), self.variant, self.std)

    def head(self, states):
        return self.net.forward(states)

    def policy_params(self, state) -> PolicyParams:
        state = np.asarray(state, dtype=np.float64)
        if state.ndim != 1:
            raise RejectedInputError("policy_params takes a single state vector")
        return PolicyParams(self.variant, self.net.forward(state), self.std)

    def log_prob_batch(self, states, actions):
        """``log pi(a | s)`` for aligned rows; ``actions`` may carry an extra sample axis.

        ``states`` is ``(B, obs)``. Categorical ``actions`` are ``(B,)`` or
        ``(B, k)`` integers; Gaussian ones ``(B, d)`` or ``(B, k, d)``.
        """
        head = self.net.forward(states)
        return _log_prob_from_head(self.variant, head, actions, self.std)

    def weighted_log_prob_grad(self, states, actions, weights):
        """Value and parameter gradient of ``sum(weights * log pi(actions | states))``."""
        states = np.asarray(states, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        head = self.net.forward(states)
        value = float(np.sum(weights * _log_prob_from_head(self.variant, head, actions, self.std)))
        if self.variant == CATEGORICAL:
            actions = np.asarray(actions)
            probs = np.exp(log_softmax(head))
            if actions.ndim == 1:
                actions, weights = actions[:, None], weights[:, None]
            counts = np.zeros_like(head)
            rows = np.repeat(np.arange(head.shape[0]), actions.shape[1])
            np.add.at(counts, (rows, actions.ravel()), weights.ravel())
            cot = counts - weights.sum(axis=1, keepdims=True) * probs
        else:
            actions = np.asarray(actions, dtype=np.float64)
            if actions.ndim == 2:
                actions, weights = actions[:, None, :], weights[:, None]
            cot = np.sum(weights[..., None] * (actions - head[:, None, :]), axis=1) / self.std ** 2
        return value, self.net.backward(states, cot)


def _log_prob_from_head(variant, head, actions, std):
    if variant == CATEGORICAL:
        logp = log_softmax(head)
        actions = np.asarray(actions)
        if actions.ndim == 1:
            return np.take_along_axis(logp, actions[:, None], axis=1)[:, 0]
        return np.take_along_axis(logp, actions, axis=1)
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 2:
        return gaussian_log_density(actions, head, std)
    return gaussian_log_density(actions, head[:, None, :], std)


def policy_params(actor: ActorNet, state) -> PolicyParams:
    return actor.policy_params(state)
