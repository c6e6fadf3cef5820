"""Environments: BitFlip, a 1-D point-reaching task, and tabular MDPs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidActionError, InvalidParameterError, ProtocolError

BITFLIP_HORIZON = 5


@dataclass
class BitFlipState:
    bits: np.ndarray
    step_counter: int = 0

    @property
    def done(self) -> bool:
        return self.step_counter >= BITFLIP_HORIZON


@dataclass
class ContinuousPointState:
    position: float
    step_counter: int = 0


@dataclass
class StepResult:
    next_state: object
    reward: float
    done: bool


def bitflip_reset(n, rng) -> BitFlipState:
    """Uniform bit vector conditioned on at least five zero bits (rejection sampling)."""
    if n < BITFLIP_HORIZON:
        raise InvalidParameterError(f"BitFlip needs N >= {BITFLIP_HORIZON}, got {n}")
    while True:
        bits = rng.integers(0, 2, size=n).astype(np.int8)
        if n - int(bits.sum()) >= BITFLIP_HORIZON:
            return BitFlipState(bits=bits, step_counter=0)


def bitflip_step(state: BitFlipState, action) -> StepResult:
    """Flip one bit. Returns a fresh state; ``state`` is left untouched."""
    if state.done:
        raise ProtocolError("BitFlip episode is already done")
    n = state.bits.size
    if not (0 <= int(action) < n) or int(action) != action:
        raise InvalidActionError(f"BitFlip action must be in [0, {n}), got {action!r}")
    action = int(action)
    bits = state.bits.copy()
    reward = 1.0 if bits[action] == 0 else -1.0
    bits[action] ^= 1
    nxt = BitFlipState(bits=bits, step_counter=state.step_counter + 1)
    return StepResult(next_state=nxt, reward=reward, done=nxt.done)


POINT_HORIZON = 20
POINT_GOAL = 0.0
POINT_START_RANGE = 3.0


def point_reset(rng) -> ContinuousPointState:
    return ContinuousPointState(
        position=float(rng.uniform(-POINT_START_RANGE, POINT_START_RANGE)), step_counter=0
    )


def point_step(state: ContinuousPointState, action) -> StepResult:
    if state.step_counter >= POINT_HORIZON:
        raise ProtocolError("point episode is already done")
    move = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
    position = state.position + move
    nxt = ContinuousPointState(position=position, step_counter=state.step_counter + 1)
    reward = -abs(position - POINT_GOAL)
    return StepResult(next_state=nxt, reward=reward, done=nxt.step_counter >= POINT_HORIZON)


# -- episodic wrappers used by the trainers ------------------------------------


class BitFlipEnv:
    """Episodic BitFlip with observations ``[bits..., step_counter / 5]``."""

    name = "bitflip"
    discrete = True

    def __init__(self, n=16):
        if n < BITFLIP_HORIZON:
            raise InvalidParameterError(f"BitFlip needs N >= {BITFLIP_HORIZON}, got {n}")
        self.n = int(n)
        self._state = None

    @property
    def obs_dim(self):
        return self.n + 1

    @property
    def n_actions(self):
        return self.n

    @property
    def action_dim(self):
        return self.n

    def params(self):
        return {"env": self.name, "n": self.n}

    def observe(self, state: BitFlipState):
        return np.concatenate([state.bits.astype(np.float64), [state.step_counter / BITFLIP_HORIZON]])

    def reset(self, rng):
        self._state = bitflip_reset(self.n, rng)
        return self.observe(self._state)

    def step(self, action):
        if self._state is None:
            raise ProtocolError("reset() must be called before step()")
        result = bitflip_step(self._state, action)
        self._state = result.next_state
        return self.observe(result.next_state), result.reward, result.done


class PointEnv:
    """1-D point that moves by ``clip(action, -1, 1)``; reward is minus the distance to 0.

    Observations are ``[position, step_counter / 20]``.
    """

    name = "point"
    discrete = False
    n_actions = None
    action_dim = 1
    obs_dim = 2

    def __init__(self):
        self._state = None

    def params(self):
        return {"env": self.name}

    def observe(self, state: ContinuousPointState):
        return np.array([state.position, state.step_counter / POINT_HORIZON])

    def reset(self, rng):
        self._state = point_reset(rng)
        return self.observe(self._state)

    def step(self, action):
        if self._state is None:
            raise ProtocolError("reset() must be called before step()")
        result = point_step(self._state, action)
        self._state = result.next_state
        return self.observe(result.next_state), result.reward, result.done


ENVIRONMENTS = {"bitflip": BitFlipEnv, "point": PointEnv}


def make_env(spec):
    """Build an environment from ``{"env": name, **params}`` or a bare name."""
    if isinstance(spec, str):
        spec = {"env": spec}
    spec = dict(spec)
    try:
        cls = ENVIRONMENTS[spec.pop("env")]
    except KeyError as exc:
        raise InvalidParameterError(f"unknown environment {exc.args[0]!r}") from None
    return cls(**spec)


# -- tabular MDPs -------------------------------------------------------------


@dataclass
class TabularMDP:
    """``transition[s, a, s']`` probabilities and expected ``reward[s, a]``."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        S, A = self.reward.shape
        if self.transition.shape != (S, A, S):
            raise InvalidParameterError(
                f"transition shape {self.transition.shape} does not match reward {self.reward.shape}"
            )
        if np.any(self.transition < 0) or not np.allclose(self.transition.sum(-1), 1.0, atol=1e-12, rtol=0):
            raise InvalidParameterError("transition rows must be distributions")

    @property
    def n_states(self):
        return self.reward.shape[0]

    @property
    def n_actions(self):
        return self.reward.shape[1]

    @classmethod
    def random(cls, n_states, n_actions, gamma=0.9, rng=None):
        rng = np.random.default_rng(rng)
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        # renormalize in float64 so rows sum to 1 to machine precision
        P /= P.sum(-1, keepdims=True)
        R = rng.normal(size=(n_states, n_actions))
        return cls(P, R, gamma)


def _check_policy(mdp, policy):
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidParameterError(f"policy shape {policy.shape} does not match the MDP")
    if np.any(policy < 0) or not np.allclose(policy.sum(-1), 1.0, atol=1e-12, rtol=0):
        raise InvalidParameterError("policy rows must be distributions")
    return policy


def tabular_v(mdp: TabularMDP, policy):
    """Exact state values of ``policy`` by solving ``(I - gamma P_pi) V = r_pi``."""
    policy = _check_policy(mdp, policy)
    if not 0.0 <= mdp.gamma < 1.0:
        raise InvalidParameterError(f"gamma must be in [0, 1), got {mdp.gamma}")
    P_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy, mdp.reward)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def tabular_q(mdp: TabularMDP, policy):
    """Exact ``Q_pi(s, a) = r(s, a) + gamma * sum_s' P(s'|s,a) V_pi(s')``."""
    V = tabular_v(mdp, policy)
    return mdp.reward + mdp.gamma * mdp.transition @ V
