"""Trajectory replay buffer with stored sampling-policy parameters."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DecodeError, InvalidParameterError, ProtocolError, RejectedInputError
from .policies import CATEGORICAL, DEFAULT_STD, GAUSSIAN, PolicyParams, smoothed_one_hot


@dataclass
class Transition:
    state: np.ndarray
    mu_params: PolicyParams
    action: object
    reward: float
    next_state: np.ndarray
    done: bool
    traj_id: int = 0
    step_index: int = 0


@dataclass
class TransitionBatch:
    """Struct-of-arrays view of a set of transitions (what the trainers consume)."""

    index: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    mu_values: np.ndarray
    mu_std: np.ndarray


@dataclass
class MultiStepWindow:
    """Up to ``T`` consecutive transitions of one trajectory.

    ``bootstrap_mu`` is the stored sampling policy at ``bootstrap_state``;
    it is ``None`` when the window ends at a terminal step.
    """

    transitions: list
    bootstrap_state: np.ndarray
    bootstrap_mu: PolicyParams | None
    truncated_by_terminal: bool

    def __len__(self):
        return len(self.transitions)


class _Trajectory:
    __slots__ = ("traj_id", "states", "actions", "rewards", "next_states", "dones", "mu_values", "mu_std")

    def __init__(self, traj_id, states, actions, rewards, next_states, dones, mu_values, mu_std):
        self.traj_id = traj_id
        self.states = states
        self.actions = actions
        self.rewards = rewards
        self.next_states = next_states
        self.dones = dones
        self.mu_values = mu_values
        self.mu_std = mu_std

    def __len__(self):
        return self.rewards.size


class ReplayBuffer:
    """FIFO store of whole trajectories, capped at ``capacity`` interactions.

    Eviction always drops the oldest complete trajectory, so stored
    trajectories are never split and multi-step windows stay valid.
    """

    def __init__(self, capacity=50_000):
        if capacity < 1:
            raise InvalidParameterError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self._trajs = []
        self._next_id = 0
        self.mu_variant = None
        self._flat = None
        self._size = 0
        self._ids = set()

    def __len__(self):
        return self._size

    @property
    def n_trajectories(self):
        return len(self._trajs)

    # -- writing -------------------------------------------------------------

    def append_trajectory(self, trajectory):
        """Append a list of :class:`Transition` forming one contiguous episode."""
        if not trajectory:
            raise RejectedInputError("cannot append an empty trajectory")
        steps = [t.step_index for t in trajectory]
        if steps != list(range(steps[0], steps[0] + len(steps))):
            raise RejectedInputError(f"trajectory step indices are not contiguous: {steps}")
        if len({t.traj_id for t in trajectory}) != 1:
            raise RejectedInputError("trajectory mixes several traj_id values")
        if any(t.done for t in trajectory[:-1]):
            raise RejectedInputError("done may only be set on the last step of a trajectory")
        variant = trajectory[0].mu_params.variant
        if any(t.mu_params.variant != variant for t in trajectory):
            raise RejectedInputError("trajectory mixes policy variants")
        if variant == CATEGORICAL:
            actions = np.array([int(t.action) for t in trajectory], dtype=np.int64)
        else:
            actions = np.array([np.asarray(t.action, dtype=np.float64).reshape(-1) for t in trajectory])
        self.append_arrays(
            states=np.array([t.state for t in trajectory], dtype=np.float64),
            actions=actions,
            rewards=np.array([t.reward for t in trajectory], dtype=np.float64),
            next_states=np.array([t.next_state for t in trajectory], dtype=np.float64),
            dones=np.array([t.done for t in trajectory], dtype=bool),
            mu_values=np.array([t.mu_params.values for t in trajectory]),
            mu_std=np.array([t.mu_params.std for t in trajectory], dtype=np.float64),
            mu_variant=variant,
            traj_id=trajectory[0].traj_id,
        )

    def append_arrays(self, states, actions, rewards, next_states, dones, mu_values,
                      mu_std=None, mu_variant=CATEGORICAL, traj_id=None):
        """Array form of :meth:`append_trajectory`; returns the assigned traj_id."""
        rewards = np.asarray(rewards, dtype=np.float64)
        L = rewards.size
        if L == 0:
            raise RejectedInputError("cannot append an empty trajectory")
        if L > self.capacity:
            raise RejectedInputError(f"trajectory of length {L} exceeds capacity {self.capacity}")
        dones = np.asarray(dones, dtype=bool)
        if dones[:-1].any():
            raise RejectedInputError("done may only be set on the last step of a trajectory")
        if self.mu_variant is None:
            self.mu_variant = mu_variant
        elif mu_variant != self.mu_variant:
            raise RejectedInputError(f"buffer holds {self.mu_variant} params, got {mu_variant}")
        if mu_std is None:
            mu_std = np.full(L, DEFAULT_STD)
        if traj_id is None:
            traj_id = self._next_id
        if int(traj_id) in self._ids:
            raise RejectedInputError(f"traj_id {traj_id} is already stored")
        self._next_id = max(self._next_id, int(traj_id) + 1)
        traj = _Trajectory(
            int(traj_id),
            np.array(states, dtype=np.float64),
            np.array(actions),
            rewards.copy(),
            np.array(next_states, dtype=np.float64),
            dones.copy(),
            np.array(mu_values, dtype=np.float64).reshape(L, -1),
            np.asarray(mu_std, dtype=np.float64).copy(),
        )
        for name in ("states", "actions", "next_states", "dones", "mu_std"):
            if len(getattr(traj, name)) != L:
                raise RejectedInputError(f"{name} has length {len(getattr(traj, name))}, expected {L}")
        self._trajs.append(traj)
        self._ids.add(traj.traj_id)
        self._size += L
        while self._size > self.capacity:
            evicted = self._trajs.pop(0)
            self._ids.discard(evicted.traj_id)
            self._size -= len(evicted)
        self._flat = None
        return traj.traj_id

    # -- flat index ----------------------------------------------------------

    def _flatten(self):
        if self._flat is None:
            ts = self._trajs
            lengths = np.array([len(t) for t in ts], dtype=np.int64)
            self._flat = {
                "states": np.concatenate([t.states for t in ts]),
                "actions": np.concatenate([t.actions for t in ts]),
                "rewards": np.concatenate([t.rewards for t in ts]),
                "next_states": np.concatenate([t.next_states for t in ts]),
                "dones": np.concatenate([t.dones for t in ts]),
                "mu_values": np.concatenate([t.mu_values for t in ts]),
                "mu_std": np.concatenate([t.mu_std for t in ts]),
                "traj_id": np.repeat([t.traj_id for t in ts], lengths),
                "step_index": np.concatenate([np.arange(n) for n in lengths]),
                "traj_len": np.repeat(lengths, lengths),
            }
        return self._flat

    @property
    def arrays(self):
        """Flat per-transition arrays in insertion order (read-only by convention)."""
        if not self._trajs:
            raise ProtocolError("replay buffer is empty")
        return self._flatten()

    def trajectories(self):
        """Iterate over stored trajectories as dicts of arrays, oldest first."""
        for t in self._trajs:
            yield {
                "traj_id": t.traj_id, "states": t.states, "actions": t.actions,
                "rewards": t.rewards, "next_states": t.next_states, "dones": t.dones,
                "mu_values": t.mu_values, "mu_std": t.mu_std,
            }

    def transition(self, i) -> Transition:
        f = self.arrays
        action = f["actions"][i]
        action = int(action) if self.mu_variant == CATEGORICAL else action.copy()
        return Transition(
            state=f["states"][i].copy(),
            mu_params=PolicyParams(self.mu_variant, f["mu_values"][i], float(f["mu_std"][i])),
            action=action,
            reward=float(f["rewards"][i]),
            next_state=f["next_states"][i].copy(),
            done=bool(f["dones"][i]),
            traj_id=int(f["traj_id"][i]),
            step_index=int(f["step_index"][i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.transition(i)

    # -- sampling ------------------------------------------------------------

    def sample_indices(self, n, rng):
        """Uniform with-replacement flat indices."""
        if not self._trajs:
            raise ProtocolError("cannot sample from an empty replay buffer")
        return rng.integers(0, len(self), size=int(n))

    def gather(self, index) -> TransitionBatch:
        f = self.arrays
        index = np.asarray(index, dtype=np.int64)
        return TransitionBatch(
            index=index,
            states=f["states"][index],
            actions=f["actions"][index],
            rewards=f["rewards"][index],
            next_states=f["next_states"][index],
            dones=f["dones"][index],
            mu_values=f["mu_values"][index],
            mu_std=f["mu_std"][index],
        )

    def sample_batch(self, n, rng):
        """``n`` transitions drawn uniformly with replacement."""
        return [self.transition(i) for i in self.sample_indices(n, rng)]

    def window_lengths(self, index, T):
        """Length of the window of margin ``T`` starting at each flat index."""
        if T < 1:
            raise InvalidParameterError(f"T must be >= 1, got {T}")
        f = self.arrays
        index = np.asarray(index, dtype=np.int64)
        return np.minimum(T, f["traj_len"][index] - f["step_index"][index])

    def window(self, start, T) -> MultiStepWindow:
        f = self.arrays
        h = int(self.window_lengths([start], T)[0])
        transitions = [self.transition(start + j) for j in range(h)]
        last = transitions[-1]
        if last.done:
            mu = None
        elif f["step_index"][start] + h < f["traj_len"][start]:
            nxt = start + h
            mu = PolicyParams(self.mu_variant, f["mu_values"][nxt], float(f["mu_std"][nxt]))
        else:
            # trajectory cut without a terminal flag: reuse the last stored policy
            mu = last.mu_params
        return MultiStepWindow(transitions, last.next_state, mu, last.done)

    def sample_windows(self, n, T, rng):
        if T < 1:
            raise InvalidParameterError(f"T must be >= 1, got {T}")
        return [self.window(int(i), T) for i in self.sample_indices(n, rng)]

    def satisfies_sda(self) -> bool:
        """State-determines-action: no exactly-equal state stored with two different actions."""
        seen = {}
        for t in self._trajs:
            for s, a in zip(t.states, t.actions):
                key = np.ascontiguousarray(s).tobytes()
                a_key = np.asarray(a).tobytes()
                if seen.setdefault(key, a_key) != a_key:
                    return False
        return True


def append_trajectory(buf: ReplayBuffer, trajectory):
    buf.append_trajectory(trajectory)


def sample_batch(buf: ReplayBuffer, n, rng):
    return buf.sample_batch(n, rng)


def sample_windows(buf: ReplayBuffer, n, T, rng):
    return buf.sample_windows(n, T, rng)


def satisfies_sda(buf: ReplayBuffer) -> bool:
    return buf.satisfies_sda()


# -- offline datasets ---------------------------------------------------------


def write_dataset(path, trajectories):
    """Write JSONL, one ``{"states", "actions", "rewards"}`` object per trajectory.

    ``states`` may hold one more entry than ``actions``: the state reached after
    the final step.
    """
    with open(path, "w") as fh:
        for traj in trajectories:
            record = {
                "states": np.asarray(traj["states"], dtype=np.float64).tolist(),
                "actions": np.asarray(traj["actions"]).tolist(),
                "rewards": np.asarray(traj["rewards"], dtype=np.float64).tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def read_dataset(path):
    trajectories = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            states = np.asarray(record["states"], dtype=np.float64)
            actions = np.asarray(record["actions"])
            rewards = np.asarray(record["rewards"], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise DecodeError(f"{path}:{lineno}: bad trajectory record ({exc})") from None
        L = rewards.size
        if L == 0 or len(actions) != L or len(states) not in (L, L + 1) or states.ndim != 2:
            raise DecodeError(
                f"{path}:{lineno}: expected {L} actions and {L} or {L + 1} states, "
                f"got {len(actions)} and {len(states)}"
            )
        trajectories.append({"states": states, "actions": actions, "rewards": rewards})
    return trajectories


def buffer_from_dataset(trajectories, discrete, n_actions=None, std=DEFAULT_STD,
                        epsilon=0.05, capacity=None):
    """Load state/action/reward trajectories, reconstructing per-step sampling policies.

    Continuous data gets a Gaussian centred on the performed action; discrete
    data gets an epsilon-smoothed one-hot. Every trajectory ends terminally.
    """
    total = sum(len(t["rewards"]) for t in trajectories)
    buf = ReplayBuffer(capacity=capacity or max(total, 1))
    for traj in trajectories:
        states = np.asarray(traj["states"], dtype=np.float64)
        rewards = np.asarray(traj["rewards"], dtype=np.float64)
        L = rewards.size
        if len(states) == L + 1:
            obs, next_obs = states[:-1], states[1:]
        else:
            obs = states
            next_obs = np.concatenate([states[1:], states[-1:]])
        dones = np.zeros(L, dtype=bool)
        dones[-1] = True
        if discrete:
            actions = np.asarray(traj["actions"], dtype=np.int64).reshape(L)
            mu_values = np.array([smoothed_one_hot(a, n_actions, epsilon).values for a in actions])
            variant = CATEGORICAL
        else:
            actions = np.asarray(traj["actions"], dtype=np.float64).reshape(L, -1)
            mu_values = actions.copy()
            variant = GAUSSIAN
        buf.append_arrays(obs, actions, rewards, next_obs, dones, mu_values,
                          mu_std=np.full(L, std), mu_variant=variant)
    return buf
