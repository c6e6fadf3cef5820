"""Trainer hyperparameters and named presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .backup import BackupOperator
from .exceptions import ConfigError


@dataclass(frozen=True)
class TrainerConfig:
    """Every hyperparameter shared by the QWR and AWR trainers.

    Defaults are the published 100K-interaction settings. ``backup``, ``tau``
    and ``scale`` describe the critic backup operator (QWR only).
    """

    k: int = 4
    T: int = 3
    beta: float = 1.0
    gamma: float = 0.99
    lam: float = 0.95
    actor_lr: float = 1e-4
    critic_lr: float = 5e-4
    batch_size: int = 256
    buffer_capacity: int = 50_000
    n_actor_steps: int = 1000
    n_critic_steps: int = 1000
    update_frequency: int = 100
    interactions_per_iteration: int = 1000
    n_iterations: int = 100
    backup: str = "lse"
    tau: float = 0.3
    scale: str = "mad"
    offline: bool = False
    seed: int = 0
    hidden: tuple = (256, 256)
    policy_std: float = 0.4
    eval_episodes: int = 10
    td_weighting: str = "normalized"
    awr_returns: str = "td_lambda"
    offline_epsilon: float = 0.05
    xi_clip: float = 20.0

    _POSITIVE = (
        "k", "T", "beta", "actor_lr", "critic_lr", "batch_size",
        "buffer_capacity", "update_frequency", "interactions_per_iteration",
        "policy_std", "tau", "xi_clip",
    )
    _NON_NEGATIVE = ("n_actor_steps", "n_critic_steps", "n_iterations", "eval_episodes", "seed")

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in self._POSITIVE:
            if not getattr(self, name) > 0:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)!r}")
        for name in self._NON_NEGATIVE:
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma", f"must be in [0, 1), got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam", f"must be in [0, 1], got {self.lam}")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden", "needs at least one positive layer width")
        if self.td_weighting not in ("normalized", "literal"):
            raise ConfigError("td_weighting", "must be 'normalized' or 'literal'")
        if self.awr_returns not in ("td_lambda", "monte_carlo"):
            raise ConfigError("awr_returns", "must be 'td_lambda' or 'monte_carlo'")
        if not 0.0 <= self.offline_epsilon < 1.0:
            raise ConfigError("offline_epsilon", "must be in [0, 1)")
        try:
            self.backup_operator
        except ValueError as exc:
            raise ConfigError("backup", str(exc)) from None

    @property
    def backup_operator(self) -> BackupOperator:
        return BackupOperator.from_config({"backup": self.backup, "tau": self.tau, "scale": self.scale})

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, data, base=None):
        """Overlay ``data`` on ``base`` (default: class defaults); unknown keys raise."""
        base = base or cls()
        names = set(cls.field_names())
        for key in data:
            if key not in names:
                raise ConfigError(key, "unknown trainer config field")
        types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        clean = {}
        for key, value in data.items():
            want = types[key]
            try:
                if want is bool:
                    if not isinstance(value, bool):
                        raise TypeError
                    clean[key] = value
                elif want is int:
                    if isinstance(value, bool) or float(value) != int(value):
                        raise TypeError
                    clean[key] = int(value)
                elif want is float:
                    clean[key] = float(value)
                elif want is tuple:
                    clean[key] = tuple(int(v) for v in value)
                else:
                    clean[key] = str(value)
            except (TypeError, ValueError):
                raise ConfigError(key, f"expected {want.__name__}, got {value!r}") from None
        return dataclasses.replace(base, **clean)


PRESETS = {
    "default": {},
    # BitFlip protocol: 10 iterations x 1000 interactions, 300 actor and
    # critic steps per iteration, mean backup.
    "bitflip": {
        "n_iterations": 10,
        "n_actor_steps": 300,
        "n_critic_steps": 300,
        "backup": "mean",
    },
    "offline": {
        "n_iterations": 30,
        "offline": True,
    },
}


def preset(name, **overrides) -> TrainerConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return TrainerConfig.from_dict({**base, **overrides})
