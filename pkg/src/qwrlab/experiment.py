"""Experiment plumbing: config files, seeded runs, the BitFlip sweep and
per-iteration aggregation across seeds.

Output layout of :func:`run_experiment`::

    out/
      seed_0/
        metrics.jsonl         one JSON object per iteration
        resolved-config.json  every setting, defaults included
        final.ckpt            actor + critic parameters
        timings.json          wall-clock per iteration
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import PRESETS, TrainerConfig
from .envs import PointEnv, make_env
from .exceptions import ConfigError, InvalidParameterError
from .netcore import save_checkpoint
from .replay import read_dataset, write_dataset
from .awr import AWRTrainer
from .qwr import QWRTrainer

log = logging.getLogger(__name__)

ALGORITHMS = {"qwr": QWRTrainer, "awr": AWRTrainer}
SPEC_KEYS = ("algorithm", "env", "dataset", "eval_env", "preset", "trainer", "seeds")
BITFLIP_N = (5, 8, 12, 16, 20, 24, 30)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def _check_env_spec(name, value):
    if value is None:
        return None
    spec = {"env": value} if isinstance(value, str) else value
    if not isinstance(spec, dict) or "env" not in spec:
        raise ConfigError(name, "expected an env name or an object with an 'env' key")
    try:
        make_env(spec)
    except (ValueError, TypeError) as exc:
        raise ConfigError(name, str(exc)) from None
    return dict(spec)


@dataclass
class ExperimentSpec:
    """One algorithm on one env (online) or one dataset (offline), over several seeds.

    ``trainer`` overrides the preset. ``eval_env`` is only used offline, to
    score the learned policy.
    """

    algorithm: str = "qwr"
    env: dict | None = None
    dataset: str | None = None
    eval_env: dict | None = None
    preset: str = "default"
    trainer: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {sorted(ALGORITHMS)}, got {self.algorithm!r}")
        self.env = _check_env_spec("env", self.env)
        self.eval_env = _check_env_spec("eval_env", self.eval_env)
        if (self.env is None) == (self.dataset is None):
            raise ConfigError("dataset" if self.env is None else "env",
                              "exactly one of 'env' (online) and 'dataset' (offline) is required")
        if self.dataset is not None and not Path(self.dataset).is_file():
            raise ConfigError("dataset", f"no such file: {self.dataset}")
        if self.preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {self.preset!r}")
        if not isinstance(self.trainer, dict):
            raise ConfigError("trainer", "expected an object of trainer settings")
        if not isinstance(self.seeds, (list, tuple)) or not self.seeds:
            raise ConfigError("seeds", "expected a non-empty list of integers")
        try:
            self.seeds = [int(s) for s in self.seeds]
        except (TypeError, ValueError):
            raise ConfigError("seeds", f"expected integers, got {self.seeds!r}") from None
        if min(self.seeds) < 0:
            raise ConfigError("seeds", "seeds must be >= 0")
        self.config(self.seeds[0])

    @property
    def offline(self):
        return self.dataset is not None

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object")
        for key in data:
            if key not in SPEC_KEYS:
                raise ConfigError(key, "unknown experiment field")
        return cls(**data)

    @classmethod
    def from_file(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"no such file: {path}") from None
        except ValueError as exc:
            raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def config(self, seed) -> TrainerConfig:
        """Trainer config for one seed: preset, then overrides, then seed and mode."""
        base = TrainerConfig.from_dict(PRESETS[self.preset])
        cfg = TrainerConfig.from_dict(self.trainer, base=base)
        return cfg.replace(seed=seed, offline=self.offline)

    def resolved(self, seed):
        """Fully materialized single-seed spec; feeding it back reproduces the run."""
        return {
            "algorithm": self.algorithm,
            "env": self.env,
            "dataset": self.dataset,
            "eval_env": self.eval_env,
            "trainer": self.config(seed).to_dict(),
            "seeds": [seed],
        }


def _write_jsonl_line(fh, record):
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def run_single(spec: ExperimentSpec, seed, out_dir):
    """Train one seed and write its output directory; returns the metrics list."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = spec.config(seed)
    (out_dir / "resolved-config.json").write_text(json.dumps(spec.resolved(seed), indent=2, sort_keys=True) + "\n")
    if spec.offline:
        env = make_env(spec.eval_env) if spec.eval_env else None
        dataset = read_dataset(spec.dataset)
    else:
        env, dataset = make_env(spec.env), None
    start = time.perf_counter()
    with threadpool_limits(limits=1), open(out_dir / "metrics.jsonl", "w") as fh:
        trainer = ALGORITHMS[spec.algorithm](cfg, env=env, dataset=dataset)
        result = trainer.run(callback=lambda m: _write_jsonl_line(fh, m.to_record()))
    nets = {"actor": result.actor.net, **{f"critic.{k}": v for k, v in result.critic.nets.items()}}
    save_checkpoint(out_dir / "final.ckpt", nets, metadata={
        "algorithm": spec.algorithm,
        "iterations": len(result.metrics),
        "env_steps_total": trainer.env_steps_total,
        "actor_variant": result.actor.variant,
        "actor_std": result.actor.std,
    })
    (out_dir / "timings.json").write_text(json.dumps({
        "iteration_seconds": [m.wall_time for m in result.metrics],
        "total_seconds": time.perf_counter() - start,
    }, indent=2) + "\n")
    return result.metrics


def run_experiment(spec: ExperimentSpec, out):
    """Run every seed of ``spec`` under ``out/seed_<n>/``; returns the run directories."""
    dirs = []
    for seed in spec.seeds:
        run_dir = Path(out) / f"seed_{seed}"
        log.info("%s seed %d -> %s", spec.algorithm, seed, run_dir)
        run_single(spec, seed, run_dir)
        dirs.append(run_dir)
    return dirs


# -- BitFlip sweep ---------------------------------------------------------------


@dataclass
class SweepSpec:
    """``base`` repeated over ``axis`` values (an env parameter) for each algorithm."""

    base: ExperimentSpec
    axis: str = "n"
    values: tuple = BITFLIP_N
    algorithms: tuple = ("qwr", "awr")

    def __post_init__(self):
        if not len(self.values):
            raise ConfigError("values", "sweep axis needs at least one value")
        if self.base.offline:
            raise ConfigError("env", "sweeps vary an environment parameter and need an online base")
        for alg in self.algorithms:
            if alg not in ALGORITHMS:
                raise ConfigError("algorithms", f"unknown algorithm {alg!r}")

    def jobs(self):
        for alg in self.algorithms:
            for value in self.values:
                env = {**self.base.env, self.axis: value}
                spec = ExperimentSpec(
                    algorithm=alg, env=env, preset=self.base.preset,
                    trainer=dict(self.base.trainer), seeds=self.base.seeds,
                )
                for seed in spec.seeds:
                    yield alg, value, seed, spec


def bitflip_sweep_spec(seeds=DEFAULT_SEEDS, values=BITFLIP_N, algorithms=("qwr", "awr"), trainer=None):
    base = ExperimentSpec(algorithm=algorithms[0], env={"env": "bitflip", "n": 16}, preset="bitflip",
                          trainer=dict(trainer or {}), seeds=list(seeds))
    return SweepSpec(base=base, axis="n", values=tuple(values), algorithms=tuple(algorithms))


def _sweep_job(args):
    alg, value, seed, spec, out = args
    metrics = run_single(spec, seed, Path(out) / f"{alg}_{spec.env['env']}_{value}" / f"seed_{seed}")
    final = metrics[-1].eval_return_mean if metrics else float("nan")
    return alg, value, seed, final


def sweep_workers():
    """Worker processes for sweeps, capped by ``QWRLAB_THREADS`` (default 1)."""
    raw = os.environ.get("QWRLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("QWRLAB_THREADS", f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("QWRLAB_THREADS", f"expected a positive integer, got {raw!r}")
    return n


def run_bitflip_figure(sweep: SweepSpec, out, workers=None):
    """Run every (algorithm, N, seed) and write ``out/bitflip.csv``.

    ``mean_return`` is the final iteration's evaluation mean. Returns the rows.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    workers = sweep_workers() if workers is None else workers
    jobs = [(alg, value, seed, spec, out) for alg, value, seed, spec in sweep.jobs()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(job) for job in jobs]
    with open(out / "bitflip.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algorithm", sweep.axis.upper(), "seed", "mean_return"])
        writer.writerows(rows)
    return rows


# -- aggregation --------------------------------------------------------------------


def find_runs(paths):
    """Expand run directories (or parents holding ``seed_*`` runs) to metrics files."""
    found = []
    for p in map(Path, paths):
        if (p / "metrics.jsonl").is_file():
            found.append(p / "metrics.jsonl")
        elif p.is_file() and p.suffix == ".jsonl":
            found.append(p)
        else:
            nested = sorted(p.glob("*/metrics.jsonl"))
            if not nested:
                raise ConfigError(str(p), "no metrics.jsonl found")
            found.extend(nested)
    return found


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summarize(paths, metric="eval_return_mean"):
    """Per-iteration median and interquartile range of ``metric`` across runs.

    Quartiles use linear interpolation. Every run must have the same number
    of iterations. Returns a list of dict rows.
    """
    files = find_runs(paths)
    if not files:
        raise ConfigError("runs", "need at least one run")
    series = []
    for f in files:
        records = read_metrics(f)
        if records and metric not in records[0]:
            raise ConfigError("metric", f"{metric!r} not present in {f}")
        series.append((f, [np.nan if r[metric] is None else r[metric] for r in records]))
    n_iter = len(series[0][1])
    for f, values in series:
        if len(values) != n_iter:
            raise ConfigError(str(f.parent), f"has {len(values)} iterations, expected {n_iter} (as in {series[0][0].parent})")
    table = np.array([v for _, v in series], dtype=np.float64).reshape(len(series), n_iter)
    rows = []
    for i in range(n_iter):
        q1, med, q3 = np.percentile(table[:, i], [25, 50, 75])
        rows.append({
            "iteration": i, "n_runs": len(series), "median": float(med),
            "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1), "iqr_half": float(q3 - q1) / 2,
        })
    return rows


SUMMARY_COLUMNS = ("iteration", "n_runs", "median", "q1", "q3", "iqr", "iqr_half")


def write_summary(rows, fh):
    writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
    writer.writeheader()
    writer.writerows(rows)


# -- offline datasets ------------------------------------------------------------------


def mixed_point_dataset(n_trajectories=50, seed=0, good_fraction=0.5, noise=0.3):
    """Point-env trajectories from a mix of a noisy homing policy and a uniform one.

    A ``good_fraction`` of episodes steer toward the origin with Gaussian
    noise; the rest act uniformly in [-1, 1]. Returns the trajectories and
    the mean undiscounted return of the behavior data.
    """
    if not 0.0 <= good_fraction <= 1.0:
        raise InvalidParameterError("good_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    env = PointEnv()
    trajectories = []
    for i in range(n_trajectories):
        good = i < round(good_fraction * n_trajectories)
        obs = env.reset(rng)
        states, actions, rewards = [obs], [], []
        done = False
        while not done:
            if good:
                a = np.clip(-obs[0], -1.0, 1.0) + noise * rng.standard_normal()
            else:
                a = rng.uniform(-1.0, 1.0)
            obs, r, done = env.step(np.array([a]))
            states.append(obs)
            actions.append([a])
            rewards.append(r)
        trajectories.append({"states": np.array(states), "actions": np.array(actions), "rewards": np.array(rewards)})
    behavior_mean = float(np.mean([t["rewards"].sum() for t in trajectories]))
    return trajectories, behavior_mean


def write_mixed_point_dataset(path, **kwargs):
    trajectories, behavior_mean = mixed_point_dataset(**kwargs)
    write_dataset(path, trajectories)
    return behavior_mean

