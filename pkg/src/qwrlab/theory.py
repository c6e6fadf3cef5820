"""Tabular checks of the AWR/QWR fixed-point results.

Each closed form is paired with a brute-force search (simplex grids,
multi-start gradient ascent) that does not reuse the closed form, and
:func:`verify_theorems` runs the full battery and returns a JSON-ready report.
"""

from __future__ import annotations

import itertools
import time
from collections import defaultdict

import numpy as np

from .envs import TabularMDP, tabular_q, tabular_v
from .exceptions import InvalidParameterError


def awr_optimum_discrete(buffer, n_actions):
    """Exact maximizer of ``sum_{(s, a, xi)} xi * log pi(a | s)`` over per-state distributions.

    ``buffer`` yields ``(state_key, action, xi)`` with hashable state keys.
    The optimum is ``pi(a | s)`` proportional to the summed weights of
    ``(s, a)``; on a state-determines-action buffer every row is one-hot.
    """
    totals = defaultdict(lambda: np.zeros(n_actions))
    for state, action, xi in buffer:
        if not xi > 0:
            raise InvalidParameterError(f"advantage weights must be positive, got {xi}")
        totals[state][int(action)] += xi
    return {s: w / w.sum() for s, w in totals.items()}


def awr_optimum_gaussian(buffer, eps):
    """Per-state maximizer over ``N(m, sigma^2)`` with ``sigma >= eps`` for 1-D actions.

    ``buffer`` yields ``(state_key, action)`` or ``(state_key, action, xi)``.
    Returns ``{state: (mean, sigma)}``: the weighted mean and the weighted
    standard deviation floored at ``eps`` (which is exactly ``eps`` on
    state-determines-action buffers).
    """
    if not eps > 0:
        raise InvalidParameterError(f"eps must be positive, got {eps}")
    groups = defaultdict(list)
    for item in buffer:
        state, action = item[0], float(item[1])
        xi = float(item[2]) if len(item) > 2 else 1.0
        groups[state].append((action, xi))
    out = {}
    for state, pairs in groups.items():
        a, w = np.array(pairs).T
        mean = float(np.sum(w * a) / w.sum())
        spread = float(np.sqrt(np.sum(w * (a - mean) ** 2) / w.sum()))
        out[state] = (mean, max(eps, spread))
    return out


def gaussian_log_likelihood(action, mean, sigma):
    return -np.log(sigma * np.sqrt(2.0 * np.pi)) - 0.5 * ((action - mean) / sigma) ** 2


def gaussian_ascent(action, eps, mean0, sigma0, steps=2000, tol=1e-12):
    """Projected gradient ascent of ``log N(action; mean, sigma)`` with ``sigma >= eps``.

    Steps are scaled by ``sigma^2`` so one step size works across scales.
    """
    mean, sigma = float(mean0), max(float(sigma0), eps)
    for _ in range(steps):
        d = action - mean
        g_mean = d / sigma ** 2
        g_sigma = -1.0 / sigma + d * d / sigma ** 3
        new_mean = mean + 0.5 * sigma ** 2 * g_mean
        new_sigma = max(eps, sigma + 0.25 * sigma ** 2 * g_sigma)
        if abs(new_mean - mean) < tol and abs(new_sigma - sigma) < tol:
            return new_mean, new_sigma
        mean, sigma = new_mean, new_sigma
    return mean, sigma


def simplex_grid(n_actions, resolution):
    """All points of the probability simplex with coordinates in ``{0, 1/r, ..., 1}``."""
    pts = [
        c + (resolution - sum(c),)
        for c in itertools.product(range(resolution + 1), repeat=n_actions - 1)
        if sum(c) <= resolution
    ]
    return np.array(pts, dtype=np.float64) / resolution


def grid_argmax(weights, grid):
    """Grid point maximizing ``sum_a weights[a] * log p[a]`` (brute force)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(weights > 0, np.log(grid), 0.0)
    scores = logs @ weights
    return grid[np.argmax(scores)]


def qwr_target_policy(mdp: TabularMDP, mu, beta):
    """``pi*(a|s) proportional to mu(a|s) exp((Q_mu(s, a) - V_mu(s)) / beta)`` with exact ``Q_mu``."""
    if not beta > 0:
        raise InvalidParameterError(f"beta must be positive, got {beta}")
    mu = np.asarray(mu, dtype=np.float64)
    q = tabular_q(mdp, mu)
    v = np.sum(mu * q, axis=1, keepdims=True)
    z = (q - v) / beta
    z -= z.max(axis=1, keepdims=True)
    unnorm = mu * np.exp(z)
    return unnorm / unnorm.sum(axis=1, keepdims=True)


def weighted_cross_entropy_argmax(mu, xi):
    """Closed-form maximizer of ``sum_a mu(a) xi(a) log pi(a)`` per row."""
    w = np.asarray(mu, dtype=np.float64) * np.asarray(xi, dtype=np.float64)
    return w / w.sum(axis=-1, keepdims=True)


def policy_improvement_check(mdp: TabularMDP, mu, pi, tol=1e-10):
    """True iff ``V_pi(s) >= V_mu(s) - tol`` wherever ``E_{a~pi} Q_mu(s, a) >= V_mu(s)``."""
    mu = np.asarray(mu, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    q_mu = tabular_q(mdp, mu)
    v_mu = np.sum(mu * q_mu, axis=1)
    premise = np.sum(pi * q_mu, axis=1) >= v_mu - tol
    v_pi = tabular_v(mdp, pi)
    return bool(np.all(v_pi[premise] >= v_mu[premise] - tol))


def greedy_policy(q):
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return pi


def random_policy(n_states, n_actions, rng):
    return rng.dirichlet(np.ones(n_actions), size=n_states)


# -- the full battery ---------------------------------------------------------


def _check_awr_discrete(rng, n_buffers):
    failures = 0
    for _ in range(n_buffers):
        n_actions = int(rng.integers(2, 6))
        n_states = int(rng.integers(1, 40))
        buffer = [
            ((i,), int(rng.integers(n_actions)), float(np.exp(rng.normal(scale=2.0))))
            for i in range(n_states)
        ]
        pi = awr_optimum_discrete(buffer, n_actions)
        for state, action, _ in buffer:
            expected = np.zeros(n_actions)
            expected[action] = 1.0
            if not np.array_equal(pi[state], expected):
                failures += 1
                break
    # non-SDA cross-check against the simplex grid
    grid = simplex_grid(2, 400)
    pi = awr_optimum_discrete([("s", 0, 1.0), ("s", 1, 3.0)], 2)["s"]
    grid_pi = grid_argmax(np.array([1.0, 3.0]), grid)
    return {
        "buffers": n_buffers,
        "non_one_hot": failures,
        "non_sda_closed_form": pi.tolist(),
        "non_sda_grid": grid_pi.tolist(),
        "passed": bool(failures == 0 and np.abs(pi - grid_pi).max() <= 1e-2),
    }


def _check_awr_gaussian(rng, n_starts):
    action = float(rng.uniform(-2, 2))
    eps = 0.1
    closed = awr_optimum_gaussian([("s", action)], eps)["s"]
    worst = 0.0
    for _ in range(n_starts):
        m, s = gaussian_ascent(action, eps, rng.uniform(-3, 3), rng.uniform(eps, 3.0))
        worst = max(worst, abs(m - action), abs(s - eps))
    return {
        "action": action,
        "eps": eps,
        "closed_form": list(closed),
        "max_ascent_error": worst,
        "passed": closed == (action, eps) and worst <= 1e-4,
    }


def _check_qwr_target(rng, n_mdps, betas=(0.1, 1.0, 10.0), n_states=6, n_actions=3, resolution=400):
    grid = simplex_grid(n_actions, resolution)
    max_closed_err = max_tv = 0.0
    improvement_failures = 0
    for _ in range(n_mdps):
        mdp = TabularMDP.random(n_states, n_actions, gamma=0.9, rng=rng)
        mu = random_policy(n_states, n_actions, rng)
        q = tabular_q(mdp, mu)
        v = np.sum(mu * q, axis=1, keepdims=True)
        for beta in betas:
            pi_star = qwr_target_policy(mdp, mu, beta)
            xi = np.exp((q - v) / beta)
            closed = weighted_cross_entropy_argmax(mu, xi)
            max_closed_err = max(max_closed_err, float(np.abs(closed - pi_star).max()))
            for s in range(n_states):
                brute = grid_argmax(mu[s] * xi[s], grid)
                max_tv = max(max_tv, 0.5 * float(np.abs(brute - pi_star[s]).sum()))
            if not policy_improvement_check(mdp, mu, pi_star):
                improvement_failures += 1
    return {
        "mdps": n_mdps,
        "betas": list(betas),
        "max_closed_form_error": max_closed_err,
        "max_grid_tv": max_tv,
        "improvement_failures": improvement_failures,
        "passed": max_closed_err <= 1e-12 and max_tv <= 1e-2 and improvement_failures == 0,
    }


CHECKS = ("awr_discrete", "awr_gaussian", "qwr_target")


def verify_theorems(seed=0, n_buffers=100, n_starts=10, n_mdps=20):
    """Run every tabular check and return a JSON-ready report with a top-level ``passed``."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    report = {
        "seed": seed,
        "awr_discrete": _check_awr_discrete(rng, n_buffers),
        "awr_gaussian": _check_awr_gaussian(rng, n_starts),
        "qwr_target": _check_qwr_target(rng, n_mdps),
    }
    report["passed"] = all(report[k]["passed"] for k in CHECKS)
    report["seconds"] = time.perf_counter() - start
    return report
