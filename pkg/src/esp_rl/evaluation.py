"""Greedy-policy evaluation and Monte-Carlo GVF ground truth.

Episodes and rollouts run in lockstep so the networks see one batched
forward pass per tick; each episode draws from its own named RNG stream, so
results do not depend on how many run together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from esp_rl.envs.base import UnsupportedError
from esp_rl.model import masked_argmax_rows


@dataclass
class PolicyEval:
    mean_return: float
    std_return: float
    returns: list[float]
    win_rate: float | None = None  # MiniToW only
    lengths: list[int] = field(default_factory=list)


@dataclass
class GvfGroundTruth:
    states: list  # env states
    obs: np.ndarray  # (S, state_dim)
    mean: np.ndarray  # (S, A, n)
    se: np.ndarray  # (S, A, n) standard error of the mean
    rollouts: int

    def to_dict(self, env) -> dict:
        return {
            "states": [env.state_to_json(s) for s in self.states],
            "mean": self.mean.tolist(),
            "se": self.se.tolist(),
            "rollouts": self.rollouts,
        }


class TablePolicy:
    """Greedy policy given as an action per tabular state (one-hot observations)."""

    def __init__(self, actions):
        self.actions = np.asarray(actions, dtype=int)

    def q_values(self, obs):
        obs = np.atleast_2d(obs)
        q = np.zeros((obs.shape[0], int(self.actions.max()) + 1))
        q[np.arange(len(obs)), self.actions[np.argmax(obs, axis=1)]] = 1.0
        return q


def greedy_actions(env, model, states) -> list[int]:
    obs = np.array([env.observe(s) for s in states])
    q = np.atleast_2d(model.q_values(obs))
    mask = np.array([env.action_mask(s) for s in states]) if env.masked else None
    if q.shape[1] < env.n_actions:  # table policies may omit unused trailing actions
        q = np.pad(q, ((0, 0), (0, env.n_actions - q.shape[1])), constant_values=-np.inf)
    return [int(a) for a in masked_argmax_rows(q, mask)]


def evaluate_policy(env, model, episodes: int, rng, max_steps: int | None = None) -> PolicyEval:
    """Undiscounted returns of the greedy policy over ``episodes`` episodes."""
    if episodes <= 0:
        return PolicyEval(0.0, 0.0, [], None, [])
    rngs = [rng.child(f"episode{i}") for i in range(episodes)]
    states = [env.reset(r) for r in rngs]
    returns = np.zeros(episodes)
    lengths = np.zeros(episodes, dtype=int)
    winners: list = [None] * episodes
    active = list(range(episodes))
    while active:
        actions = greedy_actions(env, model, [states[i] for i in active])
        still = []
        for i, a in zip(active, actions):
            out = env.step(states[i], a, rngs[i])
            returns[i] += out.reward
            lengths[i] += 1
            states[i] = out.next_state
            if out.done or (max_steps is not None and lengths[i] >= max_steps):
                winners[i] = out.info.get("winner")
            else:
                still.append(i)
        active = still
    win_rate = None
    if any(w is not None for w in winners):
        win_rate = float(np.mean([w == 0 for w in winners]))
    return PolicyEval(float(returns.mean()), float(returns.std()), returns.tolist(), win_rate, lengths.tolist())


def collect_test_states(env, model, count: int, rng, max_steps: int | None = None) -> list:
    """Sample ``count`` states uniformly from greedy-policy trajectories."""
    pool = []
    k = 0
    while len(pool) < 4 * count or k == 0:
        r = rng.child(f"trajectory{k}")
        s = env.reset(r)
        for t in range(max_steps or 10**9):
            pool.append(s)
            out = env.step(s, greedy_actions(env, model, [s])[0], r)
            if out.done:
                break
            s = out.next_state
        k += 1
        if k >= 1000:
            break
    idx = rng.child("pick").choice(len(pool), size=min(count, len(pool)), replace=False)
    return [pool[i] for i in sorted(idx)]


def monte_carlo_gvf(env, model, test_states, rollouts: int, rng, gamma: float | None = None, max_steps: int | None = None) -> GvfGroundTruth:
    """Discounted feature accumulation of: take ``a`` in ``s``, then follow the greedy policy.

    Deterministic environments use a single rollout per pair since every
    rollout would be identical.
    """
    if not hasattr(env, "step") or not hasattr(env, "state_to_json"):
        raise UnsupportedError("environment does not support state injection")
    gamma = env.descriptor.gamma if gamma is None else gamma
    R = 1 if env.deterministic else int(rollouts)
    S, A, n = len(test_states), env.n_actions, env.descriptor.n_features
    # one job per (state, action, rollout)
    jobs = [(si, a, k) for si in range(S) for a in range(A) for k in range(R)]
    acc = np.zeros((len(jobs), n))
    disc = np.ones(len(jobs))
    rngs = [rng.child(f"s{si}a{a}r{k}") for si, a, k in jobs]
    states = [None] * len(jobs)
    steps = np.zeros(len(jobs), dtype=int)
    active = []
    for j, (si, a, _) in enumerate(jobs):
        s = test_states[si]
        if env.masked and not env.action_mask(s)[a]:
            continue  # unavailable action: estimate stays zero
        out = env.step(s, a, rngs[j])
        acc[j] += out.features
        disc[j] = gamma
        steps[j] = 1
        states[j] = out.next_state
        if not out.done:
            active.append(j)
    while active:
        actions = greedy_actions(env, model, [states[j] for j in active])
        still = []
        for j, a in zip(active, actions):
            out = env.step(states[j], a, rngs[j])
            acc[j] += disc[j] * out.features
            disc[j] *= gamma
            steps[j] += 1
            states[j] = out.next_state
            if not out.done and (max_steps is None or steps[j] < max_steps):
                still.append(j)
        active = still
    acc = acc.reshape(S, A, R, n)
    mean = acc.mean(axis=2)
    se = acc.std(axis=2, ddof=1) / np.sqrt(R) if R > 1 else np.zeros_like(mean)
    obs = np.array([env.observe(s) for s in test_states]) if S else np.zeros((0, env.descriptor.state_dim))
    return GvfGroundTruth(list(test_states), obs, mean, se, R)


def gvf_mse(model, truth: GvfGroundTruth) -> float:
    """Mean squared error over (state, action, component)."""
    if len(truth.states) == 0:
        return 0.0
    pred = model.gvf_all(truth.obs)
    if pred.shape != truth.mean.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {truth.mean.shape}")
    return float(np.mean((pred - truth.mean) ** 2))
