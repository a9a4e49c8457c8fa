"""Explicit finite MDPs extended with a GVF feature table."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from esp_rl.envs.base import StepOutcome


@dataclass
class ExplicitMdp:
    T: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A) expected reward
    F: np.ndarray  # (S, A, n) expected features
    beta: float
    gamma: float
    terminal: np.ndarray = None  # (S,) absorbing, zero-valued states
    start: np.ndarray = None  # (S,) initial distribution
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        S, A, S2 = self.T.shape
        if S != S2 or self.R.shape != (S, A) or self.F.shape[:2] != (S, A):
            raise ValueError("inconsistent MDP table shapes")
        if not np.allclose(self.T.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("transition rows must be probability distributions")
        if self.terminal is None:
            self.terminal = np.zeros(S, dtype=bool)
        if self.start is None:
            self.start = np.full(S, 1.0 / S)
        if not self.feature_names:
            self.feature_names = [f"f{i}" for i in range(self.F.shape[2])]

    @property
    def n_states(self) -> int:
        return self.T.shape[0]

    @property
    def n_actions(self) -> int:
        return self.T.shape[1]

    @property
    def n_features(self) -> int:
        return self.F.shape[2]

    def sample_start(self, rng) -> int:
        return int(rng.choice(self.n_states, p=self.start))

    def sample(self, s: int, a: int, rng) -> StepOutcome:
        """One simulated transition; features and reward are the expected tables."""
        nxt = int(rng.choice(self.n_states, p=self.T[s, a]))
        done = bool(self.terminal[nxt])
        return StepOutcome(nxt, float(self.R[s, a]), self.F[s, a].copy(), done)

    def to_dict(self) -> dict:
        return {
            "T": self.T.tolist(),
            "R": self.R.tolist(),
            "F": self.F.tolist(),
            "beta": self.beta,
            "gamma": self.gamma,
            "terminal": self.terminal.tolist(),
            "start": self.start.tolist(),
            "feature_names": self.feature_names,
        }


def random_mdp(
    rng,
    n_states: int = 8,
    n_actions: int = 2,
    n_features: int = 3,
    branching: int = 2,
    beta: float = 0.8,
    gamma: float = 0.8,
) -> ExplicitMdp:
    """Random continuing MDP whose reward is a fixed linear function of its features.

    Each (s, a) has ``branching`` successors: the next state on a ring, which
    keeps every state reachable under any policy, plus random others.
    Features are uniform in [0, 1] and ``R = F @ w``, so with ``beta == gamma``
    the optimal Q-function is linear in the optimal-policy GVF.
    """
    T = np.zeros((n_states, n_actions, n_states))
    k = min(branching, n_states)
    for s in range(n_states):
        ring = (s + 1) % n_states
        others = [x for x in range(n_states) if x != ring]
        for a in range(n_actions):
            succ = [ring] + list(rng.choice(others, size=k - 1, replace=False)) if k > 1 else [ring]
            T[s, a, succ] = rng.dirichlet(np.ones(len(succ)))
    F = rng.uniform(0.0, 1.0, size=(n_states, n_actions, n_features))
    w = rng.uniform(-1.0, 1.0, size=n_features)
    R = F @ w
    return ExplicitMdp(T, R, F, beta, gamma)
