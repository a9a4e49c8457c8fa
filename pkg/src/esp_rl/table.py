"""Tabular ESP with a quantizing hash, plus exact oracles for finite MDPs.

The tabular agent keeps a GVF table over state-action pairs and a combiner
table over hash cells of GVF vectors, so ``Q(s, a) = C[h(Q_F[s, a])]``.
Targets are snapshots of both tables refreshed every ``K`` steps.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from esp_rl.mdp import ExplicitMdp

log = logging.getLogger(__name__)


class QuantizingHash:
    """Grid quantizer ``floor((g - lo) / delta)`` per dimension, flattened to one int.

    Values outside ``[lo, hi]`` are clamped into the edge cells with a warning.
    """

    def __init__(self, delta, lo, hi):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
        n = max(len(self.lo), len(self.hi), np.size(delta))
        self.delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (n,)).copy()
        self.lo = np.broadcast_to(self.lo, (n,)).copy()
        self.hi = np.broadcast_to(self.hi, (n,)).copy()
        if np.any(self.delta <= 0) or np.any(self.hi < self.lo):
            raise ValueError("hash needs positive resolution and lo <= hi")
        self.cells = [max(1, math.ceil((h - l) / d)) for l, h, d in zip(self.lo, self.hi, self.delta)]
        self.clamped = 0

    @property
    def dim(self) -> int:
        return len(self.delta)

    def cell(self, g) -> tuple[int, ...]:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (self.dim,):
            raise ValueError(f"expected a {self.dim}-vector, got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("cannot hash a non-finite GVF vector")
        raw = np.floor((g - self.lo) / self.delta)
        out = []
        clamped = False
        for r, c in zip(raw, self.cells):
            k = int(r)
            if k < 0 or k >= c:
                # the upper bound itself belongs to the last cell
                clamped = clamped or not (k == c and True)
                k = min(max(k, 0), c - 1)
            out.append(k)
        if clamped and np.any((g < self.lo) | (g > self.hi)):
            self.clamped += 1
            if self.clamped == 1 or self.clamped % 10_000 == 0:
                log.warning("GVF vector outside hash bounds clamped (%d so far)", self.clamped)
        return tuple(out)

    def index(self, g) -> int:
        idx = 0
        for k, c in zip(self.cell(g), self.cells):
            idx = idx * c + k
        return idx

    def to_dict(self) -> dict:
        return {"delta": self.delta.tolist(), "lo": self.lo.tolist(), "hi": self.hi.tolist()}


def hash_index(h: QuantizingHash, g) -> int:
    return h.index(g)


def gvf_bounds(mdp: ExplicitMdp) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise bounds on any GVF of the MDP: ``[min F, max F] / (1 - gamma)``."""
    scale = 1.0 / (1.0 - mdp.gamma)
    lo = np.minimum(mdp.F.min(axis=(0, 1)), 0.0) * scale
    hi = np.maximum(mdp.F.max(axis=(0, 1)), 0.0) * scale
    return lo, hi


# -- oracles ---------------------------------------------------------------


def greedy_policy(Q: np.ndarray) -> np.ndarray:
    return np.argmax(Q, axis=1)


def value_iteration(mdp: ExplicitMdp, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q-function; stops when successive iterates differ by at most ``tol``."""
    if not mdp.beta < 1.0:
        raise ValueError("value iteration needs beta < 1")
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        Qn = mdp.R + mdp.beta * mdp.T @ Q.max(axis=1)
        if np.max(np.abs(Qn - Q)) <= tol:
            return Qn
        Q = Qn
    return Q


def bellman_backup(mdp: ExplicitMdp, Q: np.ndarray) -> np.ndarray:
    return mdp.R + mdp.beta * mdp.T @ Q.max(axis=1)


def gvf_backup(mdp: ExplicitMdp, QF: np.ndarray, policy) -> np.ndarray:
    """``F(s, a) + gamma * sum_s' T(s, a, s') Q_F(s', pi(s'))``."""
    policy = np.asarray(policy)
    nxt = QF[np.arange(mdp.n_states), policy]  # (S, n)
    return mdp.F + mdp.gamma * np.einsum("ijk,kl->ijl", mdp.T, nxt)


def gvf_policy_eval(mdp: ExplicitMdp, policy, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """GVF of ``policy`` by iterating the Bellman GVF operator to a fixed point."""
    if not mdp.gamma < 1.0:
        raise ValueError("GVF evaluation needs gamma < 1")
    QF = np.zeros_like(mdp.F)
    for _ in range(max_iter):
        nxt = gvf_backup(mdp, QF, policy)
        if np.max(np.abs(nxt - QF)) <= tol:
            return nxt
        QF = nxt
    return QF


def gvf_linear_solve(mdp: ExplicitMdp, policy) -> np.ndarray:
    """Same quantity by a direct solve of ``(I - gamma P_pi) V_F = F_pi``."""
    policy = np.asarray(policy)
    rows = np.arange(mdp.n_states)
    P = mdp.T[rows, policy]  # (S, S)
    Fp = mdp.F[rows, policy]  # (S, n)
    V = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P, Fp)
    return mdp.F + mdp.gamma * np.einsum("ijk,kl->ijl", mdp.T, V)


def oracle_tables_json(mdp: ExplicitMdp, Q: np.ndarray, QF: np.ndarray, policy) -> dict:
    return {
        "q_star": Q.tolist(),
        "policy": [int(a) for a in policy],
        "gvf": QF.tolist(),
        "feature_names": list(mdp.feature_names),
        "beta": mdp.beta,
        "gamma": mdp.gamma,
    }


# -- Bellman sufficiency ---------------------------------------------------


@dataclass
class SufficiencyReport:
    samples: int
    violations: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"samples": self.samples, "violation_count": len(self.violations), "violations": self.violations}


def _random_model(mdp: ExplicitMdp, h: QuantizingHash, rng):
    """Random GVF table within the hash bounds and a random combiner value per used cell."""
    QF = rng.uniform(h.lo, h.hi, size=(mdp.n_states, mdp.n_actions, h.dim))
    C: dict[int, float] = {}
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            i = h.index(QF[s, a])
            if i not in C:
                C[i] = float(rng.normal())
            Q[s, a] = C[i]
    return QF, Q


def bellman_sufficiency_check(mdp: ExplicitMdp, h: QuantizingHash, model_samples: int = 50, rng=None, tol: float = 1e-9) -> SufficiencyReport:
    """Look for hash collisions after a GVF backup that disagree on the Bellman backup.

    For each sampled model, pairs ``(s, a)`` and ``(x, y)`` whose backed-up GVF
    vectors share a hash cell must have equal ``B[Q](s, a)`` and
    ``B[Q](x, y)``; each disagreement is reported. An empty report is
    evidence, not proof, since the condition quantifies over all models.
    """
    report = SufficiencyReport(model_samples)
    for k in range(model_samples):
        QF, Q = _random_model(mdp, h, rng)
        pi = greedy_policy(Q)
        plus = gvf_backup(mdp, QF, pi)
        BQ = bellman_backup(mdp, Q)
        cells: dict[int, list[tuple[int, int]]] = {}
        for s in range(mdp.n_states):
            for a in range(mdp.n_actions):
                cells.setdefault(h.index(plus[s, a]), []).append((s, a))
        for cell, pairs in cells.items():
            for i in range(len(pairs)):
                for j in range(i + 1, len(pairs)):
                    (s, a), (x, y) = pairs[i], pairs[j]
                    gap = abs(BQ[s, a] - BQ[x, y])
                    if gap > tol:
                        report.violations.append({"sample": k, "cell": cell, "pair_a": [s, a], "pair_b": [x, y], "gap": float(gap)})
    return report


# -- tabular ESP -------------------------------------------------------------


@dataclass
class Transition:
    s: int
    a: int
    r: float
    F: np.ndarray
    s2: int
    done: bool = False


class TabularEsp:
    def __init__(
        self,
        n_states: int,
        n_actions: int,
        h: QuantizingHash,
        beta: float,
        gamma: float,
        K: int = 500,
        c: float = 100.0,
        alpha: float | None = None,
    ):
        self.S, self.A, self.n = n_states, n_actions, h.dim
        self.h = h
        self.beta, self.gamma = beta, gamma
        self.K = int(K)
        self.c = c
        self.alpha = alpha  # fixed rate overriding the visit-count schedule
        self.gvf = np.zeros((n_states, n_actions, self.n))
        self.comb: dict[int, float] = {}
        self.gvf_visits = np.zeros((n_states, n_actions), dtype=np.int64)
        self.comb_visits: dict[int, int] = {}
        self.t = 0
        self.target_gvf = self.gvf.copy()
        self.target_comb: dict[int, float] = {}
        self._target_q = np.zeros((n_states, n_actions))

    def rate(self, visits: int) -> float:
        if self.alpha is not None:
            return self.alpha
        return self.c / (self.c + visits)

    def q(self, s: int, a: int) -> float:
        return self.comb.get(self.h.index(self.gvf[s, a]), 0.0)

    def q_table(self) -> np.ndarray:
        return np.array([[self.q(s, a) for a in range(self.A)] for s in range(self.S)])

    def greedy(self, s: int) -> int:
        return int(np.argmax([self.q(s, a) for a in range(self.A)]))

    def policy(self) -> np.ndarray:
        return greedy_policy(self.q_table())

    def sync_targets(self) -> None:
        self.target_gvf = self.gvf.copy()
        self.target_comb = dict(self.comb)
        # the target Q-table is constant until the next sync
        self._target_q = np.array(
            [[self.target_comb.get(self.h.index(self.target_gvf[s, a]), 0.0) for a in range(self.A)] for s in range(self.S)]
        )

    def target_q(self, s: int) -> np.ndarray:
        return self._target_q[s]

    def to_dict(self) -> dict:
        return {
            "gvf": self.gvf.tolist(),
            "combiner": {str(k): v for k, v in sorted(self.comb.items())},
            "q": self.q_table().tolist(),
            "policy": [int(a) for a in self.policy()],
            "steps": self.t,
            "K": self.K,
            "hash": self.h.to_dict(),
        }


def esp_table_step(table: TabularEsp, tr: Transition, rng=None) -> TabularEsp:
    """One update: target refresh at multiples of K, GVF cell first, then the combiner cell."""
    if table.t % table.K == 0:
        table.sync_targets()
    s, a = tr.s, tr.a
    if tr.done:
        f_t = np.asarray(tr.F, dtype=np.float64)
        q_t = tr.r
    else:
        tq = table.target_q(tr.s2)
        a2 = int(np.argmax(tq))
        f_t = tr.F + table.gamma * table.target_gvf[tr.s2, a2]
        q_t = tr.r + table.beta * tq[a2]
    alpha_f = table.rate(int(table.gvf_visits[s, a]))
    table.gvf[s, a] += alpha_f * (f_t - table.gvf[s, a])
    table.gvf_visits[s, a] += 1
    i = table.h.index(table.gvf[s, a])
    v = table.comb_visits.get(i, 0)
    alpha_c = table.rate(v)
    old = table.comb.get(i, 0.0)
    table.comb[i] = old + alpha_c * (q_t - old)
    table.comb_visits[i] = v + 1
    table.t += 1
    return table


def run_esp_table(
    mdp: ExplicitMdp,
    table: TabularEsp,
    steps: int,
    rng,
    epsilon: float = 0.2,
    explore: str = "epsilon",
) -> TabularEsp:
    """Continuing stream of epsilon-greedy experience; terminal states restart from the start distribution.

    ``explore="uniform"`` picks actions uniformly at random (off-policy sweep).
    """
    T_cum = np.cumsum(mdp.T, axis=2)
    s = mdp.sample_start(rng)
    u = rng.random(size=(steps, 3))
    for k in range(steps):
        if explore == "uniform" or u[k, 0] < epsilon:
            a = min(int(u[k, 1] * mdp.n_actions), mdp.n_actions - 1)
        else:
            a = table.greedy(s)
        s2 = int(np.searchsorted(T_cum[s, a], u[k, 2], side="right"))
        s2 = min(s2, mdp.n_states - 1)
        done = bool(mdp.terminal[s2])
        esp_table_step(table, Transition(s, a, float(mdp.R[s, a]), mdp.F[s, a], s2, done), rng)
        s = mdp.sample_start(rng) if done else s2
    return table


def tables_to_json(path, obj: dict) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
