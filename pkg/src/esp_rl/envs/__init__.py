"""Built-in environments and the name registry used by configs and the CLI."""

from __future__ import annotations

import json

import numpy as np

from esp_rl.envs.base import (
    Env,
    EnvDescriptor,
    EnvError,
    FeatureSpec,
    InvalidActionError,
    StepOutcome,
    UnsupportedError,
    activation_policy,
    check_outcome,
    env_reset,
    env_step,
)
from esp_rl.envs.cartpole import CartPole, cartpole_features
from esp_rl.envs.gridworld import PRESETS as GRID_PRESETS
from esp_rl.envs.gridworld import GridWorld, GridWorldSpec, make_gridworld
from esp_rl.envs.minitow import OPPONENTS, MiniToW, MiniToWConfig, MiniToWState, minitow_features

KNOWN_ENVS = (
    ["cartpole", "cartpole:delta"]
    + [f"gridworld:{p}" for p in GRID_PRESETS]
    + ["minitow"]
    + [f"minitow:{o}" for o in OPPONENTS]
)


def make_env(name: str, beta: float | None = None, gamma: float | None = None, **options) -> Env:
    """Build an environment from its registry id, e.g. ``cartpole:delta`` or ``gridworld:3x3``."""
    kind, _, variant = name.partition(":")
    disc = {k: v for k, v in (("beta", beta), ("gamma", gamma)) if v is not None}
    if kind == "cartpole":
        return CartPole(encoding=variant or "discrete", **disc, **options)
    if kind == "gridworld":
        if variant not in GRID_PRESETS:
            raise EnvError(f"unknown gridworld preset {variant!r}; known: {sorted(GRID_PRESETS)}")
        return make_gridworld(variant, **disc)
    if kind == "minitow":
        cfg = MiniToWConfig(**options) if options else None
        return MiniToW(opponent=variant or "rusher", config=cfg, **disc)
    raise EnvError(f"unknown environment {name!r}; known: {', '.join(KNOWN_ENVS)}")


def enumerate_mdp(env: Env):
    """Explicit transition, reward and feature tables of a tabular environment.

    Terminal cells become absorbing states with zero reward and features, and
    the step limit is dropped so the state is the cell alone.
    """
    from esp_rl.mdp import ExplicitMdp

    if not getattr(env, "tabular", False):
        raise UnsupportedError(f"{env.descriptor.name} is not tabular")
    S, A, n = env.n_cells, env.n_actions, env.descriptor.n_features
    T = np.zeros((S, A, S))
    R = np.zeros((S, A))
    F = np.zeros((S, A, n))
    terminal = np.zeros(S, dtype=bool)
    for s in range(S):
        if env.is_terminal(s):
            terminal[s] = True
            T[s, :, s] = 1.0
            continue
        for a in range(A):
            for nxt, p in env.successors(s, a):
                r, f = env._outcome_values(s, nxt)
                T[s, a, nxt] += p
                R[s, a] += p * r
                F[s, a] += p * f
    start = np.zeros(S)
    start[env.reset()[0]] = 1.0
    d = env.descriptor
    return ExplicitMdp(T, R, F, d.beta, d.gamma, terminal, start, d.feature_names)


def dump_trajectory(env: Env, path, records) -> None:
    """Write (state, action, StepOutcome) records as line-delimited JSON."""
    with open(path, "w") as fh:
        for state, action, out in records:
            fh.write(
                json.dumps(
                    {
                        "state": _jsonable(env.state_to_json(state)),
                        "action": int(action),
                        "next_state": _jsonable(env.state_to_json(out.next_state)),
                        "reward": float(out.reward),
                        "features": [float(x) for x in out.features],
                        "done": bool(out.done),
                        "truncated": bool(out.truncated),
                    }
                )
                + "\n"
            )


def load_trajectory(env: Env, path) -> list[tuple]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            out = StepOutcome(
                env.state_from_json(r["next_state"]),
                r["reward"],
                np.array(r["features"]),
                r["done"],
                r.get("truncated", False),
            )
            rows.append((env.state_from_json(r["state"]), r["action"], out))
    return rows


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


__all__ = [
    "CartPole",
    "Env",
    "EnvDescriptor",
    "EnvError",
    "FeatureSpec",
    "GridWorld",
    "GridWorldSpec",
    "InvalidActionError",
    "KNOWN_ENVS",
    "MiniToW",
    "MiniToWConfig",
    "MiniToWState",
    "StepOutcome",
    "UnsupportedError",
    "activation_policy",
    "cartpole_features",
    "check_outcome",
    "dump_trajectory",
    "enumerate_mdp",
    "env_reset",
    "env_step",
    "load_trajectory",
    "make_env",
    "minitow_features",
]
