"""Environment contract shared by the built-in environments.

Every step returns the reward *and* a GVF feature vector ``F(s, a)`` laid out
according to the environment's feature schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from esp_rl.nn import OutputMap

FEATURE_KINDS = ("indicator", "delta", "terminal-indicator")


class EnvError(ValueError):
    pass


class InvalidActionError(EnvError):
    pass


class UnsupportedError(EnvError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    # expected range of the feature's accumulated (GVF) value, drives the output activation
    gvf_range: tuple[float, float]
    group: str | None = None  # mutually exclusive terminal indicators share a group
    activation: str | None = None  # overrides the range-based choice

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise EnvError(f"feature {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class EnvDescriptor:
    name: str
    state_dim: int
    n_actions: int
    features: tuple[FeatureSpec, ...]
    beta: float
    gamma: float
    action_names: tuple[str, ...] = ()

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise EnvError("feature names must be unique")

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "state_dim": self.state_dim,
            "n_actions": self.n_actions,
            "beta": self.beta,
            "gamma": self.gamma,
            "action_names": list(self.action_names),
            "features": [
                {
                    "name": f.name,
                    "kind": f.kind,
                    "gvf_range": list(f.gvf_range),
                    "group": f.group,
                    "activation": f.activation,
                }
                for f in self.features
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvDescriptor":
        feats = tuple(
            FeatureSpec(f["name"], f["kind"], tuple(f["gvf_range"]), f.get("group"), f.get("activation"))
            for f in d["features"]
        )
        return cls(d["name"], d["state_dim"], d["n_actions"], feats, d["beta"], d["gamma"], tuple(d["action_names"]))


@dataclass
class StepOutcome:
    next_state: Any
    reward: float
    features: np.ndarray
    done: bool
    # episode cut by a time limit rather than reaching a terminal state
    truncated: bool = False
    info: dict = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        return self.done and not self.truncated


def activation_policy(features: tuple[FeatureSpec, ...]) -> OutputMap:
    """Sigmoid for GVFs bounded in [0, 1], softmax per exclusive group, linear otherwise."""
    kinds: list[str] = []
    groups: dict[str, list[int]] = {}
    for i, f in enumerate(features):
        if f.activation is not None:
            kinds.append(f.activation)
        elif f.group is not None:
            kinds.append("softmax")
            groups.setdefault(f.group, []).append(i)
        elif f.gvf_range[0] >= 0.0 and f.gvf_range[1] <= 1.0:
            kinds.append("sigmoid")
        else:
            kinds.append("linear")
    return OutputMap(kinds, list(groups.values()))


def check_outcome(desc: EnvDescriptor, out: StepOutcome) -> list[str]:
    """Schema conformance problems of one step (empty list when conforming)."""
    problems = []
    F = np.asarray(out.features)
    if F.shape != (desc.n_features,):
        return [f"feature vector shape {F.shape}, expected ({desc.n_features},)"]
    if not np.all(np.isfinite(F)):
        problems.append("non-finite feature")
    for f, v in zip(desc.features, F):
        if f.kind in ("indicator", "terminal-indicator") and v not in (0.0, 1.0):
            problems.append(f"{f.name}={v} is not an indicator value")
        if f.kind == "terminal-indicator" and v != 0.0 and not out.done:
            problems.append(f"{f.name} set on a non-terminal step")
    return problems


class Env:
    """Stateless environment: states are values passed in and returned."""

    descriptor: EnvDescriptor
    deterministic = False
    tabular = False
    masked = False  # True when action_mask can exclude actions

    @property
    def n_actions(self) -> int:
        return self.descriptor.n_actions

    def reset(self, rng) -> Any:
        raise NotImplementedError

    def step(self, state, action: int, rng) -> StepOutcome:
        raise NotImplementedError

    def observe(self, state) -> np.ndarray:
        raise NotImplementedError

    def action_mask(self, state) -> np.ndarray:
        return np.ones(self.n_actions, dtype=bool)

    def _check_action(self, action) -> int:
        a = int(action)
        if a != action or not 0 <= a < self.n_actions:
            raise InvalidActionError(f"action {action!r} outside 0..{self.n_actions - 1}")
        return a

    def state_to_json(self, state) -> Any:
        return state

    def state_from_json(self, obj) -> Any:
        return obj


def env_reset(env: Env, rng):
    return env.reset(rng)


def env_step(env: Env, state, action: int, rng) -> StepOutcome:
    return env.step(state, action, rng)
