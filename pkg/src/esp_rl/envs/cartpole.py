"""Cart-pole balancing with the classic control constants and Euler integration.

Two GVF feature encodings are available:

``discrete``
    8 safe-region indicators evaluated on the state reached: for each of cart
    position, cart velocity, pole angle and pole angular velocity, one
    indicator for "not beyond the left limit" and one for "not beyond the right
    limit". A balanced, centered system has all eight set.
``delta``
    8 signed per-step changes (the positive part as ``*_right_delta`` and the
    negative part as ``*_left_delta`` of each variable) plus 4 terminal
    indicators for how the episode failed.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from esp_rl.envs.base import EnvDescriptor, Env, FeatureSpec, StepOutcome

GRAVITY = 9.8
MASS_CART = 1.0
MASS_POLE = 0.1
TOTAL_MASS = MASS_CART + MASS_POLE
HALF_LENGTH = 0.5
POLEMASS_LENGTH = MASS_POLE * HALF_LENGTH
FORCE_MAG = 10.0
TAU = 0.02
X_LIMIT = 2.4
THETA_LIMIT = 12 * 2 * math.pi / 360
MAX_STEPS = 500

VARIABLES = ("cart_pos", "cart_vel", "pole_angle", "pole_vel")
# safe-region half widths for the discrete encoding
SAFE_LIMITS = (1.2, 1.0, 6 * 2 * math.pi / 360, 1.0)
TERMINAL_NAMES = ("out_left", "out_right", "fell_left", "fell_right")


class CartPoleState(NamedTuple):
    x: float
    x_dot: float
    theta: float
    theta_dot: float
    t: int = 0


def physics_step(s: CartPoleState, action: int) -> CartPoleState:
    force = FORCE_MAG if action == 1 else -FORCE_MAG
    cos_t = math.cos(s.theta)
    sin_t = math.sin(s.theta)
    temp = (force + POLEMASS_LENGTH * s.theta_dot**2 * sin_t) / TOTAL_MASS
    theta_acc = (GRAVITY * sin_t - cos_t * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos_t**2 / TOTAL_MASS)
    )
    x_acc = temp - POLEMASS_LENGTH * theta_acc * cos_t / TOTAL_MASS
    return CartPoleState(
        s.x + TAU * s.x_dot,
        s.x_dot + TAU * x_acc,
        s.theta + TAU * s.theta_dot,
        s.theta_dot + TAU * theta_acc,
        s.t + 1,
    )


def failed(s: CartPoleState) -> bool:
    return abs(s.x) > X_LIMIT or abs(s.theta) > THETA_LIMIT


def feature_schema(encoding: str, gamma: float) -> tuple[FeatureSpec, ...]:
    horizon = 1.0 / (1.0 - gamma)
    if encoding == "discrete":
        return tuple(
            FeatureSpec(f"{v}_{side}_safe", "indicator", (0.0, horizon))
            for v in VARIABLES
            for side in ("left", "right")
        )
    if encoding == "delta":
        deltas = tuple(
            FeatureSpec(f"{v}_{side}_delta", "delta", (-math.inf, math.inf))
            for v in VARIABLES
            for side in ("left", "right")
        )
        # the four failure modes can co-occur, so no softmax group
        terms = tuple(FeatureSpec(n, "terminal-indicator", (0.0, 1.0), activation="linear") for n in TERMINAL_NAMES)
        return deltas + terms
    raise ValueError(f"unknown cartpole encoding {encoding!r}")


def cartpole_features(
    state: CartPoleState, action: int, next_state: CartPoleState, done: bool, encoding: str
) -> np.ndarray:
    if encoding == "discrete":
        out = []
        for v, lim in zip(next_state[:4], SAFE_LIMITS):
            out += [1.0 if v >= -lim else 0.0, 1.0 if v <= lim else 0.0]
        return np.array(out)
    out = []
    for before, after in zip(state[:4], next_state[:4]):
        d = after - before
        out += [min(d, 0.0), max(d, 0.0)]
    term = [0.0] * 4
    if done:
        if next_state.x < -X_LIMIT:
            term[0] = 1.0
        elif next_state.x > X_LIMIT:
            term[1] = 1.0
        if next_state.theta < -THETA_LIMIT:
            term[2] = 1.0
        elif next_state.theta > THETA_LIMIT:
            term[3] = 1.0
    return np.array(out + term)


class CartPole(Env):
    deterministic = True  # dynamics are deterministic; only reset is random

    def __init__(self, encoding: str = "discrete", beta: float = 0.99, gamma: float = 0.99, max_steps: int = MAX_STEPS):
        self.encoding = encoding
        self.max_steps = max_steps
        self.descriptor = EnvDescriptor(
            name="cartpole" if encoding == "discrete" else f"cartpole:{encoding}",
            state_dim=4,
            n_actions=2,
            features=feature_schema(encoding, gamma),
            beta=beta,
            gamma=gamma,
            action_names=("push_left", "push_right"),
        )

    def reset(self, rng) -> CartPoleState:
        x, xd, th, thd = rng.uniform(-0.05, 0.05, size=4)
        return CartPoleState(float(x), float(xd), float(th), float(thd), 0)

    def step(self, state: CartPoleState, action: int, rng=None) -> StepOutcome:
        a = self._check_action(action)
        nxt = physics_step(state, a)
        terminal = failed(nxt)
        truncated = not terminal and nxt.t >= self.max_steps
        feats = cartpole_features(state, a, nxt, terminal, self.encoding)
        return StepOutcome(nxt, 0.0 if terminal else 1.0, feats, terminal or truncated, truncated)

    def observe(self, state: CartPoleState) -> np.ndarray:
        return np.array(state[:4], dtype=np.float64)

    def state_to_json(self, state):
        return list(state[:4]) + [int(state.t)]

    def state_from_json(self, obj):
        return CartPoleState(float(obj[0]), float(obj[1]), float(obj[2]), float(obj[3]), int(obj[4]) if len(obj) > 4 else 0)
