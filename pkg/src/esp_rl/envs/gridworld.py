"""Tabular grid worlds with slip, terminal cells and region-indicator features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from esp_rl.envs.base import Env, EnvDescriptor, FeatureSpec, StepOutcome

# (dx, dy); "up" decreases the row index
MOVES = {0: (0, -1), 1: (1, 0), 2: (0, 1), 3: (-1, 0)}
ACTION_NAMES = ("up", "right", "down", "left")
LATERAL = {0: (1, 3), 1: (0, 2), 2: (1, 3), 3: (0, 2)}


@dataclass
class GridWorldSpec:
    width: int
    height: int
    start: tuple[int, int]
    # cell -> (reward on entry, "goal" | "failure")
    terminals: dict[tuple[int, int], tuple[float, str]]
    # region name -> member cells; the indicator reflects the cell being left
    regions: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    slip: float = 0.0
    step_reward: float = 0.0
    max_steps: int = 200

    def __post_init__(self):
        if not self.terminals:
            raise ValueError("grid world needs at least one terminal cell")
        if not 0.0 <= self.slip < 1.0:
            raise ValueError("slip probability must lie in [0, 1)")
        for (x, y), (_, kind) in self.terminals.items():
            if kind not in ("goal", "failure"):
                raise ValueError(f"terminal kind {kind!r}")
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"terminal cell {(x, y)} outside the grid")


PRESETS = {
    "corridor": lambda: GridWorldSpec(2, 1, (0, 0), {(1, 0): (1.0, "goal")}, {"start_cell": [(0, 0)]}),
    "3x3": lambda: GridWorldSpec(
        3,
        3,
        (0, 2),
        {(2, 0): (1.0, "goal"), (2, 2): (-1.0, "failure")},
        {"left_column": [(0, 0), (0, 1), (0, 2)], "middle_column": [(1, 0), (1, 1), (1, 2)], "hazard_edge": [(2, 1)]},
    ),
    "slip": lambda: GridWorldSpec(
        3,
        3,
        (0, 2),
        {(2, 0): (1.0, "goal"), (2, 2): (-1.0, "failure")},
        {"left_column": [(0, 0), (0, 1), (0, 2)], "middle_column": [(1, 0), (1, 1), (1, 2)], "hazard_edge": [(2, 1)]},
        slip=0.2,
    ),
}


class GridWorld(Env):
    tabular = True

    def __init__(self, spec: GridWorldSpec, beta: float = 0.9, gamma: float = 0.9, name: str = "gridworld"):
        self.spec = spec
        self.deterministic = spec.slip == 0.0
        self.n_cells = spec.width * spec.height
        self.region_names = list(spec.regions)
        self._region_of = np.zeros((self.n_cells, len(self.region_names)))
        for j, r in enumerate(self.region_names):
            for cell in spec.regions[r]:
                self._region_of[self.cell_index(cell), j] = 1.0
        self._terminal = {self.cell_index(c): v for c, v in spec.terminals.items()}
        horizon = 1.0 / (1.0 - gamma)
        feats = tuple(FeatureSpec(f"region_{r}", "indicator", (0.0, horizon), activation="linear") for r in self.region_names)
        feats += (
            FeatureSpec("goal", "terminal-indicator", (0.0, 1.0), activation="linear"),
            FeatureSpec("failure", "terminal-indicator", (0.0, 1.0), activation="linear"),
        )
        self.descriptor = EnvDescriptor(name, self.n_cells, 4, feats, beta, gamma, ACTION_NAMES)

    def cell_index(self, cell: tuple[int, int]) -> int:
        x, y = cell
        return y * self.spec.width + x

    def cell(self, index: int) -> tuple[int, int]:
        return index % self.spec.width, index // self.spec.width

    def is_terminal(self, index: int) -> bool:
        return index in self._terminal

    def _move(self, index: int, direction: int) -> int:
        x, y = self.cell(index)
        dx, dy = MOVES[direction]
        nx, ny = x + dx, y + dy
        if 0 <= nx < self.spec.width and 0 <= ny < self.spec.height:
            return self.cell_index((nx, ny))
        return index

    def successors(self, index: int, action: int) -> list[tuple[int, float]]:
        """(next cell, probability) pairs, merged when moves coincide."""
        out: dict[int, float] = {}
        slip = self.spec.slip
        out[self._move(index, action)] = 1.0 - slip
        if slip > 0:
            for lat in LATERAL[action]:
                nxt = self._move(index, lat)
                out[nxt] = out.get(nxt, 0.0) + slip / 2
        return list(out.items())

    def _outcome_values(self, index: int, nxt: int) -> tuple[float, np.ndarray]:
        reward = self.spec.step_reward
        term = [0.0, 0.0]
        if nxt in self._terminal:
            r, kind = self._terminal[nxt]
            reward += r
            term[0 if kind == "goal" else 1] = 1.0
        return reward, np.concatenate([self._region_of[index], term])

    def reset(self, rng=None) -> tuple[int, int]:
        return (self.cell_index(self.spec.start), 0)

    def step(self, state, action: int, rng) -> StepOutcome:
        a = self._check_action(action)
        index, t = state
        if self.is_terminal(index):
            raise ValueError("cannot step from a terminal cell")
        succ = self.successors(index, a)
        if len(succ) == 1:
            nxt = succ[0][0]
        else:
            u = rng.random()
            acc = 0.0
            nxt = succ[-1][0]
            for cell, p in succ:
                acc += p
                if u < acc:
                    nxt = cell
                    break
        reward, feats = self._outcome_values(index, nxt)
        terminal = nxt in self._terminal
        truncated = not terminal and t + 1 >= self.spec.max_steps
        return StepOutcome((nxt, t + 1), reward, feats, terminal or truncated, truncated)

    def observe(self, state) -> np.ndarray:
        v = np.zeros(self.n_cells)
        v[state[0]] = 1.0
        return v

    def state_to_json(self, state):
        return [int(state[0]), int(state[1])]

    def state_from_json(self, obj):
        return (int(obj[0]), int(obj[1]) if len(obj) > 1 else 0)


def make_gridworld(preset: str, beta: float = 0.9, gamma: float = 0.9) -> GridWorld:
    if preset not in PRESETS:
        raise KeyError(preset)
    return GridWorld(PRESETS[preset](), beta, gamma, name=f"gridworld:{preset}")
