"""MiniToW: an abstract two-lane, wave-based tug of war.

Player 1 is the learning agent; player 2 follows a scripted opponent. Each
wave both players may buy unit-production buildings for one lane, every
building spawns one unit per wave, the armies in each lane fight with a
rock-paper-scissors damage matrix, survivors advance one grid, and units that
reach the far end hit the enemy base. The first base to reach zero HP, or the
lowest base after the last wave, loses the game for its owner.

Bases are indexed ``0: P1 top, 1: P1 bottom, 2: P2 top, 3: P2 bottom`` and
unit types ``0: marine, 1: baneling, 2: immortal``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from esp_rl.envs.base import Env, EnvDescriptor, FeatureSpec, StepOutcome

UNIT_TYPES = ("marine", "baneling", "immortal")
LANES = ("top", "bottom")
BASES = ("p1_top", "p1_bottom", "p2_top", "p2_bottom")
N_GRIDS = 4

ADVANTAGE, NEUTRAL, DISADVANTAGE = 3.0, 1.0, 0.33
# attacker row, target column: marines beat immortals, banelings beat marines, immortals beat banelings
RPS = np.array(
    [
        [NEUTRAL, DISADVANTAGE, ADVANTAGE],
        [ADVANTAGE, NEUTRAL, DISADVANTAGE],
        [DISADVANTAGE, ADVANTAGE, NEUTRAL],
    ]
)
COUNTER = {0: 1, 1: 2, 2: 0}  # type that beats the key type


@dataclass(frozen=True)
class MiniToWConfig:
    n_waves: int = 40
    start_currency: float = 200.0
    income: float = 100.0
    costs: tuple[float, float, float] = (50.0, 75.0, 200.0)
    attack: tuple[float, float, float] = (1.0, 1.5, 4.0)
    hp: tuple[float, float, float] = (1.0, 1.5, 4.0)
    max_buildings_per_wave: int = 10
    base_damage_per_attack: float = 0.01
    combat_noise: float = 0.0  # optional attack multiplier drawn from 1 +/- noise per side and lane


@dataclass
class MiniToWState:
    wave: int
    currency: np.ndarray  # (2,)
    buildings: np.ndarray  # (player, lane, type)
    units: np.ndarray  # (player, lane, grid, type); grids in absolute coordinates, P1 spawns at 0
    hp: np.ndarray  # (4,)
    last_purchase: np.ndarray = field(default_factory=lambda: np.zeros((2, 2, 3)))  # (player, lane, type)
    # HP lost by each base to each attacker type during the wave that produced this state
    last_damage: np.ndarray = field(default_factory=lambda: np.zeros((4, 3)))
    lowest_base: int | None = None  # set once the game is over

    def copy(self) -> "MiniToWState":
        return replace(
            self,
            currency=self.currency.copy(),
            buildings=self.buildings.copy(),
            units=self.units.copy(),
            hp=self.hp.copy(),
            last_purchase=self.last_purchase.copy(),
            last_damage=self.last_damage.copy(),
        )


def enumerate_bundles(cap: int) -> list[tuple[int, tuple[int, int, int]]]:
    """Action table: index 0 buys nothing, then (lane, counts) with 1 <= total <= cap."""
    bundles: list[tuple[int, tuple[int, int, int]]] = [(0, (0, 0, 0))]
    for lane in range(2):
        for counts in itertools.product(range(cap + 1), repeat=3):
            if 1 <= sum(counts) <= cap:
                bundles.append((lane, counts))
    return bundles


def feature_schema() -> tuple[FeatureSpec, ...]:
    feats = [
        FeatureSpec(f"damage_{base}_by_{unit}", "delta", (0.0, 1.0)) for base in BASES for unit in UNIT_TYPES
    ]
    feats += [FeatureSpec(f"lowest_hp_{base}", "terminal-indicator", (0.0, 1.0), group="lowest_base") for base in BASES]
    feats.append(FeatureSpec("reached_last_wave", "terminal-indicator", (0.0, 1.0)))
    return tuple(feats)


def minitow_features(prev_state: MiniToWState, state: MiniToWState, done: bool) -> np.ndarray:
    """17-vector: HP lost this wave per (base, unit type), then the terminal indicators.

    The per-type split is recorded by the wave update in ``state.last_damage``;
    its row sums equal the HP drop from ``prev_state`` to ``state``.
    """
    F = np.zeros(17)
    F[:12] = state.last_damage.reshape(12)
    if done:
        lowest = state.lowest_base if state.lowest_base is not None else int(np.argmin(state.hp))
        F[12 + lowest] = 1.0
        F[16] = 1.0 if state.hp.min() > 0.0 else 0.0
    return F


def _bundle_cost(cfg: MiniToWConfig, counts) -> float:
    return float(np.dot(cfg.costs, counts))


def _spend_on(cfg: MiniToWConfig, currency: float, unit: int) -> int:
    return int(min(cfg.max_buildings_per_wave, currency // cfg.costs[unit]))


def scripted_bundle(name: str, state: MiniToWState, player: int, cfg: MiniToWConfig, rng) -> tuple[int, tuple[int, int, int]]:
    """Purchase of a scripted player: rusher, balanced, turtle or random."""
    cash = float(state.currency[player])
    other = 1 - player
    if name == "rusher":
        n = _spend_on(cfg, cash, 0)
        return (1, (n, 0, 0))
    if name == "balanced":
        lane = state.wave % 2
        seen = state.last_purchase[other].sum(axis=0)
        unit = COUNTER[int(np.argmax(seen))] if seen.sum() > 0 else 0
        counts = [0, 0, 0]
        counts[unit] = _spend_on(cfg, cash, unit)
        return (lane, tuple(counts))
    if name == "turtle":
        if cash < 600.0:
            return (0, (0, 0, 0))
        lane = int(np.argmax(state.buildings[other].sum(axis=1)))
        n_imm = min(cfg.max_buildings_per_wave, int(cash // (2 * cfg.costs[2])))
        rest = cash - n_imm * cfg.costs[2]
        n_mar = min(cfg.max_buildings_per_wave - n_imm, int(rest // cfg.costs[0]))
        return (lane, (n_mar, 0, n_imm))
    if name == "random":
        lane = int(rng.integers(2))
        unit = int(rng.integers(3))
        counts = [0, 0, 0]
        counts[unit] = int(rng.integers(0, _spend_on(cfg, cash, unit) + 1))
        return (lane, tuple(counts))
    raise ValueError(f"unknown scripted opponent {name!r}")


OPPONENTS = ("rusher", "balanced", "turtle", "random")


class MiniToW(Env):
    masked = True

    def __init__(
        self,
        opponent: str = "rusher",
        config: MiniToWConfig | None = None,
        beta: float = 0.9999,
        gamma: float = 0.9999,
    ):
        if opponent not in OPPONENTS:
            raise ValueError(f"unknown opponent {opponent!r}; known: {OPPONENTS}")
        self.opponent = opponent
        self.cfg = config or MiniToWConfig()
        self.bundles = enumerate_bundles(self.cfg.max_buildings_per_wave)
        self._bundle_index = {b: i for i, b in enumerate(self.bundles)}
        self._bundle_costs = np.array([_bundle_cost(self.cfg, c) for _, c in self.bundles])
        names = tuple(
            "save" if i == 0 else f"{LANES[lane]}:" + "+".join(f"{n}{UNIT_TYPES[t][0]}" for t, n in enumerate(c) if n)
            for i, (lane, c) in enumerate(self.bundles)
        )
        self.descriptor = EnvDescriptor(
            name=f"minitow:{opponent}" if opponent != "rusher" else "minitow",
            state_dim=78,
            n_actions=len(self.bundles),
            features=feature_schema(),
            beta=beta,
            gamma=gamma,
            action_names=names,
        )

    def reset(self, rng=None) -> MiniToWState:
        return MiniToWState(
            wave=0,
            currency=np.full(2, self.cfg.start_currency),
            buildings=np.zeros((2, 2, 3)),
            units=np.zeros((2, 2, N_GRIDS, 3)),
            hp=np.ones(4),
        )

    def action_mask(self, state: MiniToWState) -> np.ndarray:
        return self._bundle_costs <= state.currency[0] + 1e-9

    def bundle_to_action(self, bundle) -> int:
        lane, counts = bundle
        if sum(counts) == 0:
            return 0
        return self._bundle_index[(lane, tuple(int(c) for c in counts))]

    def opponent_action(self, state: MiniToWState, rng) -> tuple[int, tuple[int, int, int]]:
        return scripted_bundle(self.opponent, state, 1, self.cfg, rng)

    def step(self, state: MiniToWState, action: int, rng) -> StepOutcome:
        a = self._check_action(action)
        if self._bundle_costs[a] > state.currency[0] + 1e-9:
            raise ValueError(f"action {a} costs more than the available currency")
        p2 = self.opponent_action(state, rng)
        return self.play_wave(state, [self.bundles[a], p2], rng)

    def play_wave(self, state: MiniToWState, bundles, rng) -> StepOutcome:
        """Advance one wave given both players' purchases."""
        cfg = self.cfg
        s = state.copy()
        s.last_purchase[:] = 0.0
        s.lowest_base = None
        for player, (lane, counts) in enumerate(bundles):
            counts = np.asarray(counts, dtype=float)
            cost = float(np.dot(cfg.costs, counts))
            if cost > s.currency[player] + 1e-9 or counts.sum() > cfg.max_buildings_per_wave:
                counts = np.zeros(3)
                cost = 0.0
            s.currency[player] -= cost
            s.buildings[player, lane] += counts
            s.last_purchase[player, lane] = counts
        # spawn at each player's home grid
        s.units[0, :, 0, :] += s.buildings[0]
        s.units[1, :, N_GRIDS - 1, :] += s.buildings[1]

        atk = np.asarray(cfg.attack)
        hp_unit = np.asarray(cfg.hp)
        noise = rng.uniform(1.0 - cfg.combat_noise, 1.0 + cfg.combat_noise, size=(2, 2)) if cfg.combat_noise else np.ones((2, 2))
        for lane in range(2):
            totals = s.units[:, lane].sum(axis=1)  # (player, type)
            losses = np.zeros((2, 3))
            for p in range(2):
                enemy = totals[1 - p]
                if enemy.sum() <= 0 or totals[p].sum() <= 0:
                    continue
                share = enemy / enemy.sum()
                dmg = (totals[p] * atk) @ RPS * share * noise[p, lane]  # damage received by each enemy type
                losses[1 - p] = np.minimum(enemy, dmg / hp_unit)
            for p in range(2):
                with np.errstate(invalid="ignore", divide="ignore"):
                    keep = np.where(totals[p] > 0, 1.0 - losses[p] / totals[p], 0.0)
                s.units[p, lane] *= keep
                s.units[p, lane][s.units[p, lane] < 1e-9] = 0.0

        damage = np.zeros((4, 3))  # (base, attacker type)
        for lane in range(2):
            # P1 units at the far grid hit P2's base in this lane, and vice versa
            for p, grid, base in ((0, N_GRIDS - 1, 2 + lane), (1, 0, lane)):
                arrived = s.units[p, lane, grid].copy()
                s.units[p, lane, grid] = 0.0
                raw = arrived * atk * cfg.base_damage_per_attack
                total = raw.sum()
                if total <= 0:
                    continue
                dealt = min(total, s.hp[base])
                damage[base] = raw * (dealt / total)
                s.hp[base] -= dealt
        # survivors advance one grid toward the enemy
        s.units[0, :, 1:] = s.units[0, :, :-1].copy()
        s.units[0, :, 0] = 0.0
        s.units[1, :, :-1] = s.units[1, :, 1:].copy()
        s.units[1, :, N_GRIDS - 1] = 0.0
        s.hp = np.maximum(s.hp, 0.0)
        s.currency += cfg.income
        s.wave += 1

        s.last_damage = damage
        done = bool(s.hp.min() <= 0.0 or s.wave >= cfg.n_waves)
        reward = 0.0
        winner = None
        if done:
            tied = np.flatnonzero(s.hp <= s.hp.min() + 1e-9)
            s.lowest_base = int(tied[0] if len(tied) == 1 else rng.choice(tied))
            winner = 1 if s.lowest_base < 2 else 0
            reward = 1.0 if winner == 0 else 0.0
        F = minitow_features(state, s, done)
        return StepOutcome(s, reward, F, done, False, {"winner": winner, "lowest_base": s.lowest_base})

    def observe(self, s: MiniToWState) -> np.ndarray:
        return np.concatenate(
            [
                [s.wave / self.cfg.n_waves, s.currency[0] / 1000.0],
                s.buildings[0].reshape(6) / 10.0,
                s.buildings[1].reshape(6) / 10.0,
                s.units.reshape(48) / 10.0,
                s.hp,
                s.last_purchase.reshape(12) / 10.0,  # the balanced opponent reacts to it
            ]
        )

    def state_to_json(self, s: MiniToWState):
        return {
            "wave": s.wave,
            "currency": s.currency.tolist(),
            "buildings": s.buildings.tolist(),
            "units": s.units.tolist(),
            "hp": s.hp.tolist(),
            "last_purchase": s.last_purchase.tolist(),
            "last_damage": s.last_damage.tolist(),
            "lowest_base": s.lowest_base,
        }

    def state_from_json(self, obj) -> MiniToWState:
        return MiniToWState(
            int(obj["wave"]),
            np.array(obj["currency"], dtype=float),
            np.array(obj["buildings"], dtype=float),
            np.array(obj["units"], dtype=float),
            np.array(obj["hp"], dtype=float),
            np.array(obj.get("last_purchase", np.zeros((2, 2, 3))), dtype=float),
            np.array(obj.get("last_damage", np.zeros((4, 3))), dtype=float),
            obj.get("lowest_base"),
        )
