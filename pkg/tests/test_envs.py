import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esp_rl.envs import (
    KNOWN_ENVS,
    CartPole,
    InvalidActionError,
    UnsupportedError,
    activation_policy,
    cartpole_features,
    check_outcome,
    dump_trajectory,
    enumerate_mdp,
    load_trajectory,
    make_env,
    minitow_features,
)
from esp_rl.envs.cartpole import CartPoleState
from esp_rl.envs.gridworld import GridWorldSpec
from esp_rl.envs.minitow import MiniToW, MiniToWConfig, scripted_bundle
from esp_rl.rng import Rng


def rollout(env, seed, policy=None, limit=10_000):
    rng = Rng(seed)
    s = env.reset(rng)
    steps = []
    for _ in range(limit):
        mask = env.action_mask(s)
        if policy is None:
            a = int(rng.choice(np.flatnonzero(mask)))
        else:
            a = policy(s)
        out = env.step(s, a, rng)
        steps.append((s, a, out))
        if out.done:
            break
        s = out.next_state
    return steps


@pytest.mark.parametrize("name", KNOWN_ENVS)
def test_registry_builds_every_env(name):
    env = make_env(name)
    assert env.descriptor.n_features == len(env.descriptor.features)
    activation_policy(env.descriptor.features)


def test_unknown_env():
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("lunarlander")


@pytest.mark.parametrize("name", ["cartpole", "cartpole:delta", "gridworld:slip", "minitow"])
def test_schema_conformance_and_determinism(name):
    env = make_env(name)
    a = rollout(env, 5)
    b = rollout(env, 5)
    for (s1, a1, o1), (s2, a2, o2) in zip(a, b):
        assert a1 == a2
        assert np.array_equal(o1.features, o2.features)
        assert o1.reward == o2.reward
        assert check_outcome(env.descriptor, o1) == []
    assert len(a) == len(b)


def test_invalid_action():
    env = make_env("gridworld:3x3")
    with pytest.raises(InvalidActionError):
        env.step(env.reset(), 4, Rng(0))


def test_gridworld_start_and_move():
    env = make_env("gridworld:3x3")
    s = env.reset(Rng(0))
    assert env.cell(s[0]) == (0, 2)
    out = env.step(s, 1, Rng(0))
    assert env.cell(out.next_state[0]) == (1, 2)
    # features describe the cell left behind
    assert list(out.features) == [1.0, 0.0, 0.0, 0.0, 0.0]
    assert out.reward == 0.0 and not out.done


def test_gridworld_move_right_from_origin():
    spec = GridWorldSpec(2, 2, (0, 0), {(1, 1): (1.0, "goal")}, {"top": [(0, 0), (1, 0)]})
    from esp_rl.envs.gridworld import GridWorld

    env = GridWorld(spec)
    out = env.step(env.reset(), 1, Rng(0))
    assert env.cell(out.next_state[0]) == (1, 0)
    assert list(out.features) == [1.0, 0.0, 0.0]


def test_gridworld_spec_validation():
    with pytest.raises(ValueError):
        GridWorldSpec(2, 1, (0, 0), {})
    with pytest.raises(ValueError):
        GridWorldSpec(2, 1, (0, 0), {(1, 0): (1.0, "goal")}, slip=1.0)


def test_enumerate_corridor():
    mdp = enumerate_mdp(make_env("gridworld:corridor"))
    assert mdp.n_states == 2
    assert set(np.unique(mdp.T)) <= {0.0, 1.0}
    assert mdp.T[0, 1, 1] == 1.0 and mdp.T[0, 3, 0] == 1.0
    assert mdp.terminal.tolist() == [False, True]


def test_enumerate_slip_rows():
    env = make_env("gridworld:slip")
    mdp = enumerate_mdp(env)
    assert np.allclose(mdp.T.sum(axis=2), 1.0, atol=1e-12)
    # from the centre every move is distinct: 0.8 intended, 0.1 per lateral slip
    c = env.cell_index((1, 1))
    assert mdp.T[c, 0, env.cell_index((1, 0))] == pytest.approx(0.8)
    assert mdp.T[c, 0, env.cell_index((2, 1))] == pytest.approx(0.1)
    assert mdp.T[c, 0, env.cell_index((0, 1))] == pytest.approx(0.1)


def test_enumerate_unsupported():
    with pytest.raises(UnsupportedError):
        enumerate_mdp(make_env("cartpole"))


def test_cartpole_reset_range():
    env = CartPole()
    for seed in range(20):
        s = env.reset(Rng(seed))
        assert all(-0.05 <= v <= 0.05 for v in s[:4])


def test_cartpole_terminal_and_reward():
    env = CartPole(encoding="delta")
    s = CartPoleState(2.39, 1.0, 0.0, 0.0, 10)
    out = env.step(s, 1)
    assert out.done and out.terminal and out.reward == 0.0
    assert list(out.features[8:]) == [0.0, 1.0, 0.0, 0.0]
    out = env.step(CartPoleState(0.0, 0.0, 0.0, 0.0, 0), 1)
    assert out.reward == 1.0 and not out.done


def test_cartpole_truncates_at_500():
    env = CartPole()
    out = env.step(CartPoleState(0.0, 0.0, 0.0, 0.0, 499), 0)
    assert out.done and out.truncated and not out.terminal and out.reward == 1.0


def test_cartpole_discrete_centered_all_safe():
    s = CartPoleState(0.0, 0.0, 0.0, 0.0)
    assert cartpole_features(s, 0, s, False, "discrete").tolist() == [1.0] * 8


def test_cartpole_delta_direction():
    s = CartPoleState(0.0, 0.0, 0.0, 0.0)
    n = CartPoleState(0.01, 0.0, 0.0, 0.0)
    f = cartpole_features(s, 1, n, False, "delta")
    assert f[1] == 0.01 and f[0] == 0.0


def test_cartpole_always_right_regression():
    env = CartPole()
    steps = rollout(env, 0, policy=lambda s: 1)
    assert len(steps) == len(rollout(env, 0, policy=lambda s: 1))
    assert 5 < len(steps) < 30
    assert steps[-1][2].terminal


@pytest.mark.parametrize("seed", range(5))
def test_cartpole_delta_telescoping(seed):
    env = CartPole(encoding="delta")
    steps = rollout(env, seed)
    total = sum(out.features[:8] for _, _, out in steps)
    first, last = steps[0][0], steps[-1][2].next_state
    for i in range(4):
        assert total[2 * i] + total[2 * i + 1] == pytest.approx(last[i] - first[i], abs=1e-12)


def test_minitow_reset():
    env = MiniToW(config=MiniToWConfig(start_currency=300.0))
    s = env.reset(Rng(0))
    assert s.wave == 0 and s.hp.tolist() == [1.0] * 4 and s.currency.tolist() == [300.0, 300.0]


def test_minitow_baneling_beats_marine():
    env = MiniToW()
    s = env.reset(Rng(0))
    out = env.play_wave(s, [(0, (0, 1, 0)), (0, (1, 0, 0))], Rng(0))
    u = out.next_state.units
    # baneling hits the marine for 1.5 * 3.0 >= its 1.0 HP; the marine returns 0.33 of a 1.5 HP baneling
    assert u[1, 0].sum() == 0.0
    assert u[0, 0, 1, 1] == pytest.approx(1.0 - 0.33 / 1.5)


def test_minitow_single_marine_hits_bottom_base():
    env = MiniToW()
    s = env.reset(Rng(0))
    rng = Rng(0)
    out = env.play_wave(s, [(0, (0, 0, 0)), (1, (1, 0, 0))], rng)
    for _ in range(2):
        out = env.play_wave(out.next_state, [(0, (0, 0, 0)), (0, (0, 0, 0))], rng)
        assert not out.features[:12].any()
    prev = out.next_state
    out = env.play_wave(prev, [(0, (0, 0, 0)), (0, (0, 0, 0))], rng)
    nz = np.flatnonzero(out.features[:12])
    assert nz.tolist() == [1 * 3 + 0]
    assert out.features[3] == pytest.approx(0.01)
    assert prev.hp[1] - out.next_state.hp[1] == pytest.approx(0.01)


def test_minitow_no_units_no_damage():
    env = MiniToW()
    s = env.reset(Rng(0))
    out = env.step(s, 0, Rng(0))
    assert not out.features.any()


def test_minitow_wave_40_terminal_features():
    env = MiniToW()
    s = env.reset(Rng(0))
    s.wave = 39
    s.hp = np.array([0.5, 0.9, 0.8, 0.7])
    out = env.play_wave(s, [(0, (0, 0, 0)), (0, (0, 0, 0))], Rng(0))
    assert out.done and out.reward == 0.0
    assert out.features[12:].tolist() == [1.0, 0.0, 0.0, 0.0, 1.0]
    assert np.array_equal(minitow_features(s, out.next_state, True), out.features)


def test_minitow_mask_affordability():
    env = MiniToW()
    s = env.reset(Rng(0))
    mask = env.action_mask(s)
    assert mask[0]
    assert mask[env.bundle_to_action((0, (4, 0, 0)))]
    assert not mask[env.bundle_to_action((0, (5, 0, 0)))]
    with pytest.raises(ValueError):
        env.step(s, env.bundle_to_action((1, (0, 0, 2))), Rng(0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["rusher", "balanced", "turtle", "random"]))
def test_minitow_zero_sum_and_monotone_hp(seed, opponent):
    env = MiniToW(opponent=opponent)
    steps = rollout(env, seed)
    for s, _, out in steps:
        assert np.all(out.next_state.hp <= s.hp + 1e-15)
        assert np.all(out.next_state.currency >= 0)
        assert np.allclose(out.features[:12].reshape(4, 3).sum(axis=1), s.hp - out.next_state.hp, atol=1e-12)
    last = steps[-1][2]
    assert last.done and last.info["winner"] in (0, 1)
    assert last.features[12:16].sum() == 1.0
    assert last.reward == (1.0 if last.info["winner"] == 0 else 0.0)


def test_minitow_mirror_is_fair():
    env = MiniToW(opponent="balanced")
    wins = []
    for seed in range(40):
        rng = Rng(seed)
        s = env.reset(rng)
        while True:
            a = env.bundle_to_action(scripted_bundle("balanced", s, 0, env.cfg, rng))
            out = env.step(s, a, rng)
            s = out.next_state
            if out.done:
                wins.append(out.reward)
                break
    assert 0.25 <= np.mean(wins) <= 0.75


def test_trajectory_roundtrip(tmp_path):
    for name in ("cartpole:delta", "gridworld:3x3", "minitow"):
        env = make_env(name)
        steps = rollout(env, 1, limit=20)
        path = tmp_path / f"{name.replace(':', '_')}.jsonl"
        dump_trajectory(env, path, steps)
        lines = path.read_text().splitlines()
        assert len(lines) == len(steps)
        json.loads(lines[0])
        back = load_trajectory(env, path)
        assert np.array_equal(back[-1][2].features, steps[-1][2].features)


def test_activation_policy_minitow():
    om = activation_policy(make_env("minitow").descriptor.features)
    assert om.kinds[:12] == ["sigmoid"] * 12
    assert om.kinds[12:16] == ["softmax"] * 4
    assert om.kinds[16] == "sigmoid"
    assert math.isfinite(om.forward(np.zeros((1, 17))).sum())
