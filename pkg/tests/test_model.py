import numpy as np
import pytest

from esp_rl.envs import activation_policy, make_env
from esp_rl.model import (
    EspModel,
    MaskError,
    build_esp_model,
    build_qnet_model,
    load_model,
    masked_argmax,
    save_model,
)
from esp_rl.nn import Layer, MlpParams, OutputMap, ShapeError
from esp_rl.rng import Rng


def zero_final_layer(net: MlpParams) -> None:
    net.layers[-1].W[:] = 0.0
    net.layers[-1].b[:] = 0.0


def linear_combiner(w, bias=0.0) -> MlpParams:
    w = np.asarray(w, dtype=float)
    return MlpParams([Layer(w[:, None].copy(), np.array([float(bias)]), "output")], OutputMap.uniform("linear", 1))


@pytest.fixture
def tow_model():
    env = make_env("minitow", max_buildings_per_wave=3)
    return env, build_esp_model(env.descriptor, Rng(0), (16,), (8,))


def test_zero_final_layer_gives_activation_midpoints(tow_model):
    env, m = tow_model
    zero_final_layer(m.gvf_net)
    g = m.gvf_predict(env.observe(env.reset()), 1)
    # 12 damage features and the last-wave flag are sigmoid, 4 lowest-base are a softmax group
    assert np.all(g[:12] == 0.5) and g[16] == 0.5
    np.testing.assert_allclose(g[12:16], 0.25)


def test_linear_outputs_zero_with_zero_final_layer():
    env = make_env("cartpole:delta")
    m = build_esp_model(env.descriptor, Rng(1), (8,), (8,))
    zero_final_layer(m.gvf_net)
    g = m.gvf_all(env.observe(env.reset(Rng(2))))
    kinds = activation_policy(env.descriptor.features).kinds
    linear = [i for i, k in enumerate(kinds) if k == "linear"]
    assert linear and np.all(g[:, linear] == 0.0)


def test_softmax_group_sums_to_one_every_action(tow_model):
    env, m = tow_model
    rng = Rng(3)
    obs = rng.normal(size=(20, env.descriptor.state_dim))
    g = m.gvf_all(obs)
    np.testing.assert_allclose(g[..., 12:16].sum(axis=-1), 1.0, atol=1e-12)
    assert np.all((g[..., :12] > 0) & (g[..., :12] < 1))


def test_q_value_is_combine_of_gvf_bit_exact():
    env = make_env("cartpole")
    m = build_esp_model(env.descriptor, Rng(4))
    rng = Rng(5)
    for _ in range(20):
        obs = rng.normal(size=4)
        q_all = m.q_values(obs)
        for a in range(2):
            assert m.q_value(obs, a) == m.combine(m.gvf_predict(obs, a))
            # the batched path may differ in the last bit (BLAS blocking)
            assert q_all[a] == pytest.approx(m.q_value(obs, a), rel=1e-12, abs=1e-15)


def test_linear_combiner_is_dot_product():
    env = make_env("cartpole")
    d = env.descriptor
    w = np.arange(1.0, d.n_features + 1)
    m = EspModel(d, build_esp_model(d, Rng(0)).gvf_net, linear_combiner(w))
    obs = np.array([0.01, 0.02, -0.03, 0.04])
    g = m.gvf_predict(obs, 0)
    assert m.q_value(obs, 0) == pytest.approx(float(w @ g), rel=1e-14)
    g1, g2 = Rng(1).uniform(size=d.n_features), Rng(2).uniform(size=d.n_features)
    zero = np.zeros(d.n_features)
    assert m.combine(g1) + m.combine(g2) - m.combine(zero) == pytest.approx(m.combine(g1 + g2), abs=1e-12)


def test_zero_weight_combiner_returns_bias():
    env = make_env("cartpole")
    d = env.descriptor
    m = EspModel(d, build_esp_model(d, Rng(0)).gvf_net, linear_combiner(np.zeros(d.n_features), 0.7))
    for g in Rng(9).uniform(-5, 5, size=(5, d.n_features)):
        assert m.combine(g) == 0.7


def test_combine_length_mismatch():
    env = make_env("cartpole")
    m = build_esp_model(env.descriptor, Rng(0))
    with pytest.raises(ShapeError):
        m.combine(np.zeros(3))


def test_gvf_predict_rejects_bad_action():
    env = make_env("cartpole")
    m = build_esp_model(env.descriptor, Rng(0))
    with pytest.raises(ValueError):
        m.gvf_predict(np.zeros(4), 2)


def test_schema_mismatch_rejected():
    a = make_env("cartpole").descriptor
    b = make_env("cartpole:delta").descriptor
    m = build_esp_model(a, Rng(0))
    with pytest.raises(ShapeError):
        EspModel(b, m.gvf_net, m.combiner_net)


def test_masked_argmax_rules():
    assert masked_argmax(np.array([1.0, 0.5])) == 0
    assert masked_argmax(np.array([0.3, 0.9, 0.9])) == 1
    assert masked_argmax(np.array([5.0, 0.1, 0.2]), np.array([False, True, True])) == 2
    with pytest.raises(MaskError):
        masked_argmax(np.array([1.0, 2.0]), np.array([False, False]))


def test_bias_shift_keeps_greedy_actions():
    env = make_env("cartpole")
    m = build_esp_model(env.descriptor, Rng(6))
    obs = Rng(7).normal(scale=0.1, size=(200, 4))
    before = [m.greedy_action(o) for o in obs]
    shifted = m.copy()
    shifted.combiner_net.layers[-1].b += 12.5
    assert [shifted.greedy_action(o) for o in obs] == before


def test_masked_action_never_greedy(tow_model):
    env, m = tow_model
    s = env.reset()
    s.currency[0] = 60.0  # only saving or one marine
    mask = env.action_mask(s)
    obs = env.observe(s)
    assert m.greedy_action(obs, mask) in np.flatnonzero(mask)
    # masking the unmasked winner moves the choice elsewhere
    best = m.greedy_action(obs)
    mask = np.ones(env.n_actions, dtype=bool)
    mask[best] = False
    assert m.greedy_action(obs, mask) != best


def test_vanilla_has_fewer_parameters():
    d = make_env("cartpole").descriptor
    assert build_qnet_model(d, Rng(0)).n_params() < build_esp_model(d, Rng(0)).n_params()


def test_checkpoint_round_trip(tmp_path):
    env = make_env("minitow:balanced", max_buildings_per_wave=2)
    m = build_esp_model(env.descriptor, Rng(8), (8,), (8,))
    save_model(tmp_path / "m.json", m, {"episode": 3})
    back, payload = load_model(tmp_path / "m.json")
    obs = Rng(9).normal(size=(4, env.descriptor.state_dim))
    assert np.array_equal(back.q_values(obs), m.q_values(obs))
    assert np.array_equal(back.combiner_scale, m.combiner_scale)
    assert payload["episode"] == 3 and back.descriptor == m.descriptor
