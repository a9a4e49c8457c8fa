"""The ESP Q-function ``Q(s, a) = C(Q_F(s, a))`` and a plain Q-network baseline.

The GVF network maps an observation to ``n_actions * n_features`` outputs; the
slice ``[a * n, (a + 1) * n)`` is the GVF vector of action ``a``. The combiner
maps one GVF vector to a scalar action value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from esp_rl.checkpoint import load_checkpoint, save_checkpoint
from esp_rl.envs.base import EnvDescriptor, activation_policy
from esp_rl.nn import MlpParams, ShapeError, decode_array, encode_array, init_mlp, mlp_backward, mlp_forward


class MaskError(ValueError):
    pass


def masked_argmax(q: np.ndarray, mask=None) -> int:
    """Index of the largest unmasked value, lowest index on ties."""
    q = np.asarray(q, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise MaskError("every action is masked")
        q = np.where(mask, q, -np.inf)
    return int(np.argmax(q))


def masked_argmax_rows(q: np.ndarray, mask=None) -> np.ndarray:
    if mask is not None:
        q = np.where(mask, q, -np.inf)
    return np.argmax(q, axis=1)


def combiner_input_scale(descriptor: EnvDescriptor) -> np.ndarray:
    """Fixed per-feature factor mapping each bounded GVF range into [-1, 1]."""
    scale = np.ones(descriptor.n_features)
    for i, f in enumerate(descriptor.features):
        bound = max(abs(f.gvf_range[0]), abs(f.gvf_range[1]))
        if np.isfinite(bound) and bound > 1.0:
            scale[i] = 1.0 / bound
    return scale


@dataclass
class EspModel:
    """``Q(s, a) = C(Q_F(s, a))``.

    The combiner multiplies its input by the fixed ``combiner_scale`` before
    the first layer; the scale is part of ``C`` so gradients with respect to
    GVF vectors include it.
    """

    descriptor: EnvDescriptor
    gvf_net: MlpParams
    combiner_net: MlpParams
    combiner_scale: np.ndarray | None = None
    kind = "esp"

    def __post_init__(self):
        d = self.descriptor
        if self.combiner_scale is None:
            self.combiner_scale = np.ones(d.n_features)
        self.combiner_scale = np.asarray(self.combiner_scale, dtype=np.float64)
        if self.gvf_net.in_dim != d.state_dim:
            raise ShapeError(f"GVF net input {self.gvf_net.in_dim} != state dim {d.state_dim}")
        if self.gvf_net.out_dim != d.n_features * d.n_actions:
            raise ShapeError(f"GVF net output {self.gvf_net.out_dim} != {d.n_features} features x {d.n_actions} actions")
        if self.combiner_net.in_dim != d.n_features or self.combiner_net.out_dim != 1:
            raise ShapeError(f"combiner must map {d.n_features} -> 1")
        if self.combiner_scale.shape != (d.n_features,):
            raise ShapeError("combiner scale length differs from feature count")

    @property
    def n_actions(self) -> int:
        return self.descriptor.n_actions

    @property
    def n_features(self) -> int:
        return self.descriptor.n_features

    @property
    def beta(self) -> float:
        return self.descriptor.beta

    @property
    def gamma(self) -> float:
        return self.descriptor.gamma

    def gvf_all(self, obs: np.ndarray) -> np.ndarray:
        """GVF vectors of every action: ``(A, n)`` for one observation, ``(B, A, n)`` for a batch."""
        out, _ = mlp_forward(self.gvf_net, obs)
        return out.reshape(out.shape[:-1] + (self.n_actions, self.n_features))

    def gvf_predict(self, obs: np.ndarray, action: int) -> np.ndarray:
        if not 0 <= int(action) < self.n_actions:
            raise ValueError(f"action {action} outside 0..{self.n_actions - 1}")
        return self.gvf_all(obs)[int(action)]

    def combine(self, g: np.ndarray):
        """Combiner value of one GVF vector (float) or of a batch of them (array)."""
        g = np.asarray(g, dtype=np.float64)
        if g.shape[-1] != self.n_features:
            raise ShapeError(f"GVF vector length {g.shape[-1]} != {self.n_features}")
        out, _ = self.combiner_forward(g)
        return float(out[0]) if g.ndim == 1 else out[..., 0]

    def combiner_forward(self, g: np.ndarray):
        """Raw combiner forward ``(out, cache)`` on GVF vectors (scale applied)."""
        return mlp_forward(self.combiner_net, g * self.combiner_scale)

    def combiner_backward(self, cache, output_grad):
        """``(param grads, grad w.r.t. the unscaled GVF input)``."""
        grads, dx = mlp_backward(self.combiner_net, cache, output_grad)
        return grads, dx * self.combiner_scale

    def q_value(self, obs: np.ndarray, action: int) -> float:
        return self.combine(self.gvf_predict(obs, action))

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        """All action values: ``(A,)`` for one observation, ``(B, A)`` for a batch."""
        g = self.gvf_all(obs)
        flat = g.reshape(-1, self.n_features)
        q, _ = self.combiner_forward(flat)
        return q.reshape(g.shape[:-1])

    def greedy_action(self, obs: np.ndarray, mask=None) -> int:
        return masked_argmax(self.q_values(obs), mask)

    def n_params(self) -> int:
        return self.gvf_net.n_params() + self.combiner_net.n_params()

    def copy(self) -> "EspModel":
        return EspModel(self.descriptor, self.gvf_net.copy(), self.combiner_net.copy(), self.combiner_scale.copy())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "descriptor": self.descriptor.to_dict(),
            "gvf_net": self.gvf_net.to_dict(),
            "combiner_net": self.combiner_net.to_dict(),
            "combiner_scale": encode_array(self.combiner_scale),
        }


@dataclass
class QNetModel:
    """Single network from observation to all action values (vanilla DQN)."""

    descriptor: EnvDescriptor
    net: MlpParams
    kind = "vanilla-dqn"

    def __post_init__(self):
        if self.net.in_dim != self.descriptor.state_dim or self.net.out_dim != self.descriptor.n_actions:
            raise ShapeError("Q-network must map state dim -> action count")

    @property
    def n_actions(self) -> int:
        return self.descriptor.n_actions

    @property
    def beta(self) -> float:
        return self.descriptor.beta

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.net, obs)
        return out

    def q_value(self, obs: np.ndarray, action: int) -> float:
        return float(self.q_values(obs)[int(action)])

    def greedy_action(self, obs: np.ndarray, mask=None) -> int:
        return masked_argmax(self.q_values(obs), mask)

    def n_params(self) -> int:
        return self.net.n_params()

    def copy(self) -> "QNetModel":
        return QNetModel(self.descriptor, self.net.copy())

    def to_dict(self) -> dict:
        return {"kind": self.kind, "descriptor": self.descriptor.to_dict(), "net": self.net.to_dict()}


def build_esp_model(
    descriptor: EnvDescriptor,
    rng,
    gvf_hidden=(64, 64),
    combiner_hidden=(64, 64),
    gvf_activation: str = "relu",
    combiner_activation: str = "tanh",
    scale_inputs: bool = True,
) -> EspModel:
    """Fresh ESP model; GVF output activations follow the feature schema."""
    out_map = activation_policy(descriptor.features).tile(descriptor.n_actions)
    gvf = init_mlp(
        [descriptor.state_dim, *gvf_hidden, descriptor.n_features * descriptor.n_actions],
        rng.child("gvf"),
        gvf_activation,
        out_map,
    )
    # a smooth combiner keeps integrated-gradient sums accurate at few steps
    comb = init_mlp([descriptor.n_features, *combiner_hidden, 1], rng.child("combiner"), combiner_activation)
    scale = combiner_input_scale(descriptor) if scale_inputs else None
    return EspModel(descriptor, gvf, comb, scale)


def build_qnet_model(descriptor: EnvDescriptor, rng, hidden_sizes=(64, 64), hidden: str = "tanh") -> QNetModel:
    net = init_mlp([descriptor.state_dim, *hidden_sizes, descriptor.n_actions], rng.child("qnet"), hidden)
    return QNetModel(descriptor, net)


def model_from_dict(d: dict):
    desc = EnvDescriptor.from_dict(d["descriptor"])
    if d["kind"] == "vanilla-dqn":
        return QNetModel(desc, MlpParams.from_dict(d["net"]))
    scale = decode_array(d["combiner_scale"]) if "combiner_scale" in d else None
    return EspModel(desc, MlpParams.from_dict(d["gvf_net"]), MlpParams.from_dict(d["combiner_net"]), scale)


def save_model(path, model, extra: dict | None = None) -> None:
    payload = {"model": model.to_dict()}
    if extra:
        payload.update(extra)
    save_checkpoint(path, payload)


def load_model(path):
    payload = load_checkpoint(path)
    return model_from_dict(payload["model"]), payload
