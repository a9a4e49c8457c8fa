"""Dense MLPs with hand-written backprop, SGD/Adam, and bit-exact serialization.

Weights are stored as ``(fan_in, fan_out)`` float64 arrays so a layer computes
``x @ W + b``. Inputs may be a single vector or a batch of row vectors.
"""

from __future__ import annotations

import base64
import copy
from dataclasses import dataclass, field

import numpy as np

from esp_rl.rng import Rng

HIDDEN_ACTIVATIONS = ("relu", "tanh", "sigmoid", "linear")
OUTPUT_KINDS = ("linear", "sigmoid", "softmax")


class ShapeError(ValueError):
    def __init__(self, msg: str, layer: int | None = None):
        self.layer = layer
        super().__init__(msg if layer is None else f"layer {layer}: {msg}")


class StaleCacheError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, msg: str, layer: int | None = None, step: int | None = None):
        self.layer = layer
        self.step = step
        where = []
        if step is not None:
            where.append(f"step {step}")
        if layer is not None:
            where.append(f"layer {layer}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)


@dataclass
class OutputMap:
    """Per-output activation of the final layer.

    ``kinds[i]`` is one of linear / sigmoid / softmax; every softmax output
    belongs to exactly one contiguous group in ``groups``.
    """

    kinds: list[str]
    groups: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        for k in self.kinds:
            if k not in OUTPUT_KINDS:
                raise ValueError(f"unknown output activation {k!r}")
        seen: set[int] = set()
        for g in self.groups:
            if not g or list(g) != list(range(g[0], g[0] + len(g))):
                raise ValueError(f"softmax group {g} is not contiguous")
            if seen & set(g):
                raise ValueError(f"softmax group {g} overlaps another group")
            seen |= set(g)
        marked = {i for i, k in enumerate(self.kinds) if k == "softmax"}
        if marked != seen:
            raise ValueError("softmax outputs and softmax groups disagree")
        kinds = np.array(self.kinds)
        self._sig = np.flatnonzero(kinds == "sigmoid")
        self._groups = [np.asarray(g) for g in self.groups]
        # equal-size groups (one per action head) are handled as one (B, G, k) block
        sizes = {len(g) for g in self.groups}
        self._block = np.array(self.groups) if len(sizes) == 1 else None

    @classmethod
    def uniform(cls, kind: str, size: int) -> "OutputMap":
        if kind == "softmax":
            return cls(["softmax"] * size, [list(range(size))])
        return cls([kind] * size)

    def tile(self, times: int) -> "OutputMap":
        """Repeat the map ``times`` times (one copy per action head)."""
        n = len(self.kinds)
        groups = [[i + r * n for i in g] for r in range(times) for g in self.groups]
        return OutputMap(self.kinds * times, groups)

    @property
    def is_linear(self) -> bool:
        return all(k == "linear" for k in self.kinds)

    def forward(self, z: np.ndarray) -> np.ndarray:
        y = z.copy()
        if self._sig.size:
            y[:, self._sig] = _sigmoid(z[:, self._sig])
        if self._block is not None:
            y[:, self._block] = _softmax(z[:, self._block])
        else:
            for g in self._groups:
                y[:, g] = _softmax(z[:, g])
        return y

    def backward(self, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
        dz = dy.copy()
        if self._sig.size:
            s = y[:, self._sig]
            dz[:, self._sig] = dy[:, self._sig] * s * (1.0 - s)
        if self._block is not None:
            yg, dg = y[:, self._block], dy[:, self._block]
            dz[:, self._block] = yg * (dg - np.sum(dg * yg, axis=-1, keepdims=True))
        else:
            for g in self._groups:
                yg, dg = y[:, g], dy[:, g]
                dz[:, g] = yg * (dg - np.sum(dg * yg, axis=1, keepdims=True))
        return dz

    def to_dict(self) -> dict:
        return {"kinds": list(self.kinds), "groups": [list(map(int, g)) for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "OutputMap":
        return cls(list(d["kinds"]), [list(g) for g in d["groups"]])


def _sigmoid(z):
    # exp(-|z|) never overflows; same values as the two-sided formula
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str  # hidden activation name, or "output" for the final layer


@dataclass
class MlpParams:
    layers: list[Layer]
    output_map: OutputMap
    version: int = 0

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.W.ndim != 2 or layer.b.shape != (layer.W.shape[1],):
                raise ShapeError(f"weight {layer.W.shape} / bias {layer.b.shape} mismatch", i)
            if i > 0 and self.layers[i - 1].W.shape[1] != layer.W.shape[0]:
                raise ShapeError(
                    f"input width {layer.W.shape[0]} does not chain from {self.layers[i - 1].W.shape[1]}", i
                )
        if len(self.output_map.kinds) != self.out_dim:
            raise ShapeError("output map length differs from output width", len(self.layers) - 1)

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.W.shape[1] for layer in self.layers]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "MlpParams":
        return copy.deepcopy(self)

    def load_from(self, other: "MlpParams") -> None:
        """Overwrite weights in place with ``other``'s (same architecture)."""
        for dst, src in zip(self.arrays(), other.arrays()):
            dst[...] = src
        self.version += 1

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activations": [layer.activation for layer in self.layers],
            "output_map": self.output_map.to_dict(),
            "weights": [encode_array(layer.W) for layer in self.layers],
            "biases": [encode_array(layer.b) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        layers = [
            Layer(decode_array(w), decode_array(b), act)
            for w, b, act in zip(d["weights"], d["biases"], d["activations"])
        ]
        return cls(layers, OutputMap.from_dict(d["output_map"]))


def init_mlp(
    sizes: list[int],
    rng: Rng,
    hidden: str = "relu",
    output: OutputMap | str = "linear",
) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if hidden not in HIDDEN_ACTIVATIONS:
        raise ValueError(f"unknown hidden activation {hidden!r}")
    if isinstance(output, str):
        output = OutputMap.uniform(output, sizes[-1])
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        act = "output" if i == len(sizes) - 2 else hidden
        layers.append(Layer(W, np.zeros(fan_out), act))
    return MlpParams(layers, output)


@dataclass
class ForwardCache:
    owner: int
    version: int
    single: bool
    acts: list[np.ndarray]  # input to each layer, then the final output


def _hidden(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    if act == "sigmoid":
        return _sigmoid(z)
    return z


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ShapeError(f"expected input width {params.in_dim}, got shape {x.shape}", 0)
    acts = [h]
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        z = h @ layer.W + layer.b
        h = params.output_map.forward(z) if i == last else _hidden(z, layer.activation)
        acts.append(h)
    out = h[0] if single else h
    return out, ForwardCache(id(params), params.version, single, acts)


def mlp_backward(
    params: MlpParams, cache: ForwardCache, output_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of ``sum(output * output_grad)`` w.r.t. every parameter and the input.

    For a batch, parameter gradients are summed over rows.
    """
    if cache.owner != id(params) or cache.version != params.version:
        raise StaleCacheError("cache was produced by a different or since-updated network")
    dy = np.asarray(output_grad, dtype=np.float64)
    dy = dy[None, :] if cache.single else dy
    if dy.shape != cache.acts[-1].shape:
        raise ShapeError(f"output grad shape {dy.shape} != output shape {cache.acts[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(params.layers))  # type: ignore[list-item]
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        layer = params.layers[i]
        y = cache.acts[i + 1]
        if i == last:
            dz = params.output_map.backward(y, dy)
        elif layer.activation == "relu":
            dz = dy * (y > 0)
        elif layer.activation == "tanh":
            dz = dy * (1.0 - y * y)
        elif layer.activation == "sigmoid":
            dz = dy * y * (1.0 - y)
        else:
            dz = dy
        grads[2 * i] = cache.acts[i].T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        dy = dz @ layer.W.T
    return grads, (dy[0] if cache.single else dy)


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None
    t: int = 0

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}
        if self.kind == "adam":
            d["m"] = [encode_array(a) for a in self.m]
            d["v"] = [encode_array(a) for a in self.v]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        st = cls(d["kind"], d["lr"], d["beta1"], d["beta2"], d["eps"], t=d["t"])
        if st.kind == "adam":
            st.m = [decode_array(a) for a in d["m"]]
            st.v = [decode_array(a) for a in d["v"]]
        return st


def make_optimizer(kind: str, params: MlpParams, lr: float, **hyper) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {kind!r}")
    st = OptimizerState(kind, lr, **hyper)
    if kind == "adam":
        st.m = [np.zeros_like(a) for a in params.arrays()]
        st.v = [np.zeros_like(a) for a in params.arrays()]
    return st


def optimizer_step(state: OptimizerState, params: MlpParams, grads: list[np.ndarray]):
    """One in-place update. Returns ``(params, state)`` for convenience."""
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise ShapeError(f"got {len(grads)} gradient arrays for {len(arrays)} parameters")
    for j, (p, g) in enumerate(zip(arrays, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}", j // 2)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient", layer=j // 2, step=state.t)
    state.t += 1
    if state.kind == "sgd":
        for p, g in zip(arrays, grads):
            p -= state.lr * g
    else:
        b1, b2 = state.beta1, state.beta2
        c1 = 1.0 - b1**state.t
        c2 = 1.0 - b2**state.t
        for p, g, m, v in zip(arrays, grads, state.m, state.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.version += 1
    return params, state


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    buf = base64.b64decode(d["data"])
    return np.frombuffer(buf, dtype=d["dtype"]).astype(np.float64).reshape(d["shape"])
