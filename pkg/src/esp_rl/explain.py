"""Contrastive explanations of an ESP agent's action preferences.

For actions ``a`` and ``b`` in state ``s`` the explanation pairs the GVF
difference ``delta = Q_F(s, a) - Q_F(s, b)`` with integrated-gradient weights
``theta`` of the combiner along the straight path from ``Q_F(s, b)`` to
``Q_F(s, a)``, so ``theta . delta`` approximates ``Q(s, a) - Q(s, b)``. The
minimal sufficient explanation (MSX) is the smallest set of positive
contributions whose total exceeds the total of the negative ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from esp_rl.nn import MlpParams, mlp_backward, mlp_forward

REPORT_VERSION = 1


class ExplanationError(ValueError):
    pass


@dataclass
class Explanation:
    state: list[float]
    action_a: int
    action_b: int
    q_a: float
    q_b: float
    delta: np.ndarray
    theta: np.ndarray
    riemann_steps: int
    feature_names: list[str]
    gvf_a: np.ndarray
    gvf_b: np.ndarray
    msx: list[int] | None = None

    @property
    def q_gap(self) -> float:
        return self.q_a - self.q_b

    @property
    def contributions(self) -> np.ndarray:
        return self.theta * self.delta

    @property
    def residual(self) -> float:
        return abs(self.q_gap - float(np.sum(self.contributions)))


def delta_f(model, obs, a: int, b: int) -> np.ndarray:
    return model.gvf_predict(obs, a) - model.gvf_predict(obs, b)


def _combiner_pass(combiner, x: np.ndarray):
    """Values and input gradients of the combiner at each row of ``x``."""
    if isinstance(combiner, MlpParams):
        out, cache = mlp_forward(combiner, x)
        _, dx = mlp_backward(combiner, cache, np.ones_like(out))
    else:
        out, cache = combiner.combiner_forward(x)
        _, dx = combiner.combiner_backward(cache, np.ones_like(out))
    return out[:, 0], dx


def combiner_value(combiner, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if isinstance(combiner, MlpParams):
        return float(mlp_forward(combiner, x)[0][0])
    return combiner.combine(x)


def integrated_gradient(combiner, x_a, x_b, steps: int = 30) -> np.ndarray:
    """Midpoint Riemann sum of the combiner gradient on the path from ``x_b`` to ``x_a``.

    ``combiner`` is an ``EspModel`` (its scaled combiner is used) or bare
    ``MlpParams``. Gradients at each sample point come from backprop.
    """
    if steps < 1:
        raise ExplanationError("integrated gradients need at least one step")
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    alphas = (np.arange(steps) + 0.5) / steps
    path = x_b[None, :] + alphas[:, None] * (x_a - x_b)[None, :]
    values, grads = _combiner_pass(combiner, path)
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(grads))):
        raise ExplanationError("combiner is not finite along the integration path")
    if np.all(grads == grads[0]):
        # constant gradient (linear combiner): the integral is exact
        return grads[0].copy()
    return grads.mean(axis=0)


def msx_indices(contributions, q_gap: float | None = None) -> list[int]:
    """Minimal sufficient explanation over a contribution vector.

    Positive components sorted by decreasing size (lower index first on
    ties); the shortest prefix whose sum strictly exceeds the total size of
    the negative components. If even all positive components fall short (only
    possible when the IG residual flips the sign) every positive index is
    returned.
    """
    if q_gap is not None and not q_gap > 0.0:
        raise ExplanationError("MSX is defined only when action a is preferred (q_gap > 0)")
    c = np.asarray(contributions, dtype=np.float64)
    pos = [i for i in range(len(c)) if c[i] > 0.0]
    neg_total = float(-c[c < 0.0].sum())
    order = sorted(pos, key=lambda i: (-c[i], i))
    total = 0.0
    for k, i in enumerate(order):
        total += c[i]
        if total > neg_total:
            return order[: k + 1]
    return order


def msx(explanation: Explanation) -> list[int]:
    return msx_indices(explanation.contributions, explanation.q_gap)


def igx(model, obs, a: int, b: int, steps: int = 30) -> Explanation:
    """Integrated-gradient explanation of ``a`` versus ``b`` in observation ``obs``."""
    for x in (a, b):
        if not 0 <= int(x) < model.n_actions:
            raise ExplanationError(f"action {x} outside 0..{model.n_actions - 1}")
    obs = np.asarray(obs, dtype=np.float64)
    g_a = model.gvf_predict(obs, a)
    g_b = model.gvf_predict(obs, b)
    theta = integrated_gradient(model, g_a, g_b, steps)
    e = Explanation(
        state=[float(v) for v in obs],
        action_a=int(a),
        action_b=int(b),
        q_a=model.combine(g_a),
        q_b=model.combine(g_b),
        delta=g_a - g_b,
        theta=theta,
        riemann_steps=int(steps),
        feature_names=list(model.descriptor.feature_names),
        gvf_a=g_a,
        gvf_b=g_b,
    )
    if e.q_gap > 0.0:
        e.msx = msx(e)
    return e


def ranked_actions(model, obs, mask=None) -> list[int]:
    q = np.asarray(model.q_values(obs), dtype=np.float64)
    if mask is not None:
        q = np.where(mask, q, -np.inf)
    order = sorted(range(len(q)), key=lambda i: (-q[i], i))
    return [i for i in order if np.isfinite(q[i])]


def explain_all_pairs(model, obs, steps: int = 30, mask=None) -> list[Explanation]:
    """The greedy action against every other available action."""
    ranked = ranked_actions(model, obs, mask)
    return [igx(model, obs, ranked[0], b, steps) for b in ranked[1:]]


# -- reports -----------------------------------------------------------------


def _floats(v) -> list[float]:
    return [float(x) for x in v]


def report_dict(e: Explanation, action_names=None) -> dict:
    """Report document with a fixed key order."""
    names = list(action_names) if action_names else None
    return {
        "version": REPORT_VERSION,
        "state": _floats(e.state),
        "action_a": e.action_a,
        "action_b": e.action_b,
        "action_a_name": names[e.action_a] if names else None,
        "action_b_name": names[e.action_b] if names else None,
        "q_a": float(e.q_a),
        "q_b": float(e.q_b),
        "q_gap": float(e.q_gap),
        "delta": _floats(e.delta),
        "theta": _floats(e.theta),
        "contributions": _floats(e.contributions),
        "msx": None if e.msx is None else [int(i) for i in e.msx],
        "residual": float(e.residual),
        "riemann_steps": e.riemann_steps,
        "feature_names": list(e.feature_names),
        "gvf_a": _floats(e.gvf_a),
        "gvf_b": _floats(e.gvf_b),
    }


def render_json(e: Explanation, action_names=None) -> str:
    return json.dumps(report_dict(e, action_names), indent=2) + "\n"


def render_text(e: Explanation, action_names=None, width: int = 30) -> str:
    """Aligned signed bar chart of the contributions; ``*`` marks MSX components."""
    names = list(action_names) if action_names else None
    label_a = names[e.action_a] if names else str(e.action_a)
    label_b = names[e.action_b] if names else str(e.action_b)
    contrib = e.contributions
    scale = float(np.max(np.abs(contrib))) if len(contrib) else 0.0
    pad = max((len(n) for n in e.feature_names), default=0)
    msx_set = set(e.msx or [])
    lines = [
        f"why {label_a} rather than {label_b}: Q gap {e.q_gap:+.6g} (residual {e.residual:.3g}, {e.riemann_steps} steps)",
    ]
    for i, name in enumerate(e.feature_names):
        v = contrib[i]
        n = 0 if scale == 0.0 else int(round(abs(v) / scale * width))
        left = ("-" * n).rjust(width) if v < 0 else " " * width
        right = ("+" * n).ljust(width) if v > 0 else " " * width
        mark = "*" if i in msx_set else " "
        lines.append(f"{mark} {name.ljust(pad)} {left}|{right} {v:+.6g}")
    lines.append("* = minimal sufficient explanation" if msx_set else "no minimal sufficient explanation (no preference)")
    return "\n".join(lines) + "\n"


def render_report(e: Explanation, schema=None) -> tuple[str, str]:
    """``(json_text, text_chart)``; ``schema`` (an env descriptor) supplies action names."""
    names = schema.action_names if schema is not None else None
    if schema is not None and list(schema.feature_names) != list(e.feature_names):
        raise ExplanationError("explanation features do not match the schema")
    return render_json(e, names), render_text(e, names)


def parse_report(text: str) -> Explanation:
    d = json.loads(text)
    if d.get("version") != REPORT_VERSION:
        raise ExplanationError(f"unsupported report version {d.get('version')!r}")
    return Explanation(
        state=d["state"],
        action_a=d["action_a"],
        action_b=d["action_b"],
        q_a=d["q_a"],
        q_b=d["q_b"],
        delta=np.array(d["delta"], dtype=np.float64),
        theta=np.array(d["theta"], dtype=np.float64),
        riemann_steps=d["riemann_steps"],
        feature_names=d["feature_names"],
        gvf_a=np.array(d["gvf_a"], dtype=np.float64),
        gvf_b=np.array(d["gvf_b"], dtype=np.float64),
        msx=d["msx"],
    )
