"""ESP-DQN training and the two DQN baselines.

Every environment step adds one transition to the replay buffer and performs
one learning step: the GVF net is fit to ``F + gamma * Q'_F(s', a_hat)`` with
Adam, then the combiner is fit to ``r + beta * Q'(s', a_hat)`` with SGD while the
GVF output is held fixed. ``a_hat`` is the target network's greedy action and
is shared by both targets.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from esp_rl.evaluation import evaluate_policy
from esp_rl.model import (
    EspModel,
    QNetModel,
    build_esp_model,
    build_qnet_model,
    masked_argmax,
    masked_argmax_rows,
    save_model,
)
from esp_rl.nn import NonFiniteError, make_optimizer, mlp_backward, mlp_forward, optimizer_step

AGENTS = ("esp", "dqn-full", "vanilla-dqn")
METRIC_COLUMNS = ("episode", "env_steps", "eval_mean_return", "eval_std", "gvf_loss", "q_loss", "epsilon", "wall_clock_s")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, step: int, layer: int | None = None, net: str | None = None):
        super().__init__(f"{msg} (update {step}, {net or 'net'} layer {layer})")
        self.step = step
        self.layer = layer
        self.net = net


@dataclass
class TrainerConfig:
    agent: str = "esp"
    beta: float | None = None  # None: environment default
    gamma: float | None = None
    lr_gvf: float = 1e-3
    lr_combiner: float = 1e-3
    gvf_optimizer: str = "adam"
    combiner_optimizer: str = "sgd"
    eps_start: float = 1.0
    eps_final: float = 0.05
    eps_decay_steps: int = 10_000
    batch_size: int = 64
    buffer_capacity: int = 100_000
    learning_starts: int = 0  # extra warm-up transitions before the first update
    target_mode: str = "soft"
    tau: float = 5e-3
    target_every: int = 1000
    episodes: int = 200
    max_env_steps: int | None = None
    eval_interval: int = 20
    eval_episodes: int = 20
    checkpoint_every: int = 0  # episodes; 0 disables intermediate checkpoints
    stop_return: float | None = None  # stop once an evaluation reaches this mean return
    keep_best: bool = True  # the returned model is the best evaluated one
    gvf_hidden: tuple[int, ...] = (64, 64)
    combiner_hidden: tuple[int, ...] = (64, 64)
    gvf_activation: str = "relu"
    combiner_activation: str = "tanh"  # also the vanilla Q-network's
    scale_combiner_inputs: bool = True

    def __post_init__(self):
        self.gvf_hidden = tuple(self.gvf_hidden)
        self.combiner_hidden = tuple(self.combiner_hidden)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.agent not in AGENTS:
            problems.append(f"agent: {self.agent!r} not in {AGENTS}")
        if not 0.0 <= self.eps_final <= self.eps_start <= 1.0:
            problems.append("eps_final/eps_start: need 0 <= eps_final <= eps_start <= 1")
        if self.eps_decay_steps < 0:
            problems.append("eps_decay_steps: must be >= 0")
        if self.target_mode not in ("soft", "hard"):
            problems.append(f"target_mode: {self.target_mode!r} not in ('soft', 'hard')")
        if self.target_mode == "soft" and not 0.0 < self.tau <= 1.0:
            problems.append("tau: must lie in (0, 1] for soft updates")
        if self.target_mode == "hard" and self.target_every < 1:
            problems.append("target_every: must be >= 1 for hard updates")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if self.buffer_capacity < self.batch_size:
            problems.append("buffer_capacity: must be >= batch_size")
        if self.episodes < 0:
            problems.append("episodes: must be >= 0")
        if self.eval_interval < 1:
            problems.append("eval_interval: must be >= 1")
        for name in ("lr_gvf", "lr_combiner"):
            if getattr(self, name) <= 0:
                problems.append(f"{name}: must be positive")
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v < 1.0:
                problems.append(f"{name}: must lie in [0, 1)")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown trainer fields: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gvf_hidden"] = list(self.gvf_hidden)
        d["combiner_hidden"] = list(self.combiner_hidden)
        return d


@dataclass
class TransitionSample:
    state: np.ndarray  # observation
    action: int
    reward: float
    features: np.ndarray
    next_state: np.ndarray
    done: bool  # true terminal; time-limit cuts still bootstrap
    next_mask: np.ndarray | None = None


class ReplayBuffer:
    """FIFO ring buffer stored as preallocated arrays."""

    def __init__(self, capacity: int, state_dim: int, n_features: int, n_actions: int | None = None):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.features = np.zeros((capacity, n_features))
        self.next_obs = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity)
        self.next_masks = np.ones((capacity, n_actions), dtype=bool) if n_actions else None
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def push(self, t: TransitionSample) -> None:
        i = self.inserted % self.capacity
        self.obs[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.features[i] = t.features
        self.next_obs[i] = t.next_state
        self.dones[i] = float(t.done)
        if self.next_masks is not None:
            self.next_masks[i] = True if t.next_mask is None else t.next_mask
        self.inserted += 1

    def get(self, i: int) -> TransitionSample:
        return TransitionSample(
            self.obs[i].copy(),
            int(self.actions[i]),
            float(self.rewards[i]),
            self.features[i].copy(),
            self.next_obs[i].copy(),
            bool(self.dones[i]),
            None if self.next_masks is None else self.next_masks[i].copy(),
        )

    def oldest_insertion(self) -> int:
        return max(0, self.inserted - self.capacity)

    def batch(self, idx: np.ndarray) -> dict:
        return {
            "obs": self.obs[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "features": self.features[idx],
            "next_obs": self.next_obs[idx],
            "dones": self.dones[idx],
            "next_masks": None if self.next_masks is None else self.next_masks[idx],
        }

    def sample(self, batch_size: int, rng) -> dict:
        return self.batch(rng.integers(0, len(self), size=batch_size))


def epsilon_at(config: TrainerConfig, step: int) -> float:
    if config.eps_decay_steps <= 0 or step >= config.eps_decay_steps:
        return config.eps_final
    frac = step / config.eps_decay_steps
    return config.eps_start + frac * (config.eps_final - config.eps_start)


class Trainer:
    def __init__(self, env, config: TrainerConfig, rng, model=None):
        self.env = env
        self.config = config
        self.rng = rng
        d = env.descriptor
        if config.beta is not None or config.gamma is not None:
            from dataclasses import replace

            d = replace(
                d,
                beta=d.beta if config.beta is None else config.beta,
                gamma=d.gamma if config.gamma is None else config.gamma,
            )
        self.descriptor = d
        self.agent = config.agent
        if model is None:
            if self.agent == "vanilla-dqn":
                model = build_qnet_model(d, rng.child("init"), config.combiner_hidden, config.combiner_activation)
            else:
                model = build_esp_model(
                    d,
                    rng.child("init"),
                    config.gvf_hidden,
                    config.combiner_hidden,
                    config.gvf_activation,
                    config.combiner_activation,
                    config.scale_combiner_inputs,
                )
        self.model = model
        self.target = model.copy()
        if isinstance(model, EspModel):
            self.gvf_opt = make_optimizer(config.gvf_optimizer, model.gvf_net, config.lr_gvf)
            self.comb_opt = make_optimizer(config.combiner_optimizer, model.combiner_net, config.lr_combiner)
        else:
            self.gvf_opt = None
            self.comb_opt = make_optimizer(config.combiner_optimizer, model.net, config.lr_combiner)
        self.uses_features = self.agent == "esp"
        self.buffer = ReplayBuffer(
            config.buffer_capacity,
            d.state_dim,
            d.n_features if self.uses_features else 1,
            d.n_actions if env.masked else None,
        )
        self.updates = 0  # learning steps so far, across episodes
        self.env_steps = 0
        self._sample_rng = rng.child("replay")
        self._act_rng = rng.child("act")
        self.last_target_actions: np.ndarray | None = None

    # -- acting ---------------------------------------------------------
    def epsilon(self) -> float:
        return epsilon_at(self.config, self.env_steps)

    def select_action(self, obs, rng=None, mask=None, epsilon: float | None = None) -> int:
        rng = self._act_rng if rng is None else rng
        eps = self.epsilon() if epsilon is None else epsilon
        if eps > 0.0 and rng.random() < eps:
            allowed = np.arange(self.model.n_actions) if mask is None else np.flatnonzero(mask)
            return int(allowed[rng.integers(len(allowed))])
        return self.model.greedy_action(obs, mask)

    # -- learning -------------------------------------------------------
    def compute_targets(self, batch: dict):
        """Returns ``(gvf_targets, q_targets, a_hat)``; GVF targets are None without a GVF."""
        bootstrap = 1.0 - batch["dones"]
        rows = np.arange(len(bootstrap))
        tgt = self.target
        if isinstance(tgt, QNetModel):
            q_next = tgt.q_values(batch["next_obs"])
            a_hat = masked_argmax_rows(q_next, batch["next_masks"])
            q_t = batch["rewards"] + tgt.beta * bootstrap * q_next[rows, a_hat]
            return None, q_t, a_hat
        g_next = tgt.gvf_all(batch["next_obs"])  # (B, A, n)
        q_next, _ = tgt.combiner_forward(g_next.reshape(-1, tgt.n_features))
        q_next = q_next.reshape(g_next.shape[:2])
        a_hat = masked_argmax_rows(q_next, batch["next_masks"])
        q_t = batch["rewards"] + self.descriptor.beta * bootstrap * q_next[rows, a_hat]
        f_t = None
        if self.uses_features:
            f_t = batch["features"] + self.descriptor.gamma * bootstrap[:, None] * g_next[rows, a_hat]
        return f_t, q_t, a_hat

    def _step_opt(self, opt, params, grads, net):
        try:
            optimizer_step(opt, params, grads)
        except NonFiniteError as e:
            raise TrainingDiverged("non-finite gradient", self.updates, e.layer, net) from e

    def train_step(self, rng=None, batch: dict | None = None):
        """One learning step. Returns ``(gvf_loss, q_loss)``, or None when the buffer is too small."""
        cfg = self.config
        if batch is None:
            if len(self.buffer) < max(cfg.batch_size, cfg.learning_starts):
                return None
            batch = self.buffer.sample(cfg.batch_size, self._sample_rng if rng is None else rng)
        f_t, q_t, a_hat = self.compute_targets(batch)
        self.last_target_actions = a_hat
        B = len(q_t)
        rows = np.arange(B)
        acts = batch["actions"]
        m = self.model
        gvf_loss = float("nan")
        if isinstance(m, QNetModel):
            q, cache = mlp_forward(m.net, batch["obs"])
            err = q[rows, acts] - q_t
            q_loss = float(np.mean(err**2))
            dq = np.zeros_like(q)
            dq[rows, acts] = 2.0 * err / B
            grads, _ = mlp_backward(m.net, cache, dq)
            self._step_opt(self.comb_opt, m.net, grads, "q")
        elif self.agent == "dqn-full":
            n = m.n_features
            out, gcache = mlp_forward(m.gvf_net, batch["obs"])
            g = out.reshape(B, m.n_actions, n)[rows, acts]
            q, ccache = m.combiner_forward(g)
            err = q[:, 0] - q_t
            q_loss = float(np.mean(err**2))
            cgrads, dg = m.combiner_backward(ccache, (2.0 * err / B)[:, None])
            dout = np.zeros((B, m.n_actions, n))
            dout[rows, acts] = dg
            ggrads, _ = mlp_backward(m.gvf_net, gcache, dout.reshape(B, -1))
            self._step_opt(self.gvf_opt, m.gvf_net, ggrads, "gvf")
            self._step_opt(self.comb_opt, m.combiner_net, cgrads, "combiner")
        else:
            n = m.n_features
            out, gcache = mlp_forward(m.gvf_net, batch["obs"])
            pred = out.reshape(B, m.n_actions, n)[rows, acts]
            gerr = pred - f_t
            gvf_loss = float(np.mean(gerr**2))
            dout = np.zeros((B, m.n_actions, n))
            dout[rows, acts] = 2.0 * gerr / (B * n)
            ggrads, _ = mlp_backward(m.gvf_net, gcache, dout.reshape(B, -1))
            self._step_opt(self.gvf_opt, m.gvf_net, ggrads, "gvf")
            # combiner sees the updated GVF output as a fixed input
            out, _ = mlp_forward(m.gvf_net, batch["obs"])
            g = out.reshape(B, m.n_actions, n)[rows, acts]
            q, ccache = m.combiner_forward(g)
            err = q[:, 0] - q_t
            q_loss = float(np.mean(err**2))
            cgrads, _ = m.combiner_backward(ccache, (2.0 * err / B)[:, None])
            self._step_opt(self.comb_opt, m.combiner_net, cgrads, "combiner")
        if not np.isfinite(q_loss) or (self.uses_features and not np.isfinite(gvf_loss)):
            raise TrainingDiverged("non-finite loss", self.updates)
        self.sync_targets()
        self.updates += 1
        return gvf_loss, q_loss

    def sync_targets(self) -> None:
        """Hard copy when the update count is a multiple of K, or a soft blend every step."""
        cfg = self.config
        if cfg.target_mode == "hard":
            if self.updates % cfg.target_every == 0:
                hard_sync(self.target, self.model)
        else:
            soft_sync(self.target, self.model, cfg.tau)

    # -- data -----------------------------------------------------------
    def record(self, obs, action, out, next_obs, next_mask=None) -> None:
        feats = out.features if self.uses_features else np.zeros(1)
        self.buffer.push(TransitionSample(obs, action, out.reward, feats, next_obs, out.terminal, next_mask))


def _param_lists(model):
    if isinstance(model, QNetModel):
        return [model.net]
    return [model.gvf_net, model.combiner_net]


def hard_sync(target, live) -> None:
    for t, l in zip(_param_lists(target), _param_lists(live)):
        t.load_from(l)


def soft_sync(target, live, tau: float) -> None:
    for t, l in zip(_param_lists(target), _param_lists(live)):
        for a, b in zip(t.arrays(), l.arrays()):
            a *= 1.0 - tau
            a += tau * b
        t.version += 1


def make_baseline(kind: str, env, config: TrainerConfig, rng) -> Trainer:
    if kind not in ("dqn-full", "vanilla-dqn"):
        raise ConfigError(f"unknown baseline {kind!r}")
    cfg = TrainerConfig.from_dict({**config.to_dict(), "agent": kind})
    return Trainer(env, cfg, rng)


@dataclass
class TrainingResult:
    model: object
    final_model: object  # model after the last update
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    best_eval: float | None = None
    best_episode: int | None = None
    episodes_run: int = 0
    env_steps: int = 0


def metrics_hash(rows: list[dict]) -> str:
    """Digest of the metric rows, wall-clock time excluded."""
    import hashlib

    stable = [{k: v for k, v in r.items() if k != "wall_clock_s"} for r in rows]
    return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Standard columns first, then any extra columns added by an evaluation hook."""
    extra = sorted({k for r in rows for k in r} - set(METRIC_COLUMNS))
    columns = list(METRIC_COLUMNS) + extra
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})


def checkpoint_name(env_name: str, seed: int, episode: int) -> str:
    return f"ckpt_{env_name.replace(':', '-')}_{seed}_{episode}.json"


def run_training(
    env,
    config: TrainerConfig,
    rng,
    out_dir=None,
    seed: int = 0,
    progress=None,
    trainer: Trainer | None = None,
    on_eval=None,
) -> TrainingResult:
    """Train for ``config.episodes`` episodes (or until ``max_env_steps``/``stop_return``).

    ``on_eval(model, episode)`` may return extra metric columns for each
    evaluation row; ``progress(row)`` sees the finished row.
    """
    tr = trainer or Trainer(env, config, rng)
    out_dir = Path(out_dir) if out_dir is not None else None
    env_name = env.descriptor.name
    result = TrainingResult(tr.model, tr.model)
    start = time.perf_counter()
    best_model = None
    losses_g: list[float] = []
    losses_q: list[float] = []

    def checkpoint(episode: int) -> None:
        if out_dir is None:
            return
        path = out_dir / checkpoint_name(env_name, seed, episode)
        save_model(path, tr.model, {"episode": episode, "env_steps": tr.env_steps, "seed": seed, "config": config.to_dict()})
        result.checkpoints.append(path)

    checkpoint(0)
    episode = 0
    ep_rng = rng.child("episodes")
    eval_rng = rng.child("eval")
    stopped = False
    while episode < config.episodes and not stopped:
        erng = ep_rng.child(str(episode))
        state = env.reset(erng)
        obs = env.observe(state)
        mask = env.action_mask(state) if env.masked else None
        while True:
            a = tr.select_action(obs, mask=mask)
            out = env.step(state, a, erng)
            tr.env_steps += 1
            nobs = env.observe(out.next_state)
            nmask = env.action_mask(out.next_state) if env.masked else None
            tr.record(obs, a, out, nobs, nmask)
            losses = tr.train_step()
            if losses is not None:
                losses_g.append(losses[0])
                losses_q.append(losses[1])
            if out.done:
                break
            state, obs, mask = out.next_state, nobs, nmask
            if config.max_env_steps and tr.env_steps >= config.max_env_steps:
                break
        episode += 1
        if config.max_env_steps and tr.env_steps >= config.max_env_steps:
            stopped = True
        if episode % config.eval_interval == 0 or episode == config.episodes or stopped:
            ev = evaluate_policy(env, tr.model, config.eval_episodes, eval_rng.child(str(episode)))
            row = {
                "episode": episode,
                "env_steps": tr.env_steps,
                "eval_mean_return": ev.mean_return,
                "eval_std": ev.std_return,
                "eval_win_rate": float("nan") if ev.win_rate is None else ev.win_rate,
                "gvf_loss": float(np.mean(losses_g)) if losses_g and tr.uses_features else float("nan"),
                "q_loss": float(np.mean(losses_q)) if losses_q else float("nan"),
                "epsilon": tr.epsilon(),
                "wall_clock_s": round(time.perf_counter() - start, 3),
            }
            losses_g.clear()
            losses_q.clear()
            if on_eval is not None:
                row.update(on_eval(tr.model, episode) or {})
            result.metrics.append(row)
            if progress:
                progress(row)
            if result.best_eval is None or ev.mean_return > result.best_eval:
                result.best_eval = ev.mean_return
                result.best_episode = episode
                best_model = tr.model.copy()
            if config.stop_return is not None and ev.mean_return >= config.stop_return:
                stopped = True
        if config.checkpoint_every and episode % config.checkpoint_every == 0:
            checkpoint(episode)
    result.episodes_run = episode
    result.env_steps = tr.env_steps
    result.final_model = tr.model
    result.model = best_model if (config.keep_best and best_model is not None) else tr.model
    if episode > 0 and not (config.checkpoint_every and episode % config.checkpoint_every == 0):
        checkpoint(episode)
    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", result.metrics)
    if out_dir is not None and episode > 0:
        save_model(out_dir / "model.json", result.model, {"episode": result.best_episode if config.keep_best else episode, "seed": seed, "config": config.to_dict()})
    return result
