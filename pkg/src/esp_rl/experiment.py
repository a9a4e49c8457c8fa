"""Multi-seed experiment driver: training curves, GVF error and a summary table.

Each (agent, seed) run trains in its own directory. At every evaluation the
ground truth is regenerated for the current greedy policy (test states from
its own trajectories, Monte-Carlo GVF rollouts), so the logged GVF error tracks
how well the model predicts the policy it currently induces.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from esp_rl.config import EvalConfig, RunConfig
from esp_rl.dqn import TrainerConfig, TrainingResult, metrics_hash, run_training
from esp_rl.envs import make_env
from esp_rl.evaluation import collect_test_states, evaluate_policy, gvf_mse, monte_carlo_gvf
from esp_rl.model import load_model
from esp_rl.rng import Rng

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("env_steps", "metric", "mean", "std", "n_seeds")
CURVE_METRICS = ("eval_mean_return", "eval_win_rate", "gvf_mse")


@dataclass
class ExperimentSpec:
    env: str
    agents: list[str]
    seeds: list[int]
    trainer: TrainerConfig
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    env_options: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        from esp_rl.envs import KNOWN_ENVS

        if not self.seeds:
            raise ValueError("an experiment needs at least one seed")
        if self.env not in KNOWN_ENVS:
            raise ValueError(f"unknown environment {self.env!r}")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "ExperimentSpec":
        agents = list(dict.fromkeys([cfg.agent, *cfg.agents]))
        return cls(cfg.env, agents, list(cfg.seeds), cfg.trainer, cfg.evaluation, dict(cfg.env_options), cfg.workers)


@dataclass
class SeedOutcome:
    agent: str
    seed: int
    result: TrainingResult | None = None
    final_return: float | None = None
    final_std: float | None = None
    final_win_rate: float | None = None
    gvf_first: float | None = None
    gvf_final: float | None = None
    error: str | None = None
    seconds: float = 0.0


def ground_truth(env, model, ev: EvalConfig, rng):
    states = collect_test_states(env, model, ev.test_states, rng.child("states"), ev.max_rollout_steps)
    return monte_carlo_gvf(env, model, states, ev.rollouts, rng.child("rollouts"), max_steps=ev.max_rollout_steps)


def gvf_learning_signal(env, first_model, final_model, ev: EvalConfig, rng) -> tuple[float, float]:
    """GVF error of the first and last checkpoints against the final policy's ground truth."""
    truth = ground_truth(env, final_model, ev, rng)
    return gvf_mse(first_model, truth), gvf_mse(final_model, truth)


def run_seed(spec: ExperimentSpec, agent: str, seed: int, out_dir: Path | None) -> SeedOutcome:
    env = make_env(spec.env, spec.trainer.beta, spec.trainer.gamma, **spec.env_options)
    cfg = TrainerConfig.from_dict({**spec.trainer.to_dict(), "agent": agent})
    rng = Rng(seed)
    track = spec.evaluation.track_gvf and agent == "esp"
    gt_rng = rng.child("ground_truth")

    def on_eval(model, episode):
        if not track:
            return {"gvf_mse": float("nan")}
        truth = ground_truth(env, model, spec.evaluation, gt_rng.child(str(episode)))
        return {"gvf_mse": gvf_mse(model, truth)}

    start = time.perf_counter()
    out = SeedOutcome(agent, seed)
    try:
        res = run_training(env, cfg, rng, out_dir, seed=seed, on_eval=on_eval)
        out.result = res
        final_rng = rng.child("final")
        if spec.evaluation.final_episodes > 0 and res.episodes_run > 0:
            ev = evaluate_policy(env, res.model, spec.evaluation.final_episodes, final_rng.child("eval"))
            out.final_return, out.final_std, out.final_win_rate = ev.mean_return, ev.std_return, ev.win_rate
        if track and res.checkpoints and res.episodes_run > 0:
            first, _ = load_model(res.checkpoints[0])
            out.gvf_first, out.gvf_final = gvf_learning_signal(env, first, res.model, spec.evaluation, final_rng.child("gvf"))
    except Exception as exc:  # one failed seed must not sink the others
        log.warning("%s seed %d failed: %s", agent, seed, exc)
        out.error = f"{type(exc).__name__}: {exc}"
    out.seconds = time.perf_counter() - start
    return out


def aggregate_curves(per_seed: list[list[dict]]) -> list[dict]:
    """Per-evaluation mean and std across seeds, aligned by evaluation index.

    ``env_steps`` is the across-seed mean at that evaluation (episode lengths
    differ between seeds). Seeds that stopped early simply drop out, which
    ``n_seeds`` records.
    """
    rows = []
    depth = max((len(m) for m in per_seed), default=0)
    for k in range(depth):
        at = [m[k] for m in per_seed if len(m) > k]
        steps = int(round(float(np.mean([r["env_steps"] for r in at]))))
        for metric in CURVE_METRICS:
            vals = np.array([r.get(metric, float("nan")) for r in at], dtype=float)
            vals = vals[np.isfinite(vals)]
            if len(vals) == 0:
                continue
            rows.append({"env_steps": steps, "metric": metric, "mean": float(vals.mean()), "std": float(vals.std()), "n_seeds": len(vals)})
    return rows


def write_curves_csv(path, rows: list[dict]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CURVE_COLUMNS})


def _stat(values) -> dict:
    v = np.array([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    if len(v) == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(len(v))}


def summarize(spec: ExperimentSpec, outcomes: list[SeedOutcome]) -> dict:
    agents = {}
    for agent in spec.agents:
        done = [o for o in outcomes if o.agent == agent and o.error is None]
        failed = [o for o in outcomes if o.agent == agent and o.error is not None]
        agents[agent] = {
            "final_return": _stat(o.final_return for o in done),
            "final_win_rate": _stat(o.final_win_rate for o in done),
            "gvf_mse_first": _stat(o.gvf_first for o in done),
            "gvf_mse_final": _stat(o.gvf_final for o in done),
            "seeds": [
                {
                    "seed": o.seed,
                    "final_return": o.final_return,
                    "final_std": o.final_std,
                    "final_win_rate": o.final_win_rate,
                    "best_eval": o.result.best_eval,
                    "best_episode": o.result.best_episode,
                    "episodes_run": o.result.episodes_run,
                    "env_steps": o.result.env_steps,
                    "gvf_mse_first": o.gvf_first,
                    "gvf_mse_final": o.gvf_final,
                    "metrics_hash": metrics_hash(o.result.metrics),
                    "seconds": round(o.seconds, 1),
                }
                for o in done
            ],
            "failed": [{"seed": o.seed, "error": o.error} for o in failed],
        }
    doc = {"env": spec.env, "seeds": list(spec.seeds), "agents": agents}
    esp = agents.get("esp", {}).get("final_return", {}).get("mean")
    van = agents.get("vanilla-dqn", {}).get("final_return", {}).get("mean")
    if esp is not None and van:
        doc["esp_vs_vanilla_relative_gap"] = abs(esp - van) / abs(van)
    return doc


def run_experiment(spec: ExperimentSpec, out_dir, plot: bool = True) -> Path:
    """Train every (agent, seed), then write curves CSVs, ``summary.json`` and figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(a, s) for a in spec.agents for s in spec.seeds]

    def job(pair):
        agent, seed = pair
        return run_seed(spec, agent, seed, out_dir / agent / str(seed))

    if spec.workers > 1:
        with ThreadPoolExecutor(spec.workers) as pool:
            outcomes = list(pool.map(job, jobs))
    else:
        outcomes = [job(p) for p in jobs]

    curves = {}
    for agent in spec.agents:
        per_seed = [o.result.metrics for o in outcomes if o.agent == agent and o.error is None]
        if len(per_seed) < len(spec.seeds):
            log.warning("%s: aggregating %d of %d seeds", agent, len(per_seed), len(spec.seeds))
        curves[agent] = aggregate_curves(per_seed)
        write_curves_csv(out_dir / f"curves_{agent}.csv", curves[agent])
    summary = summarize(spec, outcomes)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if plot and any(curves.values()):
        from esp_rl.plotting import plot_curves

        plot_curves(curves, out_dir / "curves.png", title=spec.env)
    return out_dir
