"""``esp-rl`` command line: train, eval, explain, oracle, experiment.

Any ``--key value`` flag not listed for a subcommand overrides the config key
of the same name (``--lr_gvf 3e-4``, ``--trainer.episodes 50``). Exit codes:
0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

import esp_rl
from esp_rl.config import ConfigError, load_run_config, parse_value
from esp_rl.envs import EnvError, UnsupportedError, enumerate_mdp, load_trajectory, make_env
from esp_rl.rng import Rng

log = logging.getLogger("esp_rl")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


class UsageError(ValueError):
    """Bad command-line input; reported with exit code 2."""


# -- helpers -----------------------------------------------------------------


def runs_root(cfg_runs_dir: str | None = None) -> Path:
    if cfg_runs_dir:
        return Path(cfg_runs_dir)
    return Path(os.environ.get("ESP_RL_RUNS_DIR", "runs"))


def make_run_dir(root: Path, env: str, agent: str, seed: int) -> Path:
    """``<root>/<env>/<agent>/<seed>/<timestamp>/``; a numeric suffix keeps reruns apart."""
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = root / env.replace(":", "-") / agent / str(seed)
    path = base / stamp
    k = 1
    while path.exists():
        path = base / f"{stamp}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def versions() -> dict:
    return {"esp_rl": esp_rl.__version__, "python": platform.python_version(), "numpy": np.__version__}


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parse_overrides(extra: list[str]) -> dict:
    """``--key value`` pairs (or ``--key=value``) left over by argparse."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra) or extra[i + 1].startswith("--"):
                raise ConfigError(f"--{key}: missing value")
            value = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = parse_value(value)
    return out


def resolve_checkpoint(name: str) -> Path:
    """A path, or the name of a bundled checkpoint such as ``cartpole``."""
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("esp_rl") / "data" / f"{name}.json"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"checkpoint {name!r} not found")


def env_for_model(model, options: dict | None = None):
    d = model.descriptor
    return make_env(d.name, d.beta, d.gamma, **(options or {}))


# -- train -------------------------------------------------------------------


def cmd_train(args, overrides: dict) -> int:
    from esp_rl.dqn import metrics_hash, run_training

    cfg = load_run_config(args.config, overrides)
    env = make_env(cfg.env, cfg.trainer.beta, cfg.trainer.gamma, **cfg.env_options)
    out = Path(args.out) if args.out else make_run_dir(runs_root(cfg.runs_dir), cfg.env, cfg.agent, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {"command": "train", "seed": cfg.seed, "config": cfg.to_dict(), "versions": versions()})
    if cfg.agent == "esp-table":
        summary = train_table(env, cfg, out)
    else:
        trainer_cfg = cfg.trainer
        if trainer_cfg.agent != cfg.agent:
            from esp_rl.dqn import TrainerConfig

            trainer_cfg = TrainerConfig.from_dict({**trainer_cfg.to_dict(), "agent": cfg.agent})

        def progress(row):
            log.info("episode %d steps %d return %.2f", row["episode"], row["env_steps"], row["eval_mean_return"])

        res = run_training(env, trainer_cfg, Rng(cfg.seed), out, seed=cfg.seed, progress=progress)
        summary = {
            "env": cfg.env,
            "agent": cfg.agent,
            "seed": cfg.seed,
            "episodes_run": res.episodes_run,
            "env_steps": res.env_steps,
            "best_eval": res.best_eval,
            "best_episode": res.best_episode,
            "checkpoints": [p.name for p in res.checkpoints],
            "metrics_hash": metrics_hash(res.metrics),
        }
    write_json(out / "summary.json", summary)
    print(out)
    return EXIT_OK


def train_table(env, cfg, out: Path) -> dict:
    """ESP-Table on an enumerated tabular env, compared against the DP oracles."""
    from esp_rl.table import (
        QuantizingHash,
        TabularEsp,
        bellman_sufficiency_check,
        gvf_bounds,
        gvf_policy_eval,
        run_esp_table,
        tables_to_json,
        value_iteration,
    )

    try:
        mdp = enumerate_mdp(env)
    except UnsupportedError as exc:
        raise ConfigError(f"agent esp-table needs a tabular env: {exc}") from exc
    tc = cfg.table
    lo, hi = gvf_bounds(mdp)
    h = QuantizingHash(tc.delta, lo, hi)
    rng = Rng(cfg.seed)
    suff = bellman_sufficiency_check(mdp, h, tc.sufficiency_samples, rng.child("sufficiency"))
    table = TabularEsp(mdp.n_states, mdp.n_actions, h, mdp.beta, mdp.gamma, K=tc.K, c=tc.c)
    run_esp_table(mdp, table, tc.steps, rng.child("stream"), epsilon=tc.epsilon, explore=tc.explore)
    Q = value_iteration(mdp)
    live = ~mdp.terminal
    learned = table.policy()
    # a learned action counts as optimal if it attains the optimal value (ties allowed)
    optimal = Q[np.arange(mdp.n_states), learned] >= Q.max(axis=1) - 1e-9
    QF = gvf_policy_eval(mdp, learned)
    gvf_err = float(np.max(np.abs(table.gvf - QF)[live])) if live.any() else 0.0
    tables_to_json(out / "tables.json", table.to_dict())
    summary = {
        "env": cfg.env,
        "agent": "esp-table",
        "seed": cfg.seed,
        "steps": tc.steps,
        "policy_optimal": bool(optimal[live].all()),
        "suboptimal_states": [int(s) for s in np.flatnonzero(live & ~optimal)],
        "gvf_max_error": gvf_err,
        "q_max_error": float(np.max(np.abs(table.q_table() - Q)[live])) if live.any() else 0.0,
        "sufficiency_ok": suff.ok,
        "sufficiency_violations": len(suff.violations),
    }
    write_json(out / "oracle_summary.json", summary)
    return summary


# -- eval --------------------------------------------------------------------


def cmd_eval(args, overrides: dict) -> int:
    from esp_rl.evaluation import evaluate_policy, gvf_mse
    from esp_rl.experiment import ground_truth
    from esp_rl.config import EvalConfig
    from esp_rl.model import load_model

    if overrides:
        raise ConfigError(f"eval does not take config overrides: {', '.join(overrides)}")
    model, payload = load_model(resolve_checkpoint(args.checkpoint))
    env = env_for_model(model)
    rng = Rng(args.seed)
    ev = evaluate_policy(env, model, args.episodes, rng.child("eval"))
    doc = {
        "checkpoint": str(args.checkpoint),
        "env": model.descriptor.name,
        "agent": model.kind,
        "seed": args.seed,
        "episodes": args.episodes,
        "mean_return": ev.mean_return,
        "std_return": ev.std_return,
        "win_rate": ev.win_rate,
        "returns": ev.returns,
    }
    if args.gvf and model.kind == "esp":
        truth = ground_truth(env, model, EvalConfig(test_states=args.test_states, rollouts=args.rollouts), rng.child("gvf"))
        doc["gvf_mse"] = gvf_mse(model, truth)
        doc["gvf_test_states"] = len(truth.states)
    out = Path(args.out) if args.out else make_run_dir(runs_root(), model.descriptor.name, model.kind, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "eval.json", doc)
    print(f"mean return {ev.mean_return:.3f} +/- {ev.std_return:.3f}" + (f", win rate {ev.win_rate:.3f}" if ev.win_rate is not None else ""))
    print(out)
    return EXIT_OK


# -- explain -----------------------------------------------------------------


def explain_state(env, model, args):
    """State chosen by ``--state``, ``--trajectory/--index`` or ``--seed/--step``."""
    if args.state:
        return env.state_from_json(json.loads(Path(args.state).read_text()))
    if args.trajectory:
        rows = load_trajectory(env, args.trajectory)
        if not 0 <= args.index < len(rows):
            raise UsageError(f"--index {args.index} outside 0..{len(rows) - 1}")
        return rows[args.index][0]
    from esp_rl.evaluation import greedy_actions

    r = Rng(args.seed).child("explain")
    s = env.reset(r)
    for t in range(args.step):
        out = env.step(s, greedy_actions(env, model, [s])[0], r)
        if out.done:
            raise UsageError(f"episode ended after {t + 1} steps, before --step {args.step}")
        s = out.next_state
    return s


def cmd_explain(args, overrides: dict) -> int:
    from esp_rl.explain import ExplanationError, explain_all_pairs, igx, render_report
    from esp_rl.model import load_model

    if overrides:
        raise ConfigError(f"explain does not take config overrides: {', '.join(overrides)}")
    model, _ = load_model(resolve_checkpoint(args.checkpoint))
    if model.kind != "esp":
        raise ConfigError(f"explanations need an ESP checkpoint, got {model.kind}")
    env = env_for_model(model)
    state = explain_state(env, model, args)
    obs = env.observe(state)
    mask = env.action_mask(state) if env.masked else None
    try:
        if args.all_pairs:
            explanations = explain_all_pairs(model, obs, args.steps, mask)
        else:
            q = model.q_values(obs)
            ranked = [int(i) for i in np.argsort(-q, kind="stable")]
            a = ranked[0] if args.a is None else args.a
            b = (ranked[1] if ranked[0] == a else ranked[0]) if args.b is None else args.b
            if a == b:
                raise UsageError("actions a and b must differ")
            explanations = [igx(model, obs, a, b, args.steps)]
    except ExplanationError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out) if args.out else make_run_dir(runs_root(), model.descriptor.name, "explain", args.seed)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for e in explanations:
        js, txt = render_report(e, model.descriptor)
        stem = f"report_{e.action_a}_{e.action_b}"
        (out / f"{stem}.json").write_text(js)
        (out / f"{stem}.txt").write_text(txt)
        hashes[stem] = hashlib.sha256(js.encode()).hexdigest()
        if not args.no_plot:
            from esp_rl.plotting import plot_explanation

            plot_explanation(e, out / f"{stem}.png", model.descriptor.action_names)
        print(txt, end="")
    write_json(out / "reports.json", {"state": env.state_to_json(state), "steps": args.steps, "report_hashes": hashes})
    print(out)
    return EXIT_OK


# -- oracle ------------------------------------------------------------------


def cmd_oracle(args, overrides: dict) -> int:
    from esp_rl.table import (
        QuantizingHash,
        bellman_sufficiency_check,
        greedy_policy,
        gvf_bounds,
        gvf_policy_eval,
        oracle_tables_json,
        value_iteration,
    )

    if overrides:
        raise ConfigError(f"oracle does not take config overrides: {', '.join(overrides)}")
    env = make_env(args.env, args.beta, args.gamma)
    try:
        mdp = enumerate_mdp(env)
    except UnsupportedError as exc:
        raise ConfigError(str(exc)) from exc
    Q = value_iteration(mdp)
    pi = greedy_policy(Q)
    QF = gvf_policy_eval(mdp, pi)
    lo, hi = gvf_bounds(mdp)
    if args.single_cell:
        h = QuantizingHash(np.maximum(hi - lo, 1e-12) * 2.0, lo, hi)
    else:
        h = QuantizingHash(args.delta, lo, hi)
    report = bellman_sufficiency_check(mdp, h, args.samples, Rng(args.seed).child("sufficiency"))
    doc = oracle_tables_json(mdp, Q, QF, pi)
    doc["env"] = args.env
    doc["terminal"] = [bool(t) for t in mdp.terminal]
    doc["sufficiency"] = {"delta": h.to_dict()["delta"], **report.to_dict()}
    out = Path(args.out) if args.out else make_run_dir(runs_root(), args.env, "oracle", args.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "oracle.json", doc)
    print(f"{args.env}: {mdp.n_states} states, sufficiency violations {len(report.violations)}")
    print(out)
    return EXIT_OK


# -- experiment --------------------------------------------------------------


def cmd_experiment(args, overrides: dict) -> int:
    from esp_rl.experiment import ExperimentSpec, run_experiment

    cfg = load_run_config(args.config, overrides)
    if cfg.agent == "esp-table" or "esp-table" in cfg.agents:
        raise ConfigError("agent: experiments run the DQN-family agents")
    spec = ExperimentSpec.from_run_config(cfg)
    out = Path(args.out) if args.out else make_run_dir(runs_root(cfg.runs_dir), cfg.env, "experiment", 0)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {"command": "experiment", "config": cfg.to_dict(), "versions": versions()})
    run_experiment(spec, out, plot=not args.no_plot)
    summary = json.loads((out / "summary.json").read_text())
    for agent, s in summary["agents"].items():
        fr = s["final_return"]
        if fr["n"]:
            print(f"{agent}: final return {fr['mean']:.2f} +/- {fr['std']:.2f} over {fr['n']} seeds")
        for f in s["failed"]:
            print(f"{agent}: seed {f['seed']} failed: {f['error']}")
    print(out)
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esp-rl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one agent; extra --key value flags override the config")
    t.add_argument("--config", help="YAML file or bundled config name (cartpole, minitow, gridworld)")
    t.add_argument("--out", help="explicit run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--gvf", action="store_true", help="also measure GVF error against Monte-Carlo ground truth")
    e.add_argument("--test-states", type=int, default=100)
    e.add_argument("--rollouts", type=int, default=64)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="contrastive explanation reports for one state")
    x.add_argument("--checkpoint", required=True, help="checkpoint path or bundled name (cartpole)")
    x.add_argument("--state", help="JSON file holding one environment state")
    x.add_argument("--trajectory", help="JSONL trajectory file")
    x.add_argument("--index", type=int, default=0)
    x.add_argument("--seed", type=int, default=0, help="episode seed when the state comes from a greedy rollout")
    x.add_argument("--step", type=int, default=0)
    x.add_argument("--a", type=int, help="preferred action (default: greedy)")
    x.add_argument("--b", type=int, help="alternative action (default: best other)")
    x.add_argument("--all-pairs", action="store_true")
    x.add_argument("--steps", type=int, default=30, help="Riemann steps for integrated gradients")
    x.add_argument("--no-plot", action="store_true")
    x.add_argument("--out")
    x.set_defaults(func=cmd_explain)

    o = sub.add_parser("oracle", help="exact DP tables and a sufficiency report for a tabular env")
    o.add_argument("--env", required=True)
    o.add_argument("--beta", type=float)
    o.add_argument("--gamma", type=float)
    o.add_argument("--delta", type=float, default=0.05, help="hash cell width")
    o.add_argument("--single-cell", action="store_true", help="use a hash with one cell")
    o.add_argument("--samples", type=int, default=50)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    m = sub.add_parser("experiment", help="multi-seed comparison with curves, summary and figures")
    m.add_argument("--config")
    m.add_argument("--out")
    m.add_argument("--no-plot", action="store_true")
    m.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(extra)
        return args.func(args, overrides)
    except (ConfigError, EnvError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
