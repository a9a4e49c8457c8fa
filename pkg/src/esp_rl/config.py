"""Run configuration: a YAML file plus flat ``--key value`` overrides.

Top-level keys describe the run; keys of the ``trainer`` section are the
``TrainerConfig`` fields, and ``table``/``evaluation`` hold the tabular learner
and ground-truth settings. A flat override ``--lr_gvf 3e-4`` lands in whichever
section owns the key, and overrides always win over the file.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from esp_rl.dqn import AGENTS, ConfigError, TrainerConfig

RUN_AGENTS = AGENTS + ("esp-table",)


@dataclass
class TableConfig:
    steps: int = 200_000
    K: int = 2000
    c: float = 10.0
    delta: float = 0.05  # hash cell width
    explore: str = "uniform"
    epsilon: float = 0.2
    sufficiency_samples: int = 50

    def validate(self) -> list[str]:
        problems = []
        if self.steps < 0:
            problems.append("steps: must be >= 0")
        if self.K < 1:
            problems.append("K: must be >= 1")
        if self.c <= 0:
            problems.append("c: must be positive")
        if self.delta <= 0:
            problems.append("delta: must be positive")
        if self.explore not in ("uniform", "epsilon"):
            problems.append(f"explore: {self.explore!r} not in ('uniform', 'epsilon')")
        return problems


@dataclass
class EvalConfig:
    test_states: int = 100
    rollouts: int = 64
    final_episodes: int = 100
    max_rollout_steps: int | None = None
    track_gvf: bool = True  # ground truth and GVF error at every evaluation (ESP runs)

    def validate(self) -> list[str]:
        problems = []
        if self.test_states < 1:
            problems.append("test_states: must be >= 1")
        if self.rollouts < 1:
            problems.append("rollouts: must be >= 1")
        if self.final_episodes < 0:
            problems.append("final_episodes: must be >= 0")
        return problems


@dataclass
class RunConfig:
    env: str = "cartpole"
    agent: str = "esp"
    seed: int = 1
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    agents: list[str] = field(default_factory=list)  # experiment: extra agents to compare
    runs_dir: str | None = None
    env_options: dict = field(default_factory=dict)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    table: TableConfig = field(default_factory=TableConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    workers: int = 1

    def validate(self) -> None:
        from esp_rl.envs import KNOWN_ENVS

        problems = []
        if self.env not in KNOWN_ENVS:
            problems.append(f"env: unknown environment {self.env!r}; known: {', '.join(KNOWN_ENVS)}")
        for a in [self.agent, *self.agents]:
            if a not in RUN_AGENTS:
                problems.append(f"agent: {a!r} not in {RUN_AGENTS}")
        if not self.seeds:
            problems.append("seeds: need at least one seed")
        if self.workers < 1:
            problems.append("workers: must be >= 1")
        problems += [f"table.{p}" for p in self.table.validate()]
        problems += [f"evaluation.{p}" for p in self.evaluation.validate()]
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "env": self.env,
            "agent": self.agent,
            "seed": self.seed,
            "seeds": list(self.seeds),
            "agents": list(self.agents),
            "runs_dir": self.runs_dir,
            "env_options": dict(self.env_options),
            "workers": self.workers,
            "trainer": self.trainer.to_dict(),
            "table": {f.name: getattr(self.table, f.name) for f in fields(TableConfig)},
            "evaluation": {f.name: getattr(self.evaluation, f.name) for f in fields(EvalConfig)},
        }


_SECTIONS = {"trainer": TrainerConfig, "table": TableConfig, "evaluation": EvalConfig}
_TOP = {f.name for f in fields(RunConfig)} - set(_SECTIONS)


def _owner(key: str) -> str | None:
    if key in _TOP:
        return None
    owners = [name for name, cls in _SECTIONS.items() if key in {f.name for f in fields(cls)}]
    if not owners:
        raise ConfigError(f"{key}: unknown configuration key")
    return owners[0]


def parse_value(text: str):
    """YAML scalar/list parsing for command-line values (``1e-3``, ``[64, 64]``, ``null``)."""
    try:
        v = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    # YAML 1.1 reads "1e-3" as a string
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return v
    return v


def merge(base: dict, overrides: dict) -> dict:
    """Apply flat (``key``) or dotted (``section.key``) overrides to a nested config dict."""
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        if not section:
            section = _owner(key)
        if section is None:
            out[name] = value
        else:
            if section not in _SECTIONS:
                raise ConfigError(f"{key}: unknown configuration section {section!r}")
            out.setdefault(section, {})[name] = value
    return out


def build_run_config(raw: dict) -> RunConfig:
    raw = dict(raw or {})
    unknown = sorted(set(raw) - _TOP - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        body = raw.pop(name, None) or {}
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: expected a mapping")
        known = {f.name for f in fields(cls)}
        bad = sorted(set(body) - known)
        if bad:
            raise ConfigError(f"unknown {name} fields: {', '.join(bad)}")
        try:
            sections[name] = cls(**body)
        except TypeError as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    if "seed" in raw and "seeds" not in raw:
        raw["seeds"] = [raw["seed"]]
    try:
        cfg = RunConfig(**raw, **sections)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.seeds = [int(s) for s in cfg.seeds]
    cfg.validate()
    return cfg


def load_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        builtin = resources.files("esp_rl") / "configs" / f"{path.stem}.yaml"
        if str(path) == path.stem and builtin.is_file():
            return yaml.safe_load(builtin.read_text()) or {}
        raise ConfigError(f"config file {path} not found")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File (or a bundled config name such as ``cartpole``) plus overrides."""
    raw = load_yaml(path) if path else {}
    return build_run_config(merge(raw, overrides or {}))


def builtin_configs() -> list[str]:
    root = resources.files("esp_rl") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))
