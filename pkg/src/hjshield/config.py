"""Structured run configuration: YAML file plus dotted-key flag overrides.

Every section maps onto one frozen dataclass. Unknown keys, wrong types and
cross-section inconsistencies raise ``ConfigError`` before any work starts.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .dynamics import DynamicsParams
from .env import EnvConfig, TaskSpec
from .learner import PPOConfig, TrainConfig, VAEConfig
from .reachability import GameParams, Grid3D
from .reward import RewardConfig

OUT_ENV_VAR = "HJSHIELD_OUT"


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-4
    max_iters: int = 2000
    cfl: float = 0.5

    def __post_init__(self):
        if self.tol <= 0 or self.max_iters < 1 or not 0 < self.cfl <= 1:
            raise ValueError("solver needs tol > 0, max_iters >= 1 and cfl in (0, 1]")


@dataclass(frozen=True)
class EnvSection:
    goal_tol: float = 0.15
    sigma_pos: float = 0.01
    sigma_theta: float = 0.01
    heading_gain: float = 2.0
    stop_and_stay: bool = True

    def __post_init__(self):
        if self.goal_tol <= 0 or self.sigma_pos < 0 or self.sigma_theta < 0 or self.heading_gain <= 0:
            raise ValueError("env needs goal_tol > 0, sigmas >= 0 and heading_gain > 0")


@dataclass(frozen=True)
class RewardSection:
    kind: str = "hj"
    k: float = 10.0
    safe_threshold: float = 1.0
    danger_threshold: float = 0.0
    wrong_interrupt_penalty: float = -5.0
    collision_penalty: float = -300.0
    success_bonus: float = 300.0


@dataclass(frozen=True)
class SupervisorConfig:
    kind: str = "classical"
    threshold: float = 0.05
    hysteresis: float = 0.1
    adopters: int | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        if self.kind not in ("none", "classical", "learned", "always_interrupt"):
            raise ValueError(f"unknown supervisor kind {self.kind!r}")
        if self.hysteresis < 0:
            raise ValueError("hysteresis must be non-negative")
        if self.adopters is not None and self.adopters < 0:
            raise ValueError("adopters must be non-negative")


@dataclass(frozen=True)
class RunSection:
    trials: int = 100
    repetitions: int = 5
    workers: int = 1
    write_traces: bool = True

    def __post_init__(self):
        if self.trials < 1 or self.repetitions < 1 or self.workers < 1:
            raise ValueError("trials, repetitions and workers must be positive")


@dataclass(frozen=True)
class AblateSection:
    agents: tuple = (4, 5, 6)
    scenario: str = "difficult"
    eval_episodes: int = 20

    def __post_init__(self):
        if not self.agents or any(int(n) < 2 for n in self.agents):
            raise ValueError("ablation agent counts must be >= 2")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str | None = None
    value_function: str | None = None
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    game: GameParams = field(default_factory=GameParams)
    grid: Grid3D = field(default_factory=Grid3D)
    solver: SolverConfig = field(default_factory=SolverConfig)
    env: EnvSection = field(default_factory=EnvSection)
    reward: RewardSection = field(default_factory=RewardSection)
    task: TaskSpec = field(default_factory=TaskSpec)
    vae: VAEConfig = field(default_factory=VAEConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    supervisor: SupervisorConfig = field(default_factory=SupervisorConfig)
    run: RunSection = field(default_factory=RunSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    # -- derived objects -------------------------------------------------------
    def output_root(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        return Path(os.environ.get(OUT_ENV_VAR) or "runs")

    def reward_config(self) -> RewardConfig:
        return RewardConfig(d=self.game.d, **asdict(self.reward))

    def env_config(self) -> EnvConfig:
        return EnvConfig(dynamics=self.dynamics, d=self.game.d, reward=self.reward_config(),
                         **asdict(self.env))

    def task_spec(self, **changes) -> TaskSpec:
        return dataclasses.replace(self.task, **changes) if changes else self.task

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# -- building dataclasses from plain data --------------------------------------

def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: cannot interpret {value!r} as {tp}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return build(tp, value, where)
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if tp is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    if tp is tuple or origin is tuple:
        if isinstance(value, (list, tuple)):
            return tuple(tuple(v) if isinstance(v, list) else v for v in value)
        raise ConfigError(f"{where}: expected a list, got {value!r}")
    if tp is dict:
        if isinstance(value, dict):
            return value
        raise ConfigError(f"{where}: expected a mapping, got {value!r}")
    return value


def build(cls, data: dict | None, where: str = ""):
    """Instantiate dataclass ``cls`` from ``data``, rejecting unknown keys and bad types."""
    data = dict(data or {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        sub = f"{where}.{k}" if where else k
        kwargs[k] = _coerce(hints[k], v, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def parse_override(text: str) -> tuple[list[str], object]:
    """``section.key=value`` with a YAML scalar/list value."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc
    return path, value


def apply_overrides(data: dict, overrides) -> dict:
    """Return a copy of ``data`` with each (path, value) pair set."""
    out = _plain(dict(data))
    for path, value in overrides:
        node = out
        for p in path[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"{'.'.join(path)}: {p} is not a section")
            node = nxt
        node[path[-1]] = value
    return out


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path=None, overrides=(), profile: dict | None = None) -> RunConfig:
    """Layer ``profile`` < YAML file < ``overrides``; flags win over file values."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    data = apply_overrides(_merge(_plain(profile or {}), data), overrides)
    cfg = build(RunConfig, data)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-section checks the per-section constructors cannot see."""
    try:
        cfg.reward_config()
        cfg.env_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if abs(cfg.game.v - cfg.dynamics.v_max) > 1e-12:
        raise ConfigError("game.v must equal dynamics.v_max (the value function assumes full-speed agents)")
    if abs(cfg.game.omega_max - cfg.dynamics.omega_max) > 1e-12:
        raise ConfigError("game.omega_max must equal dynamics.omega_max")
    if cfg.supervisor.adopters is not None and cfg.supervisor.adopters > cfg.task.n_agents:
        raise ConfigError("supervisor.adopters exceeds task.n_agents")
    if cfg.supervisor.kind == "learned" and not cfg.supervisor.checkpoint:
        raise ConfigError("supervisor.kind=learned needs supervisor.checkpoint")
    if cfg.ablate.scenario not in ("moderate", "difficult"):
        raise ConfigError(f"ablate.scenario: unknown scenario {cfg.ablate.scenario!r}")


# -- smoke training profile ---------------------------------------------------

SMOKE_PROFILE = {
    "vae": {"latent_dim": 8, "hidden": 32, "decoder_hidden": 32},
    "ppo": {"gamma": 0.95, "lam": 0.95, "heat_up_steps": 200, "rollout_rounds": 30,
            "lr_vae": 1e-3, "lr_critic": 1e-3, "lr_policy": 1e-3, "init_default_prob": 0.5},
    "train": {"rounds": 10, "eval_episodes": 100, "eval_every": 5},
    "task": {"n_agents": 3, "scenario": "moderate"},
}


__all__ = [
    "ConfigError", "RunConfig", "SolverConfig", "EnvSection", "RewardSection", "SupervisorConfig",
    "RunSection", "AblateSection", "build", "load_config", "parse_override", "apply_overrides",
    "validate", "OUT_ENV_VAR", "SMOKE_PROFILE",
]
