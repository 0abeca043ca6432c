"""Run configuration: nested dataclasses loaded from (and printed as) TOML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .algos import ALGOS
from .envs import ENVS
from .flow import SAMPLERS, SCHEDULES, WEIGHTINGS
from .policies import MC_PARAMS
from .rollout import ADV_MODES


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    env: str = "gridworld"
    algo: str = "fpo"
    seed: int = 0
    num_envs: int = 256
    unroll: int = 30
    total_env_steps: int = 1_500_000
    eval_every: int = 10
    eval_episodes: int = 64
    target_success: float = 0.0


@dataclass
class PolicySection:
    hidden: list = field(default_factory=lambda: [64, 64])
    value_hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    init_log_std: float = 0.0


@dataclass
class FlowSection:
    schedule: str = "ot_linear"
    mc_weighting: str = "uniform"
    mc_param: str = "eps_mse"
    n_mc: int = 8
    tau_min: float = 1e-3


@dataclass
class SamplerSection:
    method: str = "euler"
    n_steps: int = 10
    churn_std: float = 0.0


@dataclass
class GaeSection:
    gamma: float = 0.995
    lam: float = 0.95
    reward_scale: float = 10.0


@dataclass
class OptimSection:
    lr: float = 3e-4
    epochs: int = 16
    n_minibatches: int = 32
    value_coef: float = 0.25
    value_clip: float = 0.0
    max_grad_norm: float = 1.0
    adv_mode: str = "zscore"
    adv_floor: float = 0.0


@dataclass
class FpoSection:
    clip_eps: float = 0.05
    log_ratio_clamp: float = 20.0


@dataclass
class PpoSection:
    clip_eps: float = 0.1
    entropy_coef: float = 0.01


@dataclass
class DppoSection:
    clip_eps: float = 0.2
    churn_std: float = 0.05


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    policy: PolicySection = field(default_factory=PolicySection)
    flow: FlowSection = field(default_factory=FlowSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    gae: GaeSection = field(default_factory=GaeSection)
    optim: OptimSection = field(default_factory=OptimSection)
    fpo: FpoSection = field(default_factory=FpoSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    dppo: DppoSection = field(default_factory=DppoSection)

    @property
    def batch_env_steps(self) -> int:
        return self.run.num_envs * self.run.unroll

    @property
    def n_batches(self) -> int:
        return self.run.total_env_steps // self.batch_env_steps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        r = self.run
        _choice("run.env", r.env, tuple(ENVS))
        _choice("run.algo", r.algo, ALGOS)
        _choice("flow.schedule", self.flow.schedule, SCHEDULES)
        _choice("flow.mc_weighting", self.flow.mc_weighting, WEIGHTINGS)
        _choice("flow.mc_param", self.flow.mc_param, MC_PARAMS)
        _choice("sampler.method", self.sampler.method, SAMPLERS)
        _choice("optim.adv_mode", self.optim.adv_mode, ADV_MODES)
        _choice("policy.activation", self.policy.activation, ("tanh", "swish"))
        for name, val in [("run.num_envs", r.num_envs), ("run.unroll", r.unroll),
                          ("flow.n_mc", self.flow.n_mc), ("sampler.n_steps", self.sampler.n_steps),
                          ("run.eval_every", r.eval_every)]:
            if int(val) != val or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}")
        if r.total_env_steps < 0 or r.eval_episodes < 0:
            raise ConfigError("run.total_env_steps and run.eval_episodes must be >= 0")
        for name, val in [("fpo.clip_eps", self.fpo.clip_eps), ("ppo.clip_eps", self.ppo.clip_eps),
                          ("dppo.clip_eps", self.dppo.clip_eps), ("optim.lr", self.optim.lr)]:
            if val <= 0:
                raise ConfigError(f"{name} must be > 0")
        if r.algo == "dppo" and self.dppo.churn_std <= 0:
            raise ConfigError("dppo.churn_std must be > 0")
        if not 0 <= self.gae.gamma <= 1 or not 0 <= self.gae.lam <= 1:
            raise ConfigError("gae.gamma and gae.lam must lie in [0, 1]")
        return self


def _choice(name: str, value, options) -> None:
    if value not in options:
        raise ConfigError(f"{name} = {value!r}; expected one of {list(options)}")


def _coerce(name: str, default, value):
    if isinstance(default, bool) or isinstance(value, bool):
        if not isinstance(value, bool) or not isinstance(default, bool):
            raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return list(value)
    if type(value) is not type(default):
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}")
    return value


def from_dict(data: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Build a config from nested mappings; unknown sections or keys are errors."""
    cfg = base or RunConfig()
    cfg = RunConfig(**{f.name: dataclasses.replace(getattr(cfg, f.name)) for f in fields(cfg)})
    known = {f.name for f in fields(cfg)}
    for section, values in data.items():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        sec = getattr(cfg, section)
        keys = {f.name for f in fields(sec)}
        for key, val in values.items():
            if key not in keys:
                raise ConfigError(f"unknown config key {section}.{key}")
            setattr(sec, key, _coerce(f"{section}.{key}", getattr(sec, key), val))
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def with_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply dotted-key overrides such as ``{"fpo.clip_eps": 0.1}``."""
    nested: dict[str, dict] = {}
    for key, val in overrides.items():
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = key.split(".", 1)
        nested.setdefault(section, {})[name] = val
    return from_dict(nested, base=cfg)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def to_toml(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(to_toml(cfg))
