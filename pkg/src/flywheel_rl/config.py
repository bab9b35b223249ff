"""Experiment configuration: defaults, file, environment and flag layering.

Precedence, highest first: command-line overrides, environment variables,
the config file, built-in defaults.  Environment variables are
``FLYWHEEL_SEED`` (global seed) and ``FLYWHEEL_<SECTION>__<KEY>`` for any
section key, e.g. ``FLYWHEEL_PPO__LEARNING_RATE=1e-4``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .distill import DistillConfig
from .errors import ConfigError, ContractViolation
from .expert import ExpertConfig
from .flywheel import FlywheelConfig
from .ppo_bc import PpoBcConfig

ENV_PREFIX = "FLYWHEEL_"


@dataclass(frozen=True)
class EnvFamilyConfig:
    count: int = 20
    family_seed: int = 1
    heldout_count: int = 20
    heldout_start: int = 1000


@dataclass(frozen=True)
class EvalConfig:
    rollouts_per_env: int = 20
    deterministic: bool = False
    disturbance_step: int = 10
    multi_objects: int = 3
    multi_episodes: int = 6


@dataclass(frozen=True)
class FlywheelSection:
    batch_size_K: int = 5
    success_threshold_r: float = 0.5
    model_demo_target: int = 10
    model_demo_attempt_cap: int = 100
    demos_per_env_human: int = 10
    rl_budget: int = 500_000
    eval_rollouts_per_env: int = 20
    heldout_rollouts_per_env: int = 10
    scan_max_rounds: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    run_name: str = "default"
    parallelism: int = 1
    env: EnvFamilyConfig = field(default_factory=EnvFamilyConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    ppo: PpoBcConfig = field(default_factory=PpoBcConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    flywheel: FlywheelSection = field(default_factory=FlywheelSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_name

    def flywheel_config(self) -> FlywheelConfig:
        return FlywheelConfig(**dataclasses.asdict(self.flywheel), ppo=self.ppo, distill=self.distill,
                              expert=self.expert)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _section_type(name: str):
    f = SECTIONS[name]
    return f.default_factory if f.default_factory is not dataclasses.MISSING else None


def _coerce(value: Any, default: Any, path: str):
    """Convert ``value`` to the type of ``default``; strings are parsed as YAML scalars/lists."""
    if isinstance(value, str) and not isinstance(default, str):
        try:
            # YAML 1.1 reads "2e-3" as a string; plain float() does not
            value = float(value) if (isinstance(default, float) or default is None) and _is_float(value) else yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {path}: {exc}", path) from exc
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} expects a boolean, got {value!r}", path)
        return value
    if isinstance(default, int) and default is not None and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path} expects an integer, got {value!r}", path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} expects a number, got {value!r}", path)
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} expects a list, got {value!r}", path)
        return tuple(int(x) for x in value)
    if isinstance(default, str):
        return str(value)
    if default is None:
        # optional numeric fields (e.g. ppo.target_success)
        if value is None or isinstance(value, (int, float)) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{path} expects a number or null, got {value!r}", path)
    return value


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _flat_defaults() -> dict[str, Any]:
    out = {}
    base = ExperimentConfig()
    for name, f in SECTIONS.items():
        v = getattr(base, name)
        if dataclasses.is_dataclass(v):
            for sf in dataclasses.fields(v):
                out[f"{name}.{sf.name}"] = getattr(v, sf.name)
        else:
            out[name] = v
    return out


DEFAULTS = _flat_defaults()


def _flatten(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        path = f"{prefix}{k}"
        if isinstance(v, Mapping):
            if path not in SECTIONS:
                raise ConfigError(f"unknown config key {path}", path)
            out.update(_flatten(v, path + "."))
        else:
            out[path] = v
    return out


def load_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}", str(p))
    text = p.read_text()
    try:
        tree = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"malformed config file {p}: {exc}", str(p)) from exc
    if tree is None:
        return {}
    if not isinstance(tree, Mapping):
        raise ConfigError(f"config file {p} must hold a mapping", str(p))
    return _flatten(tree)


def env_overrides(environ: Mapping[str, str]) -> dict[str, str]:
    out = {}
    for k, v in environ.items():
        if not k.startswith(ENV_PREFIX):
            continue
        rest = k[len(ENV_PREFIX):].lower()
        if rest in ("pure_python",):
            continue  # backend selector, not a config key
        out[rest.replace("__", ".")] = v
    return out


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    """``["ppo.learning_rate=1e-4", ...]`` -> mapping."""
    out = {}
    for it in items or []:
        if "=" not in it:
            raise ConfigError(f"override {it!r} is not of the form key=value", it)
        k, v = it.split("=", 1)
        out[k.strip()] = v
    return out


def parse_config(path: str | Path | None = None, cli_overrides: Mapping[str, Any] | None = None,
                 environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    merged: dict[str, Any] = {}
    for layer in (load_file(path), env_overrides(environ), dict(cli_overrides or {})):
        for k, v in layer.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k}", k)
            merged[k] = _coerce(v, DEFAULTS[k], k)
    top, sections = {}, {}
    for k, v in merged.items():
        if "." in k:
            s, key = k.split(".", 1)
            sections.setdefault(s, {})[key] = v
        else:
            top[k] = v
    try:
        built = {s: dataclasses.replace(getattr(ExperimentConfig(), s), **kv) for s, kv in sections.items()}
        return ExperimentConfig(**top, **built)
    except ContractViolation as exc:
        raise ConfigError(str(exc), next(iter(sections), "")) from exc


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
