"""Run configuration: defaults, YAML/JSON file, environment, flags.

Later sources win: flags > environment variables > config file > defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .grpo import GrpoConfig
from .perception import EncoderProfile
from .reward import PROFILES, InvalidWeights, RewardWeights
from .toy import TOY_LEARNING_RATE
from .trajectory import RolloutConfig

ENV_VARS = {
    "VRAG_POLICY_URL": "policy.endpoint",
    "VRAG_JUDGE_URL": "judge.endpoint",
    "VRAG_SEARCH_URL": "search_endpoint",
}


class ConfigError(ValueError):
    """Carries the dotted name of the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class PolicySpec:
    kind: str = "oracle"  # oracle | endpoint
    endpoint: Optional[str] = None
    model: str = "default"
    timeout: float = 120.0
    backoff: float = 1.0


@dataclass
class JudgeSpec:
    kind: str = "exact-match"  # exact-match | endpoint
    endpoint: Optional[str] = None
    model: str = "default"
    timeout: float = 60.0
    attempts: int = 3
    backoff: float = 1.0


@dataclass
class ToySpec:
    steps: int = 500
    learning_rate: float = TOY_LEARNING_RATE
    n_docs: int = 8
    max_steps: int = 3


@dataclass
class SynthesisSpec:
    guide: str = "oracle"  # oracle | endpoint URL
    grounder: str = "oracle"
    targets: dict = field(default_factory=lambda: {"2": 4})
    max_attempts: Optional[int] = None
    workers: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    corpus: Optional[str] = None
    search_endpoint: Optional[str] = None
    out: str = "runs/latest"
    system_prompt: str = "agent"
    weights_profile: str = "post-sft"
    weights: Optional[list] = None
    policy: PolicySpec = field(default_factory=PolicySpec)
    judge: JudgeSpec = field(default_factory=JudgeSpec)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    encoder: EncoderProfile = field(default_factory=EncoderProfile)
    toy: ToySpec = field(default_factory=ToySpec)
    synthesis: SynthesisSpec = field(default_factory=SynthesisSpec)
    workers: int = 1

    def reward_weights(self) -> RewardWeights:
        if self.weights_profile == "custom":
            if not self.weights or len(self.weights) != 3:
                raise ConfigError("weights", "custom profile needs [alpha, beta, gamma]")
            try:
                return RewardWeights(*map(float, self.weights))
            except InvalidWeights as exc:
                raise ConfigError("weights", str(exc)) from exc
        return PROFILES[self.weights_profile]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that affects outputs (the output directory does not)."""
        data = self.to_dict()
        data.pop("out")
        data.pop("workers")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "policy": PolicySpec,
    "judge": JudgeSpec,
    "rollout": RolloutConfig,
    "grpo": GrpoConfig,
    "encoder": EncoderProfile,
    "toy": ToySpec,
    "synthesis": SynthesisSpec,
}


def _set(data: dict, dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = data
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "targets":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(data: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown field")
    kwargs = {}
    for key, value in data.items():
        cls = _SECTIONS.get(key)
        if cls is None:
            kwargs[key] = value
            continue
        if not isinstance(value, dict):
            raise ConfigError(key, "expected a mapping")
        names = {f.name for f in dataclasses.fields(cls)}
        for sub in value:
            if sub not in names:
                raise ConfigError(f"{key}.{sub}", "unknown field")
        try:
            kwargs[key] = cls(**value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, str(exc)) from exc
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from exc


def load_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError("config", f"file not found: {path}")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    return data


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    data: dict = {}
    for var, dotted in ENV_VARS.items():
        if environ.get(var):
            _set(data, dotted, environ[var])
            if dotted in ("policy.endpoint", "judge.endpoint"):
                _set(data, dotted.split(".")[0] + ".kind", "endpoint")
    return data


def resolve(file_path: Optional[str] = None, flags: Optional[dict] = None, environ=None) -> RunConfig:
    """Effective config. ``flags`` uses dotted keys, e.g. ``{"grpo.group_size": 8}``."""
    data = _merge(load_file(file_path), env_overrides(environ))
    flag_data: dict = {}
    for dotted, value in (flags or {}).items():
        if value is not None:
            _set(flag_data, dotted, value)
    data = _merge(data, flag_data)
    config = _build(data)
    validate(config)
    return config


def from_dict(data: dict) -> RunConfig:
    config = _build(data)
    validate(config)
    return config


def validate(config: RunConfig, need_corpus: bool = False) -> None:
    from .prompts import PROMPTS

    if config.weights_profile not in (*PROFILES, "custom"):
        raise ConfigError("weights_profile", f"expected one of {sorted(PROFILES) + ['custom']}")
    config.reward_weights()
    if config.system_prompt not in PROMPTS:
        raise ConfigError("system_prompt", f"expected one of {sorted(PROMPTS)}")
    if config.policy.kind not in ("oracle", "endpoint"):
        raise ConfigError("policy.kind", "expected oracle or endpoint")
    if config.policy.kind == "endpoint" and not config.policy.endpoint:
        raise ConfigError("policy.endpoint", "required when policy.kind is endpoint")
    if config.judge.kind not in ("exact-match", "endpoint"):
        raise ConfigError("judge.kind", "expected exact-match or endpoint")
    if config.judge.kind == "endpoint" and not config.judge.endpoint:
        raise ConfigError("judge.endpoint", "required when judge.kind is endpoint")
    if config.judge.attempts < 1:
        raise ConfigError("judge.attempts", "must be >= 1")
    if config.toy.steps < 0:
        raise ConfigError("toy.steps", "must be >= 0")
    if config.toy.learning_rate < 0:
        raise ConfigError("toy.learning_rate", "must be >= 0")
    if need_corpus:
        require_corpus(config)


def require_corpus(config: RunConfig) -> Path:
    if not config.corpus:
        raise ConfigError("corpus", "required (pass --corpus or set it in the config file)")
    path = Path(config.corpus)
    if not (path / "manifest.json").exists() and not (path.is_file() and path.suffix == ".json"):
        raise ConfigError("corpus", f"no corpus manifest at {config.corpus}")
    return path
