from __future__ import annotations

import enum
import hashlib
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from aggchain.errors import ConfigError
from aggchain.sim import Behavior, max_faulty

REPO_ROOT = Path(__file__).resolve().parents[1]
load_dotenv(dotenv_path=REPO_ROOT / ".env")

DEFAULT_OUT_DIR = Path("runs")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class Settings(BaseModel):
    out_dir: Path = DEFAULT_OUT_DIR
    log_level: str = "INFO"

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, v: str) -> str:
        level = v.strip().upper()
        if level not in LOG_LEVELS:
            raise ValueError(f"AGGCHAIN_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {v!r}")
        return level


def load_settings() -> Settings:
    out = os.environ.get("AGGCHAIN_OUT_DIR", "").strip()
    level = os.environ.get("AGGCHAIN_LOG_LEVEL", "").strip()
    try:
        return Settings(
            out_dir=Path(out) if out else DEFAULT_OUT_DIR,
            log_level=level or "INFO",
        )
    except ValidationError as exc:
        msg = (
            f"Invalid environment settings:\n{exc}\n\n"
            "How to fix:\n"
            "1) Copy .env.example to .env\n"
            "2) Set AGGCHAIN_OUT_DIR / AGGCHAIN_LOG_LEVEL there (or unset them)\n"
        )
        raise ConfigError(msg) from None


def resolve_out_dir(flag: str | Path | None) -> Path:
    """``--out`` wins over ``AGGCHAIN_OUT_DIR``, which wins over ``./runs``."""
    if flag:
        return Path(flag)
    return load_settings().out_dir


# ---------------------------------------------------------------------------
# scenario configuration


class StrategyMode(str, enum.Enum):
    FIXED = "fixed"
    RANDOM = "random"
    LEARNED = "learned"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TaskConfig(_Section):
    model: Literal["logistic", "mlp"] = "logistic"
    n_classes: int = Field(4, ge=2)
    dim: int = Field(8, ge=1)
    n_train: int = Field(3000, ge=2)
    n_test: int = Field(500, ge=1)
    separation: float = Field(3.0, gt=0)
    clusters_per_class: int = Field(1, ge=1, le=2)
    skew: float = Field(0.5, gt=0)
    hidden: int = Field(16, ge=1)
    lr: float = Field(0.05, gt=0)
    batch_size: int = Field(10, ge=1)
    l2: float = Field(0.0, ge=0)


class ConsensusConfig(_Section):
    delta1: float = 2.0
    delta2: float = 1.0
    # per phase, as a fraction of the block interval
    phase_timeout: float = Field(0.25, gt=0, le=1.0 / 3.0)
    latency: float = Field(0.0, ge=0)
    loss_rate: float = Field(0.0, ge=0, lt=1)
    assert_safety: bool = False

    @model_validator(mode="after")
    def _ordered_steps(self) -> ConsensusConfig:
        if not self.delta1 > self.delta2 > 0:
            raise ValueError(f"need delta1 > delta2 > 0, got {self.delta1}, {self.delta2}")
        return self


class OffloadConfig(_Section):
    enabled: bool = True
    sigma: float = -4.0


class DrlConfig(_Section):
    gamma: float = Field(0.9, ge=0, le=1)
    tau: float = Field(0.01, gt=0, le=1)
    batch_size: int = Field(32, ge=1)
    capacity: int = Field(10_000, ge=1)
    actor_lr: float = Field(1e-4, gt=0)
    critic_lr: float = Field(1e-3, gt=0)
    hidden: int = Field(32, ge=1)
    noise: float = Field(0.1, ge=0)
    explore_start: float = Field(1.0, ge=0)
    explore_end: float = Field(0.1, ge=0)
    p: float = Field(1.0, gt=0)
    q: float = Field(1.0, gt=0)


class ServerConfig(_Section):
    cpu_speeds: tuple[float, ...]
    faults: tuple[Behavior, ...] = ()
    # 1-based trainer number -> behavior
    trainer_faults: dict[int, Behavior] = Field(default_factory=dict)

    @field_validator("cpu_speeds")
    @classmethod
    def _positive_speeds(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if not v:
            raise ValueError("a server needs at least one trainer")
        if any(c <= 0 for c in v):
            raise ValueError(f"cpu speeds must be > 0, got {list(v)}")
        return v

    @field_validator("faults")
    @classmethod
    def _sorted_faults(cls, v: tuple[Behavior, ...]) -> tuple[Behavior, ...]:
        cleaned = sorted({b for b in v if b is not Behavior.HONEST}, key=lambda b: b.value)
        return tuple(cleaned)

    @model_validator(mode="after")
    def _trainers_exist(self) -> ServerConfig:
        for idx in self.trainer_faults:
            if not 1 <= idx <= len(self.cpu_speeds):
                raise ValueError(f"trainer_faults names trainer {idx}, server has {len(self.cpu_speeds)}")
        return self

    @property
    def honest(self) -> bool:
        return not self.faults


class ScenarioConfig(_Section):
    name: str = "custom"
    seed: int = Field(0, ge=0)
    rounds: int = Field(40, ge=1)
    block_interval: float = Field(2.0, gt=0)
    strategy: StrategyMode = StrategyMode.LEARNED
    max_local_rounds: int = Field(16, ge=1)
    task: TaskConfig = TaskConfig()
    consensus: ConsensusConfig = ConsensusConfig()
    offload: OffloadConfig = OffloadConfig()
    drl: DrlConfig = DrlConfig()
    servers: dict[str, ServerConfig]

    @model_validator(mode="after")
    def _topology(self) -> ScenarioConfig:
        if not self.servers:
            raise ValueError("scenario needs at least one server")
        if self.task.n_train < self.total_trainers:
            raise ValueError(
                f"{self.total_trainers} trainers but only {self.task.n_train} training examples"
            )
        if self.consensus.assert_safety:
            faulty = sum(not s.honest for s in self.servers.values())
            budget = max_faulty(len(self.servers))
            if faulty > budget:
                raise ValueError(
                    f"{faulty} faulty servers exceed the tolerated {budget} for N={len(self.servers)}"
                )
        return self

    @property
    def server_ids(self) -> list[str]:
        return list(self.servers)

    @property
    def total_trainers(self) -> int:
        return sum(len(s.cpu_speeds) for s in self.servers.values())

    def with_overrides(self, **changes: Any) -> ScenarioConfig:
        data = self.model_dump()
        data.update(changes)
        return parse_config(data)


def parse_config(data: Any) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"scenario config must be a mapping, got {type(data).__name__}")
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid scenario config:\n{exc}") from None


def dump_config(cfg: ScenarioConfig) -> str:
    data = cfg.model_dump(mode="json")
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None, width=100)


def load_config(path: Path) -> ScenarioConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return parse_config(data)


def config_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()
