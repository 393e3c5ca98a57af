"""Builtin scenarios, addressable by name from the CLI."""

from __future__ import annotations

from collections.abc import Callable
from typing import Final

from aggchain.config import ConsensusConfig, ScenarioConfig, ServerConfig, StrategyMode, TaskConfig
from aggchain.errors import ConfigError
from aggchain.sim import Behavior

FIVE_SERVER_SPEEDS: Final[dict[str, tuple[float, ...]]] = {
    "P1": (1.0, 0.5),
    "P2": (2.5, 2.0, 3.0, 2.0),
    "P3": (2.5, 3.0, 0.5, 0.5, 3.0, 3.0),
    "P4": (3.0, 2.5, 2.0, 2.5, 3.5, 3.5, 3.0, 3.5),
    "P5": (2.0, 3.5, 2.0, 1.0, 0.5, 2.0, 3.5, 1.0, 3.5, 3.5),
}


def _five_servers(**per_server: ServerConfig) -> dict[str, ServerConfig]:
    return {
        sid: per_server.get(sid, ServerConfig(cpu_speeds=speeds))
        for sid, speeds in FIVE_SERVER_SPEEDS.items()
    }


def paper5() -> ScenarioConfig:
    return ScenarioConfig(name="paper5", servers=_five_servers())


def edge5() -> ScenarioConfig:
    """Same topology as `paper5` under a topology-only name."""
    return paper5().with_overrides(name="edge5")


def byzantine5() -> ScenarioConfig:
    p1 = ServerConfig(
        cpu_speeds=FIVE_SERVER_SPEEDS["P1"],
        faults=(Behavior.SILENT, Behavior.NO_TRAIN),
    )
    return ScenarioConfig(
        name="byzantine5",
        consensus=ConsensusConfig(assert_safety=True),
        servers=_five_servers(P1=p1),
    )


def noisy5() -> ScenarioConfig:
    p3 = ServerConfig(
        cpu_speeds=FIVE_SERVER_SPEEDS["P3"],
        trainer_faults={2: Behavior.RANDOM_MODEL, 5: Behavior.RANDOM_MODEL},
    )
    return ScenarioConfig(name="noisy5", servers=_five_servers(P3=p3))


def hard5() -> ScenarioConfig:
    task = TaskConfig(model="mlp", clusters_per_class=2, hidden=16, lr=0.05)
    return ScenarioConfig(name="hard5", task=task, servers=_five_servers())


def tiny() -> ScenarioConfig:
    task = TaskConfig(n_train=400, n_test=200)
    return ScenarioConfig(
        name="tiny",
        rounds=5,
        strategy=StrategyMode.FIXED,
        task=task,
        servers={
            "P1": ServerConfig(cpu_speeds=(1.0, 0.5)),
            "P2": ServerConfig(cpu_speeds=(2.0, 1.5)),
        },
    )


BUILTIN: Final[dict[str, Callable[[], ScenarioConfig]]] = {
    "paper5": paper5,
    "edge5": edge5,
    "byzantine5": byzantine5,
    "noisy5": noisy5,
    "hard5": hard5,
    "tiny": tiny,
}


def builtin_scenarios() -> dict[str, ScenarioConfig]:
    return {name: make() for name, make in BUILTIN.items()}


def get_scenario(name: str) -> ScenarioConfig:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; known: {', '.join(BUILTIN)}") from None
