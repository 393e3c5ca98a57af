"""
Deterministic discrete-event kernel.

The kernel owns a single priority queue and a registry of actors. Events at the
same simulated time are processed in a fixed total order: kind rank, then
target id, then insertion sequence. Messages between actors go through
``deliver`` so fault profiles can drop or corrupt them before they are queued.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import itertools
import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Any, Protocol, runtime_checkable

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np

from aggchain.errors import ConfigError, ScheduleError

logger = logging.getLogger(__name__)


class EventKind(enum.IntEnum):
    # value is the tie-break rank at equal time
    TRAINER_REPORT = 0
    LOCAL_AGGREGATION = 1
    MESSAGE_DELIVERY = 2
    PHASE_TIMEOUT = 3
    BLOCK_TICK = 4
    SCENARIO_END = 5


class Behavior(str, enum.Enum):
    HONEST = "honest"
    SILENT = "silent"
    NO_TRAIN = "no_train"
    RANDOM_MODEL = "random_model"


@dataclass(frozen=True)
class FaultProfile:
    node_id: str
    behaviors: frozenset[Behavior] = frozenset({Behavior.HONEST})

    def __post_init__(self) -> None:
        if Behavior.HONEST in self.behaviors and len(self.behaviors) > 1:
            raise ConfigError(f"{self.node_id}: 'honest' cannot be combined with faults")
        if not self.behaviors:
            object.__setattr__(self, "behaviors", frozenset({Behavior.HONEST}))

    @property
    def honest(self) -> bool:
        return self.behaviors == frozenset({Behavior.HONEST})

    def has(self, behavior: Behavior) -> bool:
        return behavior in self.behaviors


@dataclass(frozen=True, order=False)
class SimEvent:
    at: float
    target: str
    kind: EventKind
    payload: Any = None


@runtime_checkable
class CarriesModel(Protocol):
    """Message bodies that hold model parameters a RandomModel sender can spoil."""

    def scrambled(self, rng: np.random.Generator) -> Self: ...


@dataclass(frozen=True)
class Message:
    sender: str
    recipient: str
    body: Any
    signer_tag: str = ""


def max_faulty(n: int) -> int:
    return (n - 1) // 3


@dataclass
class Kernel:
    """
    Single-stream scheduler plus message bus.

    ``drop_filter`` is consulted only for messages from non-honest senders and
    lets tests enumerate which faulty messages get lost.
    """

    noise_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    link_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(1))
    default_latency: float = 0.0
    link_latency: Mapping[tuple[str, str], float] = field(default_factory=dict)
    loss_rate: float = 0.0
    drop_filter: Callable[[Message], bool] | None = None

    now: float = 0.0
    round_nonce: int = 0
    _queue: list[tuple[float, int, str, int, SimEvent]] = field(default_factory=list)
    _seq: itertools.count = field(default_factory=itertools.count)
    _actors: dict[str, FaultProfile] = field(default_factory=dict)
    _log: Any = field(default_factory=hashlib.sha256)
    processed: int = 0
    sent: int = 0
    dropped: int = 0

    def register(self, actor_id: str, profile: FaultProfile | None = None) -> None:
        self._actors[actor_id] = profile or FaultProfile(actor_id)

    def profile(self, actor_id: str) -> FaultProfile:
        try:
            return self._actors[actor_id]
        except KeyError:
            raise ConfigError(f"unknown actor {actor_id!r}") from None

    @property
    def actors(self) -> list[str]:
        return list(self._actors)

    def schedule(self, event: SimEvent) -> None:
        if event.at < self.now:
            raise ScheduleError(
                f"event {event.kind.name} for {event.target} at t={event.at} "
                f"is before current time t={self.now}"
            )
        heapq.heappush(
            self._queue,
            (float(event.at), int(event.kind), event.target, next(self._seq), event),
        )

    def advance(self) -> SimEvent:
        if not self._queue:
            return SimEvent(at=self.now, target="", kind=EventKind.SCENARIO_END)
        at, _, _, _, event = heapq.heappop(self._queue)
        self.now = at
        self.processed += 1
        self._log.update(f"{at!r}|{event.kind.name}|{event.target}\n".encode())
        return event

    def begin_round(self, k: int) -> None:
        self.round_nonce = int(k)

    def signer_tag(self, sender: str) -> str:
        return f"{sender}#{self.round_nonce}"

    def latency(self, sender: str, recipient: str) -> float:
        return float(self.link_latency.get((sender, recipient), self.default_latency))

    def deliver(
        self,
        message: Message,
        kind: EventKind = EventKind.MESSAGE_DELIVERY,
    ) -> bool:
        """Queue ``message`` for its recipient; returns False when it was dropped."""
        sender = self.profile(message.sender)
        if message.recipient not in self._actors:
            raise ConfigError(f"message from {message.sender} to unknown actor {message.recipient!r}")

        if sender.has(Behavior.SILENT):
            self.dropped += 1
            return False
        if not sender.honest and self.drop_filter is not None and self.drop_filter(message):
            self.dropped += 1
            return False
        if self.loss_rate > 0.0 and self.link_rng.random() < self.loss_rate:
            self.dropped += 1
            return False

        body = message.body
        if sender.has(Behavior.RANDOM_MODEL) and isinstance(body, CarriesModel):
            body = body.scrambled(self.noise_rng)

        tag = message.signer_tag or self.signer_tag(message.sender)
        out = Message(message.sender, message.recipient, body, tag)
        self.schedule(
            SimEvent(
                at=self.now + self.latency(message.sender, message.recipient),
                target=message.recipient,
                kind=kind,
                payload=out,
            )
        )
        self.sent += 1
        return True

    def broadcast(self, sender: str, recipients: list[str], body: Any) -> int:
        delivered = 0
        for recipient in recipients:
            if recipient == sender:
                continue
            if self.deliver(Message(sender, recipient, body)):
                delivered += 1
        return delivered

    def log_digest(self) -> str:
        return self._log.copy().hexdigest()
