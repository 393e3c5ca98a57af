"""
Trust-weighted Byzantine consensus.

Trust scores drive a probabilistic miner election; the elected miner's block is
then run through weighted pre-prepare / prepare / commit phases where every
vote counts with the voter's election probability. A round resolves when all
honest replicas have committed or when its deadline event fires.
"""

from __future__ import annotations

import enum
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import Final

import numpy as np

from aggchain.errors import ConsensusError
from aggchain.ledger import Chain, GlobalAggBlock, explain_block
from aggchain.sim import Behavior, EventKind, Kernel, Message, SimEvent

logger = logging.getLogger(__name__)

QUORUM_TOL: Final[float] = 1e-12
PHASES_PER_ROUND: Final[int] = 3


class Role(str, enum.Enum):
    MINER = "miner"
    PEER = "peer"


class Outcome(str, enum.Enum):
    # miners are accepted/rejected, peers consistent/inconsistent with the result
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    CONSISTENT = "consistent"
    INCONSISTENT = "inconsistent"

    @property
    def favorable(self) -> bool:
        return self in (Outcome.ACCEPTED, Outcome.CONSISTENT)

    @property
    def role(self) -> Role:
        return Role.MINER if self in (Outcome.ACCEPTED, Outcome.REJECTED) else Role.PEER


class Phase(enum.IntEnum):
    ELECTED = 0
    PRE_PREPARED = 1
    PREPARED = 2
    COMMITTED = 3
    REJECTED = 4


class Decision(str, enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    ABSTAIN = "abstain"


# ---------------------------------------------------------------------------
# trust and election


@dataclass(frozen=True)
class TrustState:
    scores: Mapping[str, float]
    pi: Mapping[str, float]
    k: int = 0

    @classmethod
    def initial(cls, server_ids: Sequence[str]) -> TrustState:
        return cls({s: 0.0 for s in server_ids}, {s: 0.0 for s in server_ids}, 0)

    @property
    def server_ids(self) -> list[str]:
        return list(self.scores)


def performance_increase(e_now: float, e_prev: float) -> float:
    return e_now - e_prev


def update_trust(
    state: TrustState,
    server_id: str,
    role: Role,
    outcome: Outcome,
    pi: float,
    delta1: float,
    delta2: float,
) -> TrustState:
    if not delta1 > delta2 > 0:
        raise ConsensusError(f"trust steps must satisfy delta1 > delta2 > 0, got {delta1}, {delta2}")
    if not math.isfinite(pi):
        raise ConsensusError(f"{server_id}: performance increase is not finite ({pi})")
    if outcome.role is not role:
        raise ConsensusError(f"{server_id}: outcome {outcome.value} does not apply to a {role.value}")
    s = state.scores[server_id]
    step = delta1 if role is Role.MINER else delta2
    if outcome.favorable:
        new = min(1.0, s + step) + pi
    else:
        new = max(0.0, s - step) + pi
    scores = dict(state.scores)
    scores[server_id] = max(0.0, new)
    pis = dict(state.pi)
    pis[server_id] = pi
    return replace(state, scores=scores, pi=pis)


@dataclass(frozen=True)
class ElectionDistribution:
    probs: Mapping[str, float]

    def weight(self, members: set[str] | frozenset[str]) -> float:
        return math.fsum(self.probs[m] for m in members if m in self.probs)

    def as_array(self) -> np.ndarray:
        return np.array(list(self.probs.values()), dtype=np.float64)


def election_distribution(state: TrustState) -> ElectionDistribution:
    ids = state.server_ids
    if not ids:
        raise ConsensusError("no servers to elect from")
    total = math.fsum(state.scores.values())
    if total <= 0.0:
        return ElectionDistribution({s: 1.0 / len(ids) for s in ids})
    return ElectionDistribution({s: state.scores[s] / total for s in ids})


def elect_miner(distribution: ElectionDistribution, rng: np.random.Generator) -> str:
    ids = list(distribution.probs)
    cdf = np.cumsum(distribution.as_array())
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    return ids[min(idx, len(ids) - 1)]


def quorum_threshold(n: int) -> float:
    if n < 1:
        raise ConsensusError(f"quorum needs at least one server, got {n}")
    return (2 * ((n - 1) // 3) + 1) / n


def quorum_met(weights: Sequence[float], n: int) -> bool:
    return math.fsum(weights) >= quorum_threshold(n) - QUORUM_TOL


# ---------------------------------------------------------------------------
# protocol messages


@dataclass(frozen=True)
class PrePrepare:
    k: int
    block: GlobalAggBlock

    def scrambled(self, rng: np.random.Generator) -> PrePrepare:
        noisy = rng.normal(0.0, 1.0, size=len(self.block.global_params))
        return PrePrepare(self.k, replace(self.block, global_params=noisy))


@dataclass(frozen=True)
class Prepare:
    k: int
    block_hash: str


@dataclass(frozen=True)
class Commit:
    k: int
    block_hash: str


@dataclass(frozen=True)
class RoundDeadline:
    k: int


@dataclass
class ReplicaState:
    server_id: str
    phase: Phase = Phase.ELECTED
    candidate: GlobalAggBlock | None = None
    valid: bool = False
    prepares: set[str] = field(default_factory=set)
    commits: set[str] = field(default_factory=set)
    sent_commit: bool = False
    committed: bool = False

    def advance_to(self, phase: Phase) -> None:
        if phase < self.phase:
            raise ConsensusError(f"{self.server_id}: phase cannot move back from {self.phase.name} to {phase.name}")
        self.phase = phase


@dataclass(frozen=True)
class ConsensusEvent:
    k: int
    at: float
    event: str
    server_id: str
    detail: str = ""


@dataclass(frozen=True)
class RoundOutcome:
    k: int
    miner_id: str
    block: GlobalAggBlock | None
    decisions: Mapping[str, Decision]
    resolved_at: float
    committed_by: frozenset[str]
    events: tuple[ConsensusEvent, ...] = ()

    @property
    def finalized(self) -> bool:
        return self.block is not None


Validator = Callable[[GlobalAggBlock, Chain], str | None]


class ConsensusRound:
    """
    One interval's consensus among ``chains`` (one replica per server).

    The miner counts as prepared as soon as it proposes. A replica broadcasts
    Commit once its prepare weight reaches the quorum and commits once its
    commit weight does; a replica that found the block invalid never commits.
    """

    def __init__(
        self,
        kernel: Kernel,
        k: int,
        miner_id: str,
        chains: Mapping[str, Chain],
        distribution: ElectionDistribution,
        deadline: float,
        validator: Validator = explain_block,
    ) -> None:
        if miner_id not in chains:
            raise ConsensusError(f"miner {miner_id} has no replica")
        self.kernel = kernel
        self.k = k
        self.miner_id = miner_id
        self.chains = chains
        self.distribution = distribution
        self.n = len(chains)
        self.deadline = deadline
        self.validator = validator
        self.replicas = {s: ReplicaState(s) for s in chains}
        self.resolved: RoundOutcome | None = None
        self.events: list[ConsensusEvent] = []
        self.started_at = kernel.now

    # -- helpers -----------------------------------------------------------

    def _peers(self, server_id: str) -> list[str]:
        return [s for s in self.chains if s != server_id]

    def _honest(self, server_id: str) -> bool:
        return self.kernel.profile(server_id).honest

    def _silent(self, server_id: str) -> bool:
        return self.kernel.profile(server_id).has(Behavior.SILENT)

    def _quorum(self, members: set[str]) -> bool:
        return self.distribution.weight(members) >= quorum_threshold(self.n) - QUORUM_TOL

    def _log(self, event: str, server_id: str, detail: str = "") -> None:
        self.events.append(ConsensusEvent(self.k, self.kernel.now, event, server_id, detail))

    # -- protocol ----------------------------------------------------------

    def start(self, block: GlobalAggBlock | None) -> None:
        """Miner proposes ``block`` (None when it has nothing to propose) and the deadline is armed."""
        self.kernel.begin_round(self.k)
        self._log("elect", self.miner_id, f"p={self.distribution.probs[self.miner_id]!r}")
        self.kernel.schedule(
            SimEvent(at=self.deadline, target=self.miner_id, kind=EventKind.PHASE_TIMEOUT, payload=RoundDeadline(self.k))
        )
        if block is None:
            logger.debug("round %d: miner %s has nothing to propose", self.k, self.miner_id)
            return
        miner = self.replicas[self.miner_id]
        miner.candidate = block
        miner.valid = True
        miner.prepares.add(self.miner_id)
        miner.advance_to(Phase.PRE_PREPARED)
        self._log("pre-prepare", self.miner_id, block.block_hash[:16])
        self.kernel.broadcast(self.miner_id, self._peers(self.miner_id), PrePrepare(self.k, block))
        self._progress(miner)

    def handle(self, event: SimEvent) -> bool:
        """Consume ``event`` if it belongs to this round; returns whether it did."""
        payload = event.payload
        if event.kind is EventKind.PHASE_TIMEOUT:
            if isinstance(payload, RoundDeadline) and payload.k == self.k:
                self._resolve()
                return True
            return isinstance(payload, RoundDeadline)
        if event.kind is not EventKind.MESSAGE_DELIVERY or not isinstance(payload, Message):
            return False
        body = payload.body
        if not isinstance(body, PrePrepare | Prepare | Commit):
            return False
        if body.k != self.k or self.resolved is not None:
            return True
        replica = self.replicas.get(payload.recipient)
        if replica is None:
            return True
        if isinstance(body, PrePrepare):
            self._on_pre_prepare(replica, payload.sender, body)
        elif isinstance(body, Prepare):
            self._on_vote(replica, payload.sender, body.block_hash, replica.prepares)
        else:
            self._on_vote(replica, payload.sender, body.block_hash, replica.commits)
        if self._all_honest_committed():
            self._resolve()
        return True

    def _on_pre_prepare(self, replica: ReplicaState, sender: str, msg: PrePrepare) -> None:
        if sender != self.miner_id or replica.candidate is not None:
            return
        replica.candidate = msg.block
        replica.advance_to(Phase.PRE_PREPARED)
        replica.prepares.add(sender)
        reason = self.validator(msg.block, self.chains[replica.server_id])
        if reason:
            logger.debug("round %d: %s rejects block: %s", self.k, replica.server_id, reason)
            replica.advance_to(Phase.REJECTED)
            self._log("reject", replica.server_id, reason)
            return
        replica.valid = True
        replica.prepares.add(replica.server_id)
        self._log("prepare", replica.server_id)
        self.kernel.broadcast(
            replica.server_id, self._peers(replica.server_id), Prepare(self.k, msg.block.block_hash)
        )
        self._progress(replica)

    def _on_vote(self, replica: ReplicaState, sender: str, block_hash: str, bucket: set[str]) -> None:
        # votes for another block, or arriving before the proposal, are not counted
        if replica.candidate is None or block_hash != replica.candidate.block_hash:
            return
        bucket.add(sender)
        if replica.valid:
            self._progress(replica)

    def _progress(self, replica: ReplicaState) -> None:
        if replica.committed or not replica.valid or replica.candidate is None:
            return
        if not replica.sent_commit and self._quorum(replica.prepares):
            replica.sent_commit = True
            replica.commits.add(replica.server_id)
            replica.advance_to(Phase.PREPARED)
            self._log("commit", replica.server_id)
            self.kernel.broadcast(
                replica.server_id,
                self._peers(replica.server_id),
                Commit(self.k, replica.candidate.block_hash),
            )
        if replica.sent_commit and self._quorum(replica.commits):
            replica.committed = True
            replica.advance_to(Phase.COMMITTED)
            self._log("append", replica.server_id, f"height {replica.candidate.height}")
            self.chains[replica.server_id].append(replica.candidate)
            logger.debug("round %d: %s committed %s", self.k, replica.server_id, replica.candidate.block_hash[:12])

    def _all_honest_committed(self) -> bool:
        honest = [r for s, r in self.replicas.items() if self._honest(s)]
        return bool(honest) and all(r.committed for r in honest)

    def _resolve(self) -> None:
        if self.resolved is not None:
            return
        honest_blocks = {
            r.candidate.block_hash: r.candidate
            for s, r in self.replicas.items()
            if r.committed and r.candidate is not None and self._honest(s)
        }
        if len(honest_blocks) > 1:
            raise ConsensusError(f"round {self.k}: honest replicas committed different blocks")
        block = next(iter(honest_blocks.values()), None)

        if block is not None:
            # catch-up: replicas that saw the finalization but missed the quorum
            for s, chain in self.chains.items():
                if self._silent(s) or self.replicas[s].committed:
                    continue
                if chain.head.block_hash == block.header.prev_hash:
                    chain.append(block)

        decisions: dict[str, Decision] = {}
        for s, r in self.replicas.items():
            if self._silent(s):
                decisions[s] = Decision.ABSTAIN
            elif r.sent_commit:
                decisions[s] = Decision.ACCEPT
            else:
                decisions[s] = Decision.REJECT

        self._log("finalized" if block is not None else "failed", self.miner_id)
        self.resolved = RoundOutcome(
            k=self.k,
            miner_id=self.miner_id,
            block=block,
            decisions=decisions,
            resolved_at=self.kernel.now,
            committed_by=frozenset(s for s, r in self.replicas.items() if r.committed),
            events=tuple(self.events),
        )
        logger.debug(
            "round %d resolved at t=%s: %s",
            self.k,
            self.kernel.now,
            "finalized" if block is not None else "failed",
        )


def drive_round(
    round_: ConsensusRound,
    on_other: Callable[[SimEvent], None] | None = None,
) -> RoundOutcome:
    """Advance the kernel until ``round_`` resolves, handing unrelated events to ``on_other``."""
    kernel = round_.kernel
    if round_._all_honest_committed():
        round_._resolve()
    while round_.resolved is None:
        event = kernel.advance()
        if event.kind is EventKind.SCENARIO_END:
            raise ConsensusError(f"round {round_.k}: event queue drained before the deadline")
        if not round_.handle(event) and on_other is not None:
            on_other(event)
    return round_.resolved


def trust_outcomes(outcome: RoundOutcome) -> dict[str, tuple[Role, Outcome]]:
    """Role and trust outcome per server for a resolved round."""
    out: dict[str, tuple[Role, Outcome]] = {}
    for s, decision in outcome.decisions.items():
        if s == outcome.miner_id:
            out[s] = (Role.MINER, Outcome.ACCEPTED if outcome.finalized else Outcome.REJECTED)
            continue
        agrees = (decision is Decision.ACCEPT and outcome.finalized) or (
            decision is Decision.REJECT and not outcome.finalized
        )
        out[s] = (Role.PEER, Outcome.CONSISTENT if agrees else Outcome.INCONSISTENT)
    return out


def apply_round(
    state: TrustState,
    outcome: RoundOutcome,
    pis: Mapping[str, float],
    delta1: float,
    delta2: float,
) -> TrustState:
    for s, (role, result) in trust_outcomes(outcome).items():
        state = update_trust(state, s, role, result, pis.get(s, 0.0), delta1, delta2)
    return replace(state, k=outcome.k)


def round_deadline(start: float, phase_timeout: float) -> float:
    return start + PHASES_PER_ROUND * phase_timeout
