import functools
import itertools

import numpy as np
import pytest

from aggchain.consensus import (
    Decision,
    ElectionDistribution,
    Outcome,
    ConsensusRound,
    Phase,
    ReplicaState,
    Role,
    RoundOutcome,
    TrustState,
    apply_round,
    drive_round,
    elect_miner,
    election_distribution,
    performance_increase,
    quorum_met,
    quorum_threshold,
    round_deadline,
    trust_outcomes,
    update_trust,
)
from aggchain.errors import ConsensusError
from aggchain.ledger import Chain, GlobalAggBlock, make_transaction
from aggchain.sim import Behavior, FaultProfile, Kernel, max_faulty

DIM = 4
F = 2.0


def _ids(n: int) -> list[str]:
    return [f"P{i}" for i in range(1, n + 1)]


@functools.cache
def _block(n: int, miner: str) -> GlobalAggBlock:
    rng = np.random.default_rng(n)
    txs = [make_transaction(s, 0.5 + 0.1 * i, rng.normal(size=DIM)) for i, s in enumerate(_ids(n))]
    return Chain(np.zeros(DIM), F).assemble(miner, 1, txs)


def run_round(
    n: int,
    miner: str,
    faults: dict[str, frozenset[Behavior]] | None = None,
    dropped: frozenset[tuple[str, str]] = frozenset(),
    probs: dict[str, float] | None = None,
) -> tuple[RoundOutcome, dict[str, Chain]]:
    ids = _ids(n)
    kernel = Kernel(drop_filter=lambda m: (type(m.body).__name__, m.recipient) in dropped)
    for s in ids:
        kernel.register(s, FaultProfile(s, (faults or {}).get(s, frozenset())))
    chains = {s: Chain(np.zeros(DIM), F) for s in ids}
    block = _block(n, miner)
    dist = ElectionDistribution(probs or {s: 1.0 / n for s in ids})
    rnd = ConsensusRound(kernel, 1, miner, chains, dist, deadline=round_deadline(0.0, 0.25))
    rnd.start(block)
    return drive_round(rnd), chains


# ---------------------------------------------------------------------------
# trust and election


@pytest.mark.parametrize(("now", "prev", "pi"), [(0.9, 0.8, 0.1), (0.5, 0.5, 0.0), (0.3, 0.6, -0.3)])
def test_performance_increase(now: float, prev: float, pi: float) -> None:
    assert performance_increase(now, prev) == pytest.approx(pi)


def test_update_trust_examples() -> None:
    state = TrustState({"P1": 0.5, "P2": 0.0}, {"P1": 0.0, "P2": 0.0})
    assert update_trust(state, "P1", Role.MINER, Outcome.ACCEPTED, 0.1, 2, 1).scores["P1"] == pytest.approx(1.1)
    assert update_trust(state, "P1", Role.MINER, Outcome.REJECTED, 0.0, 2, 1).scores["P1"] == 0.0
    peer = update_trust(state, "P2", Role.PEER, Outcome.CONSISTENT, -0.2, 2, 1)
    assert peer.scores["P2"] == pytest.approx(0.8)
    assert peer.pi["P2"] == -0.2
    assert state.scores["P2"] == 0.0


def test_update_trust_never_goes_negative() -> None:
    state = TrustState({"P1": 0.0}, {"P1": 0.0})
    assert update_trust(state, "P1", Role.PEER, Outcome.INCONSISTENT, -0.5, 2, 1).scores["P1"] == 0.0


def test_update_trust_rejects_bad_steps() -> None:
    state = TrustState.initial(["P1"])
    with pytest.raises(ConsensusError):
        update_trust(state, "P1", Role.PEER, Outcome.CONSISTENT, 0.0, 1, 2)
    with pytest.raises(ConsensusError):
        update_trust(state, "P1", Role.PEER, Outcome.CONSISTENT, float("nan"), 2, 1)
    with pytest.raises(ConsensusError, match="does not apply"):
        update_trust(state, "P1", Role.MINER, Outcome.CONSISTENT, 0.0, 2, 1)


def test_outcomes_are_distinct_per_role() -> None:
    assert len({o.value for o in Outcome}) == 4
    assert [o.role for o in Outcome] == [Role.MINER, Role.MINER, Role.PEER, Role.PEER]
    assert [o.favorable for o in Outcome] == [True, False, True, False]


def test_trust_stays_within_zero_and_two() -> None:
    # S <= 2 needs a penalty step of at least 1 (min-cap 1 plus PI 1)
    rng = np.random.default_rng(17)
    ids = ["P1", "P2", "P3"]
    for delta1, delta2 in ((2.0, 1.0), (3.0, 1.5), (1.2, 1.0)):
        state = TrustState.initial(ids)
        for _ in range(2000):
            sid = ids[int(rng.integers(len(ids)))]
            if rng.random() < 0.3:
                role, outcome = Role.MINER, (Outcome.ACCEPTED if rng.random() < 0.7 else Outcome.REJECTED)
            else:
                role, outcome = Role.PEER, (Outcome.CONSISTENT if rng.random() < 0.7 else Outcome.INCONSISTENT)
            state = update_trust(state, sid, role, outcome, float(rng.uniform(-1.0, 1.0)), delta1, delta2)
            assert all(0.0 <= s <= 2.0 for s in state.scores.values()), state.scores


def test_higher_gain_never_lowers_next_election_chance() -> None:
    rng = np.random.default_rng(23)
    ids = ["P1", "P2", "P3", "P4"]
    for _ in range(500):
        scores = dict(zip(ids, rng.uniform(0.0, 2.0, size=4) * (rng.random(4) < 0.8), strict=True))
        state = TrustState(scores, {})
        role, ok = (Role.MINER, Outcome.ACCEPTED) if rng.random() < 0.5 else (Role.PEER, Outcome.CONSISTENT)
        lo, hi = (float(x) for x in sorted(rng.uniform(-1.0, 1.0, size=2)))
        p_lo = election_distribution(update_trust(state, "P2", role, ok, lo, 2, 1)).probs["P2"]
        p_hi = election_distribution(update_trust(state, "P2", role, ok, hi, 2, 1)).probs["P2"]
        assert p_hi >= p_lo


def test_election_distribution_examples() -> None:
    ids = ["P1", "P2", "P3"]
    dist = election_distribution(TrustState(dict(zip(ids, [2.0, 1.0, 1.0], strict=True)), {}))
    assert list(dist.as_array()) == [0.5, 0.25, 0.25]
    uniform = election_distribution(TrustState.initial(ids))
    assert uniform.as_array() == pytest.approx([1 / 3] * 3)
    scaled = election_distribution(TrustState(dict(zip(ids, [20.0, 10.0, 10.0], strict=True)), {}))
    assert np.array_equal(scaled.as_array(), dist.as_array())


def test_elect_miner_point_mass_and_determinism() -> None:
    dist = ElectionDistribution({"P1": 1.0, "P2": 0.0, "P3": 0.0})
    rng = np.random.default_rng(0)
    assert {elect_miner(dist, rng) for _ in range(200)} == {"P1"}
    skewed = ElectionDistribution({"P1": 0.1, "P2": 0.6, "P3": 0.3})
    assert elect_miner(skewed, np.random.default_rng(5)) == elect_miner(skewed, np.random.default_rng(5))


def test_elect_miner_frequencies_match_distribution() -> None:
    target = {"P1": 0.5, "P2": 0.25, "P3": 0.25}
    dist = ElectionDistribution(target)
    rng = np.random.default_rng(123)
    draws = [elect_miner(dist, rng) for _ in range(10_000)]
    for sid, p in target.items():
        assert abs(draws.count(sid) / len(draws) - p) <= 0.02


def test_elect_miner_never_picks_zero_trust_server() -> None:
    dist = ElectionDistribution({"P1": 0.0, "P2": 0.7, "P3": 0.0, "P4": 0.3})
    rng = np.random.default_rng(9)
    assert {elect_miner(dist, rng) for _ in range(2000)} == {"P2", "P4"}


def test_quorum_threshold_and_examples() -> None:
    assert quorum_threshold(5) == pytest.approx(0.6)
    assert quorum_threshold(4) == pytest.approx(0.75)
    assert quorum_threshold(1) == 1.0
    assert quorum_met([0.2, 0.2, 0.2], 5)
    assert not quorum_met([0.2, 0.2], 5)


def test_replica_phase_never_moves_back() -> None:
    replica = ReplicaState("P1")
    replica.advance_to(Phase.PREPARED)
    with pytest.raises(ConsensusError):
        replica.advance_to(Phase.PRE_PREPARED)


# ---------------------------------------------------------------------------
# consensus rounds


def test_all_honest_servers_commit() -> None:
    outcome, chains = run_round(5, "P2")
    assert outcome.finalized
    assert outcome.committed_by == frozenset(_ids(5))
    assert {c.height for c in chains.values()} == {1}
    assert {c.head.block_hash for c in chains.values()} == {outcome.block.block_hash}
    assert set(outcome.decisions.values()) == {Decision.ACCEPT}
    assert [e.event for e in outcome.events][:2] == ["elect", "pre-prepare"]


def test_silent_peer_does_not_stop_commit() -> None:
    outcome, chains = run_round(5, "P2", faults={"P4": frozenset({Behavior.SILENT})})
    assert outcome.finalized
    assert outcome.decisions["P4"] is Decision.ABSTAIN
    for s in ("P1", "P2", "P3", "P5"):
        assert chains[s].height == 1
    roles = trust_outcomes(outcome)
    assert roles["P2"] == (Role.MINER, Outcome.ACCEPTED)
    assert roles["P4"] == (Role.PEER, Outcome.INCONSISTENT)


def test_silent_miner_times_out_without_a_block() -> None:
    outcome, chains = run_round(5, "P1", faults={"P1": frozenset({Behavior.SILENT, Behavior.NO_TRAIN})})
    assert not outcome.finalized
    assert outcome.resolved_at == pytest.approx(round_deadline(0.0, 0.25))
    assert all(c.height == 0 for c in chains.values())
    assert trust_outcomes(outcome)["P1"] == (Role.MINER, Outcome.REJECTED)
    assert trust_outcomes(outcome)["P3"] == (Role.PEER, Outcome.CONSISTENT)
    assert [e.event for e in outcome.events][-1] == "failed"


def test_random_model_miner_block_is_rejected() -> None:
    outcome, chains = run_round(4, "P3", faults={"P3": frozenset({Behavior.RANDOM_MODEL})})
    assert not outcome.finalized
    for s in ("P1", "P2", "P4"):
        assert outcome.decisions[s] is Decision.REJECT
        assert chains[s].height == 0


def test_low_weight_quorum_cannot_commit() -> None:
    # honest servers hold only 0.5 of the election weight against tau(4) = 0.75
    probs = {"P1": 0.5, "P2": 0.2, "P3": 0.2, "P4": 0.1}
    outcome, _ = run_round(4, "P2", faults={"P1": frozenset({Behavior.SILENT})}, probs=probs)
    assert not outcome.finalized


def test_apply_round_updates_every_server() -> None:
    ids = _ids(4)
    outcome = RoundOutcome(
        k=3,
        miner_id="P1",
        block=None,
        decisions={"P1": Decision.ACCEPT, "P2": Decision.ACCEPT, "P3": Decision.REJECT, "P4": Decision.ABSTAIN},
        resolved_at=0.0,
        committed_by=frozenset(),
    )
    state = apply_round(TrustState.initial(ids), outcome, {"P3": 0.05}, 2.0, 1.0)
    assert state.k == 3
    assert state.scores == {"P1": 0.0, "P2": 0.0, "P3": pytest.approx(1.05), "P4": 0.0}


def _droppable(ids: list[str], faulty: str, miner: str) -> list[tuple[str, str]]:
    peers = [s for s in ids if s != faulty]
    first = "PrePrepare" if faulty == miner else "Prepare"
    return [(first, r) for r in peers] + [("Commit", r) for r in peers]


@pytest.mark.parametrize("n", [4, 5])
def test_no_two_honest_servers_commit_different_blocks(n: int) -> None:
    ids = _ids(n)
    assert max_faulty(n) == 1
    behaviors = [frozenset({Behavior.NO_TRAIN}), frozenset({Behavior.RANDOM_MODEL})]
    rounds = 0
    for miner, faulty in itertools.product(ids, ids):
        honest = [s for s in ids if s != faulty]
        keys = _droppable(ids, faulty, miner)
        cases = [(frozenset({Behavior.SILENT}), frozenset())]
        for behavior in behaviors:
            for mask in range(1 << len(keys)):
                dropped = frozenset(key for i, key in enumerate(keys) if mask >> i & 1)
                cases.append((behavior, dropped))
        for behavior, dropped in cases:
            outcome, chains = run_round(n, miner, {faulty: behavior}, dropped)
            rounds += 1
            heads = {chains[s].head.block_hash for s in honest if chains[s].height == 1}
            assert len(heads) <= 1
            if outcome.finalized:
                assert heads == {outcome.block.block_hash}
                assert all(chains[s].height == 1 for s in honest)
            if miner != faulty:
                assert outcome.finalized, (miner, faulty, behavior, sorted(dropped))
    assert rounds == n * n * (1 + 2 * (1 << (2 * (n - 1))))
