import math

import numpy as np
import pytest

from aggchain.config import ScenarioConfig, StrategyMode, parse_config
from aggchain.errors import AggchainError
from aggchain.ledger import audit_chain_text, chain_to_text
from aggchain.metrics import metrics_csv
from aggchain.orchestrator import (
    Simulation,
    aggregation_times,
    compare_strategies,
    early_stop_demo,
    rounds_to_threshold,
    run_scenario,
    trainer_ids_for,
)
from aggchain.scenarios import get_scenario
from aggchain.training import evaluate

SMALL_TASK = {"n_train": 400, "n_test": 200}


def _single(rounds: int = 3) -> ScenarioConfig:
    return parse_config(
        {
            "name": "single",
            "rounds": rounds,
            "strategy": "fixed",
            "task": SMALL_TASK,
            "offload": {"enabled": False},
            "servers": {"P1": {"cpu_speeds": [1.0]}},
        }
    )


def _four_with_silent_p1() -> ScenarioConfig:
    servers = {f"P{i}": {"cpu_speeds": [1.0, 2.0]} for i in range(1, 5)}
    servers["P1"]["faults"] = ["silent", "no_train"]
    return parse_config({"name": "four", "rounds": 6, "task": SMALL_TASK, "servers": servers})


def test_trainer_ids() -> None:
    assert trainer_ids_for("P2", 3) == ["P2.v1", "P2.v2", "P2.v3"]


def test_aggregation_times() -> None:
    assert aggregation_times(0.0, 2.0, 2.0, 2.0, 16) == [2.0]
    assert aggregation_times(0.0, 2.0, 0.5, 2.0, 16) == [0.5, 1.0, 1.5, 2.0]
    # f_i is floored at F / max_local_rounds
    assert len(aggregation_times(0.0, 2.0, 1e-3, 2.0, 4)) == 4
    # a window shorter than f_i still aggregates once, at the tick
    assert aggregation_times(1.9, 2.0, 1.0, 2.0, 16) == [2.0]


def test_rounds_to_threshold() -> None:
    assert rounds_to_threshold([0.2, 0.5, 0.9], 0.5) == 2.0
    assert rounds_to_threshold([0.2, 0.5], 0.95) == math.inf
    assert rounds_to_threshold([], 0.1) == math.inf


def test_single_trainer_block_carries_its_model() -> None:
    result = run_scenario(_single())
    trainer = result.trainers["P1.v1"]
    assert result.chain.height == 3
    assert np.array_equal(result.chain.head.global_params, trainer.last_trained)
    assert all(r.finalized and r.miner_id == "P1" for r in result.records)


def test_tiny_runs_every_round_and_finalizes() -> None:
    result = run_scenario(get_scenario("tiny"))
    assert [r.k for r in result.records] == [1, 2, 3, 4, 5]
    assert all(r.finalized for r in result.records)
    assert result.chain.height == 5
    assert result.final_accuracy == result.records[-1].global_acc
    assert sum(result.miner_histogram().values()) == 5
    assert len(result.buffer) == 0
    assert result.agents == {}


def test_same_seed_same_run() -> None:
    a = run_scenario(get_scenario("tiny"))
    b = run_scenario(get_scenario("tiny"))
    assert metrics_csv(a.records) == metrics_csv(b.records)
    assert a.event_digest == b.event_digest
    assert chain_to_text(a.chain) == chain_to_text(b.chain)
    c = run_scenario(get_scenario("tiny").with_overrides(seed=1))
    assert metrics_csv(c.records) != metrics_csv(a.records)


def test_visit_accounting() -> None:
    result = run_scenario(get_scenario("tiny"))
    total = sum(t.visits for t in result.trainers.values()) + sum(s.visits for s in result.servers.values())
    assert result.records[-1].visits == total
    visits = [r.visits for r in result.records]
    assert visits == sorted(visits)
    assert visits[0] > 0


def test_global_accuracy_comes_from_the_chain_head() -> None:
    result = run_scenario(get_scenario("tiny"))
    last = result.records[-1]
    assert last.global_acc == evaluate(result.model, result.chain.head.global_params, result.test)
    replayed = result.chain.replay_accuracy(result.model, result.test)
    assert replayed == [r.global_acc for r in result.records if r.finalized]


def test_chain_audits_and_honest_chains_agree() -> None:
    result = run_scenario(get_scenario("tiny"))
    assert audit_chain_text(chain_to_text(result.chain).encode("utf-8")).ok
    texts = {chain_to_text(c) for c in result.chains.values()}
    assert len(texts) == 1


def test_silent_server_never_finalizes_a_block() -> None:
    result = run_scenario(_four_with_silent_p1())
    assert result.miner_histogram()["P1"] == 0
    assert result.trust.scores["P1"] == 0.0
    honest = [result.chains[s] for s in ("P2", "P3", "P4")]
    assert len({c.head.block_hash for c in honest}) == 1
    assert result.chain is result.chains["P2"]
    # a silent no-train server contributes no transactions
    assert all(tx.server_id != "P1" for b in result.chain.blocks[1:] for tx in b.transactions)


def test_finalized_blocks_carry_every_live_server() -> None:
    servers = {f"P{i}": {"cpu_speeds": [1.0, 2.0]} for i in range(1, 5)}
    servers["P1"]["faults"] = ["silent"]
    cfg = parse_config({"name": "four", "rounds": 6, "task": SMALL_TASK, "servers": servers})
    sim = Simulation(cfg)
    result = sim.run()
    assert result.chain.height >= 5
    for block in result.chain.blocks[1:]:
        assert {tx.server_id for tx in block.transactions} == {"P2", "P3", "P4"}
    # P1 still trains and aggregates, but nothing it announces leaves the server
    assert any(tx.server_id == "P1" for tx in sim.servers["P1"].tx_pool)
    assert sim._live_servers(cfg.rounds, "P2") == {"P2", "P3", "P4"}


def test_learned_mode_fills_the_shared_buffer() -> None:
    cfg = get_scenario("tiny").with_overrides(strategy="learned", rounds=3)
    sim = Simulation(cfg)
    assert sorted(sim.agents) == ["P1", "P2"]
    result = sim.run()
    assert len(result.buffer) == 3 * 2
    assert {e.server_id for e in result.buffer.experiences()} == {"P1", "P2"}
    for rec in result.records:
        for s in rec.servers:
            s.action.check(cfg.block_interval)


def test_random_mode_starts_from_fedavg() -> None:
    result = run_scenario(get_scenario("tiny").with_overrides(strategy="random", rounds=2))
    assert all(s.action.as_vector().tolist() == [1.0] * 6 for s in result.records[0].servers)
    assert len(result.buffer) == 0


def test_compare_strategies_on_tiny() -> None:
    cmp = compare_strategies(get_scenario("tiny"), [StrategyMode.FIXED, "random"], repeats=2)
    assert cmp.seeds == (0, 1)
    assert [r.mode for r in cmp.rows] == ["fixed", "random"]
    fixed = cmp.rows[0]
    assert cmp.threshold == pytest.approx(0.95 * fixed.final_mean)
    assert fixed.reached >= 1
    assert fixed.speedup == 0.0
    assert all(r.runs == 2 and len(r.curve) == 5 for r in cmp.rows)
    with pytest.raises(AggchainError, match="two"):
        compare_strategies(get_scenario("tiny"), ["fixed"], repeats=2)


def test_compare_with_central_baseline() -> None:
    cmp = compare_strategies(get_scenario("tiny"), ["fixed", "random"], repeats=2, central=True)
    assert [r.mode for r in cmp.rows] == ["fixed", "random", "central"]
    assert cmp.rows[-1].final_mean > 0.5


def test_early_stop_caps_visits() -> None:
    converged, capped = early_stop_demo(get_scenario("tiny"), epochs_cap=0.5, aggregations=3)
    assert converged.label == "till-converged"
    assert capped.label == "capped-0.5-epochs"
    assert capped.visits < converged.visits
    assert capped.sim_time < converged.sim_time
    assert capped.aggregations == converged.aggregations == 3
    with pytest.raises(AggchainError):
        early_stop_demo(get_scenario("tiny"), epochs_cap=0.0)
