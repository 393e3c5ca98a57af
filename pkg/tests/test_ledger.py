from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from aggchain.errors import LedgerError
from aggchain.ledger import (
    BlockHeader,
    Chain,
    GlobalAggBlock,
    audit_chain_file,
    audit_chain_text,
    chain_to_text,
    dump_chain,
    explain_block,
    load_chain,
    make_block,
    make_transaction,
    validate_block,
)

DIM = 6
F = 2.0
SERVERS = ("P1", "P2", "P3")


def _txs(k: int, rng: np.random.Generator, per_server: int = 2) -> list:
    txs = []
    for sid in SERVERS:
        times = np.sort(rng.uniform((k - 1) * F + 0.01, k * F, size=per_server))
        for r, t in enumerate(times):
            txs.append(make_transaction(sid, float(t), rng.normal(size=DIM), local_round=r))
    return txs


def honest_chain(n_blocks: int = 5, seed: int = 0) -> Chain:
    rng = np.random.default_rng(seed)
    chain = Chain(np.zeros(DIM), F)
    for k in range(1, n_blocks + 1):
        chain.append(chain.assemble(SERVERS[k % 3], k, _txs(k, rng)))
    return chain


def test_make_transaction_time_and_dim_checks() -> None:
    first = make_transaction("P1", 1.0, np.zeros(DIM), dim=DIM)
    assert first.timestamp == 1.0
    make_transaction("P1", 2.0, np.zeros(DIM), last_timestamp=1.0, dim=DIM)
    with pytest.raises(LedgerError, match="does not advance"):
        make_transaction("P1", 1.0, np.zeros(DIM), last_timestamp=2.0)
    with pytest.raises(LedgerError, match="expects"):
        make_transaction("P1", 3.0, np.zeros(DIM + 1), dim=DIM)


def test_block_over_three_servers_validates() -> None:
    chain = Chain(np.zeros(DIM), F)
    block = chain.assemble("P2", 1, _txs(1, np.random.default_rng(1)))
    assert validate_block(block, chain)
    latest = block.latest_by_server()
    assert list(latest) == list(SERVERS)
    assert np.allclose(block.global_params, np.mean([tx.params for tx in latest.values()], axis=0))


def test_block_must_carry_every_live_server() -> None:
    chain = Chain(np.zeros(DIM), F)
    txs = [tx for tx in _txs(1, np.random.default_rng(3)) if tx.server_id != "P3"]
    block = chain.assemble("P1", 1, txs)
    assert explain_block(block, chain) is None
    assert explain_block(block, chain, required={"P1", "P2"}) is None
    assert explain_block(block, chain, required=SERVERS) == "no transaction from live server(s) P3"


def test_perturbed_global_params_are_rejected() -> None:
    chain = Chain(np.zeros(DIM), F)
    txs = _txs(1, np.random.default_rng(2))
    good = chain.assemble("P1", 1, txs)
    bad_params = good.global_params.copy()
    bad_params[3] += 1e-3
    with pytest.raises(LedgerError, match="recomputed mean"):
        make_block("P1", 1, txs, bad_params, chain.head.block_hash, 1, F)
    forged = GlobalAggBlock(good.header, good.transactions, bad_params)
    assert not validate_block(forged, chain)
    assert "mean" in explain_block(forged, chain)


def test_non_finite_params_are_rejected() -> None:
    chain = Chain(np.zeros(DIM), F)
    good = chain.assemble("P1", 1, _txs(1, np.random.default_rng(3)))
    params = good.global_params.copy()
    params[0] = np.nan
    assert explain_block(GlobalAggBlock(good.header, good.transactions, params), chain) == (
        "global params: non-finite parameter"
    )
    tx = replace(good.transactions[0], params=np.full(DIM, np.inf))
    assert not validate_block(GlobalAggBlock(good.header, (tx, *good.transactions[1:]), params), chain)


def test_transactions_outside_the_interval_are_rejected() -> None:
    chain = Chain(np.zeros(DIM), F)
    late = make_transaction("P1", 2.5, np.ones(DIM))
    header = BlockHeader(1, 1, "P1", F, chain.head.block_hash)
    block = GlobalAggBlock(header, (late,), np.ones(DIM))
    assert "outside the interval" in explain_block(block, chain)


def test_empty_block_is_rejected() -> None:
    chain = Chain(np.zeros(DIM), F)
    with pytest.raises(LedgerError, match="no transactions"):
        make_block("P1", 1, [], np.zeros(DIM), chain.head.block_hash, 1, F)


def test_append_links_duplicates_and_gaps() -> None:
    rng = np.random.default_rng(4)
    chain = Chain(np.zeros(DIM), F)
    b1 = chain.assemble("P1", 1, _txs(1, rng))
    chain.append(b1)
    assert chain.height == 1
    chain.append(b1)
    assert chain.height == 1

    b2 = chain.assemble("P2", 2, _txs(2, rng))
    unlinked = GlobalAggBlock(replace(b2.header, prev_hash="f" * 64), b2.transactions, b2.global_params)
    with pytest.raises(LedgerError, match="does not link"):
        chain.append(unlinked)
    gap = GlobalAggBlock(replace(b2.header, height=3), b2.transactions, b2.global_params)
    with pytest.raises(LedgerError, match="gap"):
        chain.append(gap)

    other = Chain(np.zeros(DIM), F)
    conflicting = other.assemble("P3", 1, _txs(1, rng))
    with pytest.raises(LedgerError, match="conflicting"):
        chain.append(conflicting)

    chain.append(b2)
    assert chain.height == 2
    assert chain.last_tx_time("P1") == max(tx.timestamp for tx in b2.transactions if tx.server_id == "P1")


def test_honest_chain_verifies_and_replays() -> None:
    chain = honest_chain(6)
    assert chain.verify() is None
    hashes = [b.block_hash for b in chain.blocks]
    assert all(b.header.prev_hash == h for b, h in zip(chain.blocks[1:], hashes, strict=False))


def test_dump_audit_and_load(tmp_path: Path) -> None:
    chain = honest_chain(4)
    path = dump_chain(chain, tmp_path / "chain.jsonl")
    audit = audit_chain_file(path)
    assert audit.ok
    assert audit.blocks == 5
    loaded = load_chain(path)
    assert [b.block_hash for b in loaded.blocks] == [b.block_hash for b in chain.blocks]
    assert chain_to_text(loaded) == path.read_text(encoding="utf-8")


def test_any_single_bit_tamper_is_rejected() -> None:
    data = bytearray(chain_to_text(honest_chain(5)).encode("utf-8"))
    assert audit_chain_text(bytes(data)).ok
    rng = np.random.default_rng(2024)
    for _ in range(100):
        pos = int(rng.integers(len(data)))
        bit = 1 << int(rng.integers(8))
        tampered = bytearray(data)
        tampered[pos] ^= bit
        audit = audit_chain_text(bytes(tampered))
        assert not audit.ok, f"flip of bit {bit} at byte {pos} went unnoticed"


def test_tampered_block_is_named() -> None:
    chain = honest_chain(3)
    lines = chain_to_text(chain).splitlines(keepends=True)
    # line 0 is the chain header, line 1 genesis, so line 3 holds block 2
    lines[3] = lines[3].replace('"miner":"P3"', '"miner":"P9"')
    audit = audit_chain_text("".join(lines).encode("utf-8"))
    assert not audit.ok
    assert audit.height == 2
    assert audit.describe().startswith("block 2:")


def test_missing_file_raises_oserror(tmp_path: Path) -> None:
    with pytest.raises(OSError):
        audit_chain_file(tmp_path / "nope.jsonl")
