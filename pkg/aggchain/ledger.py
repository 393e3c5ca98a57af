"""
Blockchain records: local-aggregation transactions, global-aggregation blocks,
the hash-linked chain, and the JSON-lines dump used for audits.

Hashes are sha256 over a canonical JSON rendering in which every real number is
written as its IEEE-754 bit pattern (params as base64 of little-endian float64,
scalars via ``float.hex``).
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import logging
import math
from collections.abc import Collection, Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Final

import numpy as np

from aggchain.aggregation import global_aggregate
from aggchain.errors import LedgerError
from aggchain.training import Dataset, Model, ModelParams, evaluate

logger = logging.getLogger(__name__)

ZERO_HASH: Final[str] = "0" * 64
GENESIS_MINER: Final[str] = "genesis"
DEFAULT_NORM_BOUND: Final[float] = 1e3
RECOMPUTE_TOL: Final[float] = 1e-9


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def encode_params(params: ModelParams) -> str:
    return base64.b64encode(np.asarray(params, dtype="<f8").tobytes()).decode("ascii")


def decode_params(text: str) -> ModelParams:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise LedgerError(f"params are not valid base64: {exc}") from None
    if len(raw) % 8:
        raise LedgerError(f"params payload of {len(raw)} bytes is not a float64 vector")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def encode_real(value: float) -> str:
    return float(value).hex()


def decode_real(text: str) -> float:
    try:
        return float.fromhex(text)
    except (TypeError, ValueError):
        raise LedgerError(f"not a hex-encoded real: {text!r}") from None


@dataclass(frozen=True, eq=False)
class LocalAggTransaction:
    server_id: str
    timestamp: float
    local_round: int
    params: ModelParams

    def to_record(self) -> dict[str, Any]:
        return {
            "server": self.server_id,
            "t": encode_real(self.timestamp),
            "local_round": int(self.local_round),
            "params": encode_params(self.params),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> LocalAggTransaction:
        return cls(
            server_id=str(rec["server"]),
            timestamp=decode_real(rec["t"]),
            local_round=int(rec["local_round"]),
            params=decode_params(rec["params"]),
        )


def make_transaction(
    server_id: str,
    t: float,
    params: ModelParams,
    local_round: int = 0,
    last_timestamp: float | None = None,
    dim: int | None = None,
) -> LocalAggTransaction:
    if last_timestamp is not None and t <= last_timestamp:
        raise LedgerError(
            f"{server_id}: transaction time {t} does not advance past {last_timestamp}"
        )
    if dim is not None and len(params) != dim:
        raise LedgerError(f"{server_id}: params have {len(params)} entries, task expects {dim}")
    return LocalAggTransaction(server_id, float(t), int(local_round), np.array(params, copy=True))


@dataclass(frozen=True)
class BlockHeader:
    height: int
    k: int
    miner_id: str
    timestamp: float
    prev_hash: str


@dataclass(frozen=True, eq=False)
class GlobalAggBlock:
    header: BlockHeader
    transactions: tuple[LocalAggTransaction, ...]
    global_params: ModelParams

    def to_record(self) -> dict[str, Any]:
        h = self.header
        return {
            "height": h.height,
            "k": h.k,
            "miner": h.miner_id,
            "timestamp": encode_real(h.timestamp),
            "prev_hash": h.prev_hash,
            "transactions": [tx.to_record() for tx in self.transactions],
            "global_params": encode_params(self.global_params),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> GlobalAggBlock:
        header = BlockHeader(
            height=int(rec["height"]),
            k=int(rec["k"]),
            miner_id=str(rec["miner"]),
            timestamp=decode_real(rec["timestamp"]),
            prev_hash=str(rec["prev_hash"]),
        )
        txs = tuple(LocalAggTransaction.from_record(t) for t in rec["transactions"])
        return cls(header, txs, decode_params(rec["global_params"]))

    @cached_property
    def block_hash(self) -> str:
        return _sha256(canonical_json(self.to_record()))

    @property
    def height(self) -> int:
        return self.header.height

    def latest_by_server(self) -> dict[str, LocalAggTransaction]:
        return latest_transactions(self.transactions)


def latest_transactions(txs: Iterable[LocalAggTransaction]) -> dict[str, LocalAggTransaction]:
    latest: dict[str, LocalAggTransaction] = {}
    for tx in txs:
        cur = latest.get(tx.server_id)
        if cur is None or tx.timestamp > cur.timestamp:
            latest[tx.server_id] = tx
    return dict(sorted(latest.items()))


def make_genesis(params: ModelParams) -> GlobalAggBlock:
    header = BlockHeader(height=0, k=0, miner_id=GENESIS_MINER, timestamp=0.0, prev_hash=ZERO_HASH)
    return GlobalAggBlock(header, (), np.array(params, dtype=np.float64, copy=True))


def make_block(
    miner_id: str,
    k: int,
    txs: Sequence[LocalAggTransaction],
    global_params: ModelParams,
    prev_hash: str,
    height: int,
    timestamp: float,
) -> GlobalAggBlock:
    if not txs:
        raise LedgerError(f"block for interval {k} has no transactions")
    expected = global_aggregate([tx.params for tx in latest_transactions(txs).values()])
    if len(expected) != len(global_params) or not np.allclose(
        expected, global_params, rtol=0.0, atol=RECOMPUTE_TOL
    ):
        raise LedgerError(f"block for interval {k}: global params do not match the recomputed mean")
    ordered = tuple(sorted(txs, key=lambda tx: (tx.server_id, tx.timestamp)))
    header = BlockHeader(height, k, miner_id, float(timestamp), prev_hash)
    return GlobalAggBlock(header, ordered, np.array(global_params, dtype=np.float64, copy=True))


@dataclass
class Chain:
    genesis_params: ModelParams
    block_interval: float
    norm_bound: float = DEFAULT_NORM_BOUND
    blocks: list[GlobalAggBlock] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.blocks:
            self.blocks.append(make_genesis(self.genesis_params))

    @property
    def dim(self) -> int:
        return len(self.genesis_params)

    @property
    def head(self) -> GlobalAggBlock:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.head.height

    def last_tx_time(self, server_id: str) -> float | None:
        for block in reversed(self.blocks):
            for tx in reversed(block.transactions):
                if tx.server_id == server_id:
                    return tx.timestamp
        return None

    def assemble(self, miner_id: str, k: int, txs: Sequence[LocalAggTransaction]) -> GlobalAggBlock:
        """Build the miner's candidate for interval ``k`` on top of the current head."""
        latest = latest_transactions(txs)
        theta = global_aggregate([tx.params for tx in latest.values()])
        return make_block(
            miner_id, k, txs, theta, self.head.block_hash, self.height + 1, k * self.block_interval
        )

    def append(self, block: GlobalAggBlock) -> Chain:
        if block.height <= self.height:
            if self.blocks[block.height].block_hash == block.block_hash:
                return self
            raise LedgerError(
                f"conflicting block at height {block.height}: "
                f"{block.block_hash[:12]} vs stored {self.blocks[block.height].block_hash[:12]}"
            )
        if block.height != self.height + 1:
            raise LedgerError(f"gap in chain: head is {self.height}, got block {block.height}")
        if block.header.prev_hash != self.head.block_hash:
            raise LedgerError(f"block {block.height} does not link to head {self.head.block_hash[:12]}")
        self.blocks.append(block)
        return self

    def verify(self) -> str | None:
        """Re-check every block from genesis; returns the first problem or None."""
        replica = Chain(self.genesis_params, self.block_interval, self.norm_bound)
        if self.blocks[0].block_hash != replica.head.block_hash:
            return "genesis block does not match the chain's initial params"
        for block in self.blocks[1:]:
            reason = explain_block(block, replica)
            if reason:
                return f"block {block.height}: {reason}"
            replica.append(block)
        return None

    def replay_accuracy(self, model: Model, test: Dataset) -> list[float]:
        return [evaluate(model, b.global_params, test) for b in self.blocks[1:]]

    def meta(self) -> dict[str, Any]:
        return {
            "block_interval": encode_real(self.block_interval),
            "norm_bound": encode_real(self.norm_bound),
            "dim": self.dim,
        }


def _params_ok(params: ModelParams, dim: int, norm_bound: float) -> str | None:
    if len(params) != dim:
        return f"{len(params)} params, expected {dim}"
    if not np.all(np.isfinite(params)):
        return "non-finite parameter"
    if params.size and float(np.max(np.abs(params))) > norm_bound:
        return f"parameter magnitude {float(np.max(np.abs(params))):.3g} exceeds {norm_bound:g}"
    return None


def explain_block(
    block: GlobalAggBlock, chain: Chain, required: Collection[str] = ()
) -> str | None:
    """Returns why ``block`` may not extend ``chain``, or None when it is valid.

    ``required`` names the live servers the block must carry at least one transaction from.
    """
    h, head = block.header, chain.head
    if h.height != chain.height + 1:
        return f"height {h.height} does not follow {chain.height}"
    if h.prev_hash != head.block_hash:
        return "prev_hash does not match the head block"
    if h.k <= head.header.k:
        return f"interval {h.k} does not advance past {head.header.k}"
    if not math.isclose(h.timestamp, h.k * chain.block_interval, rel_tol=0.0, abs_tol=RECOMPUTE_TOL):
        return f"timestamp {h.timestamp} is not k*F = {h.k * chain.block_interval}"
    if not block.transactions:
        return "no transactions"

    window_start = (h.k - 1) * chain.block_interval
    last_seen: dict[str, float] = {}
    for tx in block.transactions:
        if not (window_start < tx.timestamp <= h.timestamp + RECOMPUTE_TOL):
            return f"transaction of {tx.server_id} at t={tx.timestamp} is outside the interval"
        prev = last_seen.get(tx.server_id, chain.last_tx_time(tx.server_id))
        if prev is not None and tx.timestamp <= prev:
            return f"transactions of {tx.server_id} do not advance in time"
        last_seen[tx.server_id] = tx.timestamp
        bad = _params_ok(tx.params, chain.dim, chain.norm_bound)
        if bad:
            return f"transaction of {tx.server_id}: {bad}"
    missing = sorted(set(required) - last_seen.keys())
    if missing:
        return f"no transaction from live server(s) {', '.join(missing)}"

    bad = _params_ok(block.global_params, chain.dim, chain.norm_bound)
    if bad:
        return f"global params: {bad}"
    expected = global_aggregate([tx.params for tx in block.latest_by_server().values()])
    if not np.allclose(expected, block.global_params, rtol=0.0, atol=RECOMPUTE_TOL):
        return "global params differ from the mean of the latest local models"
    return None


def validate_block(block: GlobalAggBlock, chain: Chain) -> bool:
    return explain_block(block, chain) is None


# ---------------------------------------------------------------------------
# dump / audit


def dump_chain(chain: Chain, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(chain_to_text(chain), encoding="utf-8")
    return path


def chain_to_text(chain: Chain) -> str:
    meta = chain.meta()
    lines = [canonical_json({"chain": meta, "hash": _sha256(canonical_json(meta))})]
    lines.extend(canonical_json({**b.to_record(), "hash": b.block_hash}) for b in chain.blocks)
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ChainAudit:
    ok: bool
    blocks: int
    reason: str = ""
    line: int | None = None
    height: int | None = None

    def describe(self) -> str:
        if self.ok:
            return f"chain ok ({self.blocks} blocks)"
        where = f"block {self.height}" if self.height is not None else f"line {self.line}"
        return f"{where}: {self.reason}"


def _parse_line(raw: bytes) -> dict[str, Any]:
    text = raw.decode("utf-8")
    rec = json.loads(text)
    if not isinstance(rec, dict):
        raise LedgerError("record is not an object")
    if canonical_json(rec) != text:
        raise LedgerError("record is not in canonical form")
    return rec


def audit_chain_text(data: bytes) -> ChainAudit:
    if not data.endswith(b"\n"):
        return ChainAudit(False, 0, "dump does not end with a newline", line=data.count(b"\n") + 1)
    lines = data[:-1].split(b"\n")

    try:
        meta_rec = _parse_line(lines[0])
        meta = meta_rec["chain"]
        if set(meta_rec) != {"chain", "hash"} or _sha256(canonical_json(meta)) != meta_rec["hash"]:
            raise LedgerError("chain header hash mismatch")
        block_interval = decode_real(meta["block_interval"])
        norm_bound = decode_real(meta["norm_bound"])
        dim = int(meta["dim"])
    except (LedgerError, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        return ChainAudit(False, 0, f"bad chain header: {exc}", line=1)

    chain: Chain | None = None
    for lineno, raw in enumerate(lines[1:], start=2):
        height_hint = lineno - 2
        try:
            rec = _parse_line(raw)
            stored_hash = rec.pop("hash")
            block = GlobalAggBlock.from_record(rec)
            if canonical_json(block.to_record()) != canonical_json(rec):
                raise LedgerError("record does not round-trip")
        except (LedgerError, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            return ChainAudit(False, height_hint, f"unreadable record: {exc}", lineno, height_hint)

        if block.block_hash != stored_hash:
            return ChainAudit(False, height_hint, "stored hash does not match contents", lineno, block.height)

        if chain is None:
            if block.height != 0 or block.header.prev_hash != ZERO_HASH or block.transactions:
                return ChainAudit(False, 0, "first block is not a genesis block", lineno, block.height)
            if len(block.global_params) != dim:
                return ChainAudit(False, 0, "genesis params do not match header dim", lineno, 0)
            chain = Chain(block.global_params, block_interval, norm_bound)
            continue

        reason = explain_block(block, chain)
        if reason:
            return ChainAudit(False, chain.height + 1, reason, lineno, block.height)
        chain.append(block)

    if chain is None:
        return ChainAudit(False, 0, "no genesis block", line=2)
    return ChainAudit(True, chain.height + 1)


def audit_chain_file(path: Path) -> ChainAudit:
    return audit_chain_text(path.read_bytes())


def load_chain(path: Path) -> Chain:
    data = path.read_bytes()
    audit = audit_chain_text(data)
    if not audit.ok:
        raise LedgerError(f"{path}: {audit.describe()}")
    lines = data[:-1].split(b"\n")
    meta = json.loads(lines[0])["chain"]
    blocks = []
    for raw in lines[1:]:
        rec = json.loads(raw)
        rec.pop("hash")
        blocks.append(GlobalAggBlock.from_record(rec))
    return Chain(
        blocks[0].global_params,
        decode_real(meta["block_interval"]),
        decode_real(meta["norm_bound"]),
        blocks=blocks,
    )
