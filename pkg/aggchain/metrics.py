"""
Run outputs: the per-round metrics table, the consensus log, the summary, and
the run directory that ties them together under a manifest.
"""

from __future__ import annotations

import csv
import io
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Final

from aggchain import artifacts
from aggchain.aggregation import ACTION_FIELDS
from aggchain.config import config_hash, dump_config
from aggchain.consensus import ConsensusEvent
from aggchain.errors import AggchainError
from aggchain.ledger import chain_to_text
from aggchain.orchestrator import Comparison, EarlyStopRow, RoundRecord, ScenarioResult
from aggchain.training import dataset_to_text

logger = logging.getLogger(__name__)

METRICS_HEADER: Final[tuple[str, ...]] = (
    "round",
    "miner",
    "global_acc",
    "server_id",
    "local_acc",
    "trust",
    "reward",
    *ACTION_FIELDS,
    "pi",
    "finalized",
    "global_loss",
    "sim_time",
    "visits",
    "local_rounds",
    "offloaded",
)
CONSENSUS_HEADER: Final[tuple[str, ...]] = ("round", "t", "event", "server_id", "detail")


def _real(x: float) -> str:
    return repr(float(x))


def metric_rows(records: Sequence[RoundRecord]) -> list[list[str]]:
    rows = []
    for rec in records:
        for s in rec.servers:
            rows.append(
                [
                    str(rec.k),
                    rec.miner_id,
                    _real(rec.global_acc),
                    s.server_id,
                    _real(s.local_acc),
                    _real(s.trust),
                    _real(s.reward),
                    *(_real(v) for v in s.action.as_vector()),
                    _real(s.pi),
                    "1" if rec.finalized else "0",
                    _real(rec.global_loss),
                    _real(rec.sim_time),
                    str(rec.visits),
                    str(s.local_rounds),
                    str(s.offloaded),
                ]
            )
    return rows


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def metrics_csv(records: Sequence[RoundRecord]) -> str:
    if not records:
        raise AggchainError("no round records to write")
    return _csv_text(METRICS_HEADER, metric_rows(records))


def consensus_csv(events: Sequence[ConsensusEvent]) -> str:
    rows = [[str(e.k), _real(e.at), e.event, e.server_id, e.detail] for e in events]
    return _csv_text(CONSENSUS_HEADER, rows)


def summary(result: ScenarioResult) -> dict[str, Any]:
    cfg = result.config
    last = result.records[-1]
    return {
        "scenario": cfg.name,
        "seed": cfg.seed,
        "strategy": cfg.strategy.value,
        "rounds": len(result.records),
        "finalized_rounds": sum(r.finalized for r in result.records),
        "final_global_acc": last.global_acc,
        "final_global_loss": last.global_loss,
        "final_local_acc": {s.server_id: s.local_acc for s in last.servers},
        "final_trust": dict(result.trust.scores),
        "miner_histogram": result.miner_histogram(),
        "elected_histogram": result.elected_histogram(),
        "total_visits": last.visits,
        "chain_height": result.chain.height,
        "replay_buffer": len(result.buffer),
        "event_digest": result.event_digest,
    }


def emit_metrics(result: ScenarioResult, out_root: Path, *, dump_data: bool = False) -> Path:
    """Write every artifact of one run into ``<out_root>/<scenario>-seed<seed>/``.

    With ``dump_data`` the generated train and test sets are snapshotted under ``data/``.
    """
    cfg = result.config
    try:
        root = artifacts.run_dir(out_root, cfg.name, cfg.seed)
        artifacts.write_manifest(root, artifacts.new_manifest(cfg.name, config_hash(cfg), cfg.seed))
        artifacts.write_text(root, "config.yaml", dump_config(cfg), kind="config")
        artifacts.write_text(root, "metrics.csv", metrics_csv(result.records), kind="metrics")
        artifacts.write_text(root, "consensus.csv", consensus_csv(result.consensus_log), kind="consensus_log")
        artifacts.write_json(root, "summary.json", summary(result), kind="summary")
        artifacts.write_text(root, "chain.jsonl", chain_to_text(result.chain), kind="chain")
        for sid, agent in sorted(result.agents.items()):
            path = agent.save(root / "agents" / f"{sid}.npy")
            artifacts.record_file(root, path, kind="agent_checkpoint")
        if dump_data:
            for split, dataset in (("train", result.train), ("test", result.test)):
                artifacts.write_text(root, f"data/{split}.jsonl", dataset_to_text(dataset), kind="dataset")
    except OSError as exc:
        raise AggchainError(f"cannot write run outputs under {out_root}: {exc}") from None
    logger.info("wrote run outputs to %s", root)
    return root


def comparison_rows(cmp: Comparison) -> list[dict[str, Any]]:
    return [
        {
            "mode": row.mode,
            "final_mean": row.final_mean,
            "final_sd": row.final_sd,
            "rounds_to_threshold": row.rounds_to_threshold,
            "reached": row.reached,
            "runs": row.runs,
            "speedup": row.speedup,
        }
        for row in cmp.rows
    ]


def comparison_csv(cmp: Comparison) -> str:
    header = ("mode", "final_mean", "final_sd", "rounds_to_threshold", "reached", "runs", "speedup")
    rows = [
        [
            r["mode"],
            _real(r["final_mean"]),
            _real(r["final_sd"]),
            "inf" if r["rounds_to_threshold"] == float("inf") else _real(r["rounds_to_threshold"]),
            str(r["reached"]),
            str(r["runs"]),
            "" if r["speedup"] is None else _real(r["speedup"]),
        ]
        for r in comparison_rows(cmp)
    ]
    return _csv_text(header, rows)


def curves_csv(cmp: Comparison) -> str:
    header = ("round", *(row.mode for row in cmp.rows))
    n = len(cmp.rows[0].curve)
    rows = [[str(k + 1), *(_real(row.curve[k]) for row in cmp.rows)] for k in range(n)]
    return _csv_text(header, rows)


def early_stop_csv(rows: Sequence[EarlyStopRow]) -> str:
    header = ("run", "final_acc", "sim_time", "visits", "aggregations")
    body = [[r.label, _real(r.final_acc), _real(r.sim_time), str(r.visits), str(r.aggregations)] for r in rows]
    return _csv_text(header, body)
