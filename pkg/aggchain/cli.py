from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Final

import numpy as np
from rich import print
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from aggchain import artifacts
from aggchain.config import (
    ScenarioConfig,
    StrategyMode,
    config_hash,
    dump_config,
    load_config,
    load_settings,
    resolve_out_dir,
)
from aggchain.errors import AggchainError, ConfigError
from aggchain.ledger import audit_chain_file
from aggchain.metrics import comparison_csv, curves_csv, early_stop_csv, emit_metrics
from aggchain.orchestrator import Comparison, compare_strategies, early_stop_demo, run_scenario
from aggchain.scenarios import BUILTIN, builtin_scenarios, get_scenario

logger = logging.getLogger("aggchain")

EXIT_OK: Final[int] = 0
EXIT_FAILED: Final[int] = 1
EXIT_USAGE: Final[int] = 2

MODES: Final[list[str]] = [m.value for m in StrategyMode]


def setup_logging(verbose: bool) -> None:
    level = "DEBUG" if verbose else load_settings().log_level
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(show_path=False, console=Console(stderr=True))],
        force=True,
    )


def _fmt(x: float | None, digits: int = 4) -> str:
    if x is None:
        return "-"
    return "inf" if not np.isfinite(x) else f"{x:.{digits}f}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(cfg: ScenarioConfig, out: Path, repeats: int, dump_data: bool = False) -> int:
    for r in range(repeats):
        result = run_scenario(cfg.with_overrides(seed=cfg.seed + r))
        root = emit_metrics(result, out, dump_data=dump_data)
        hist = result.miner_histogram()
        print(
            f"[bold]{result.config.name}[/bold] seed={result.config.seed} "
            f"final_acc={_fmt(result.final_accuracy)} chain_height={result.chain.height}"
        )
        print("  miners: " + "  ".join(f"{sid}={n}" for sid, n in hist.items()))
        print(f"  outputs: {root}")
    return EXIT_OK


def _print_comparison(cmp: Comparison) -> None:
    table = Table(title=f"strategy comparison (threshold {_fmt(cmp.threshold)})")
    for col in ("mode", "final acc", "sd", "rounds to thr", "reached", "speedup"):
        table.add_column(col)
    for row in cmp.rows:
        table.add_row(
            row.mode,
            _fmt(row.final_mean),
            _fmt(row.final_sd),
            _fmt(row.rounds_to_threshold, 1),
            f"{row.reached}/{row.runs}",
            "-" if row.speedup is None else f"{row.speedup:+.1%}",
        )
    Console().print(table)


def cmd_compare(cfg: ScenarioConfig, out: Path, repeats: int, jobs: int, modes: Sequence[str], central: bool) -> int:
    cmp = compare_strategies(cfg, modes, repeats=repeats, jobs=jobs, central=central)
    _print_comparison(cmp)
    root = out / f"compare-{cfg.name}-seed{cfg.seed}"
    artifacts.write_manifest(root, artifacts.new_manifest(cfg.name, config_hash(cfg), cfg.seed))
    artifacts.write_text(root, "config.yaml", dump_config(cfg), kind="config")
    artifacts.write_text(root, "comparison.csv", comparison_csv(cmp), kind="comparison")
    artifacts.write_text(root, "curves.csv", curves_csv(cmp), kind="curves")
    print(f"outputs: {root}")
    return EXIT_OK


def cmd_byzantine(cfg: ScenarioConfig, out: Path, repeats: int) -> int:
    """Miner-election counts averaged over ``repeats`` seeds."""
    counts: dict[str, list[int]] = {sid: [] for sid in cfg.server_ids}
    finalized = []
    for r in range(repeats):
        result = run_scenario(cfg.with_overrides(seed=cfg.seed + r))
        for sid, n in result.miner_histogram().items():
            counts[sid].append(n)
        finalized.append(sum(rec.finalized for rec in result.records))

    faulty = {sid for sid, srv in cfg.servers.items() if not srv.honest}
    table = Table(title=f"times acting as miner ({cfg.rounds} rounds, {repeats} seeds)")
    for col in ("server", "faults", "mean", "min", "max", "share"):
        table.add_column(col)
    rows = []
    for sid, vals in counts.items():
        mean = float(np.mean(vals))
        share = mean / cfg.rounds
        faults = "+".join(b.value for b in cfg.servers[sid].faults) or "-"
        table.add_row(sid, faults, f"{mean:.2f}", str(min(vals)), str(max(vals)), f"{share:.1%}")
        rows.append(f"{sid},{faults},{mean!r},{min(vals)},{max(vals)},{share!r}\n")
    Console().print(table)
    print(f"finalized rounds per seed: mean {np.mean(finalized):.2f}")

    root = out / f"byzantine-{cfg.name}-seed{cfg.seed}"
    artifacts.write_manifest(root, artifacts.new_manifest(cfg.name, config_hash(cfg), cfg.seed))
    artifacts.write_text(root, "config.yaml", dump_config(cfg), kind="config")
    artifacts.write_text(root, "miners.csv", "server,faults,mean,min,max,share\n" + "".join(rows), kind="miners")
    print(f"outputs: {root}")

    if faulty and any(float(np.mean(counts[sid])) / cfg.rounds >= 0.05 for sid in faulty):
        logger.warning("a faulty server was elected miner in at least 5%% of rounds")
    return EXIT_OK


def cmd_earlystop(cfg: ScenarioConfig, out: Path, epochs_cap: float, aggregations: int) -> int:
    converged, capped = early_stop_demo(cfg, epochs_cap=epochs_cap, aggregations=aggregations)
    table = Table(title=f"early stopping ({aggregations} aggregations)")
    for col in ("run", "final acc", "sim time", "example visits"):
        table.add_column(col)
    for row in (converged, capped):
        table.add_row(row.label, _fmt(row.final_acc), _fmt(row.sim_time, 2), str(row.visits))
    Console().print(table)

    root = out / f"earlystop-{cfg.name}-seed{cfg.seed}"
    artifacts.write_manifest(root, artifacts.new_manifest(cfg.name, config_hash(cfg), cfg.seed))
    artifacts.write_text(root, "config.yaml", dump_config(cfg), kind="config")
    artifacts.write_text(root, "earlystop.csv", early_stop_csv([converged, capped]), kind="earlystop")
    print(f"outputs: {root}")
    return EXIT_OK


def cmd_validate_chain(path: Path) -> int:
    try:
        audit = audit_chain_file(path)
    except OSError as exc:
        print(f"[red]Cannot read chain dump:[/red] {path} ({exc.strerror})")
        return EXIT_FAILED
    if audit.ok:
        print(f"[green]{path}: {audit.describe()}[/green]")
        return EXIT_OK
    print(f"[red]{path}: invalid chain[/red] {escape(audit.describe())}")
    return EXIT_FAILED


def cmd_scenarios() -> int:
    table = Table(title="builtin scenarios")
    for col in ("name", "servers", "trainers", "rounds", "strategy", "model", "faults"):
        table.add_column(col)
    for name, cfg in builtin_scenarios().items():
        faults = [f"{sid}:{'+'.join(b.value for b in srv.faults)}" for sid, srv in cfg.servers.items() if srv.faults]
        faults += [
            f"{sid}.v{j}:{b.value}" for sid, srv in cfg.servers.items() for j, b in sorted(srv.trainer_faults.items())
        ]
        table.add_row(
            name,
            str(len(cfg.servers)),
            str(cfg.total_trainers),
            str(cfg.rounds),
            cfg.strategy.value,
            cfg.task.model,
            ", ".join(faults) or "-",
        )
    Console().print(table)
    return EXIT_OK


def cmd_dump_config(name: str, out: Path | None) -> int:
    text = dump_config(get_scenario(name))
    if out is None:
        sys.stdout.write(text)
        return EXIT_OK
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _add_scenario_args(p: argparse.ArgumentParser, default: str | None) -> None:
    src = p.add_mutually_exclusive_group(required=default is None)
    src.add_argument("--config", type=Path, help="scenario YAML file")
    src.add_argument("--scenario", choices=sorted(BUILTIN), default=default, help="builtin scenario name")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    p.add_argument("--rounds", type=int, default=None, help="block intervals (overrides the config)")
    p.add_argument("--out", type=Path, default=None, help="output root (default: $AGGCHAIN_OUT_DIR or ./runs)")
    p.add_argument("--repeats", type=int, default=1, help="independent seeds, starting at --seed")


def _scenario_from_args(parser: argparse.ArgumentParser, args: argparse.Namespace) -> ScenarioConfig:
    try:
        if args.config is not None:
            if not args.config.is_file():
                parser.error(f"config file not found: {args.config}")
            cfg = load_config(args.config)
        else:
            cfg = get_scenario(args.scenario)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.rounds is not None:
            overrides["rounds"] = args.rounds
        return cfg.with_overrides(**overrides) if overrides else cfg
    except ConfigError as exc:
        parser.error(str(exc))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aggchain", description="Multi-aggregator federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run one scenario and write its metrics, chain and manifest")
    _add_scenario_args(p_run, default=None)
    p_run.add_argument("--dump-data", action="store_true", help="also snapshot the train and test sets under data/")

    p_cmp = sub.add_parser("compare", help="compare strategy modes over several seeds")
    _add_scenario_args(p_cmp, default="paper5")
    p_cmp.add_argument("--modes", nargs="+", choices=MODES, default=MODES)
    p_cmp.add_argument("--jobs", type=int, default=1, help="worker processes")
    p_cmp.add_argument("--central", action="store_true", help="add a centralized SGD baseline row")
    p_cmp.set_defaults(repeats=10)

    p_byz = sub.add_parser("byzantine", help="count miner elections with a faulty server")
    _add_scenario_args(p_byz, default="byzantine5")
    p_byz.set_defaults(repeats=10)

    p_es = sub.add_parser("earlystop", help="capped-epoch vs till-converged local training")
    _add_scenario_args(p_es, default="paper5")
    p_es.add_argument("--epochs-cap", type=float, default=1.0)
    p_es.add_argument("--aggregations", type=int, default=20)

    p_val = sub.add_parser("validate-chain", help="audit a chain dump")
    p_val.add_argument("path", type=Path)

    sub.add_parser("scenarios", help="list builtin scenarios")

    p_dump = sub.add_parser("dump-config", help="write a builtin scenario as YAML")
    p_dump.add_argument("name", choices=sorted(BUILTIN))
    p_dump.add_argument("--out", type=Path, default=None, help="file to write (default: stdout)")

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "repeats", 1) < 1:
        parser.error("--repeats must be >= 1")

    try:
        setup_logging(args.verbose)
    except ConfigError as exc:
        print(f"[red]{escape(str(exc))}[/red]")
        return EXIT_USAGE

    if args.cmd == "validate-chain":
        return cmd_validate_chain(args.path)
    if args.cmd == "scenarios":
        return cmd_scenarios()
    if args.cmd == "dump-config":
        return cmd_dump_config(args.name, args.out)

    cfg = _scenario_from_args(parser, args)
    try:
        out = resolve_out_dir(args.out)
        if args.cmd == "run":
            return cmd_run(cfg, out, args.repeats, args.dump_data)
        if args.cmd == "compare":
            return cmd_compare(cfg, out, args.repeats, args.jobs, args.modes, args.central)
        if args.cmd == "byzantine":
            return cmd_byzantine(cfg, out, args.repeats)
        if args.cmd == "earlystop":
            return cmd_earlystop(cfg, out, args.epochs_cap, args.aggregations)
    except AggchainError as exc:
        print(f"[red]{type(exc).__name__}: {escape(str(exc))}[/red]")
        return EXIT_FAILED
    except OSError as exc:
        print(f"[red]Cannot write outputs:[/red] {escape(str(exc))}")
        return EXIT_FAILED
    parser.error(f"unknown command {args.cmd!r}")
