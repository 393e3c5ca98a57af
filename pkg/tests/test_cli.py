from pathlib import Path

import pytest
import yaml

from aggchain import artifacts
from aggchain.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from aggchain.config import parse_config
from aggchain.training import load_dataset


def _flat(text: str) -> str:
    return " ".join(text.split())


@pytest.fixture(autouse=True)
def _quiet_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("AGGCHAIN_LOG_LEVEL", raising=False)
    monkeypatch.delenv("AGGCHAIN_OUT_DIR", raising=False)
    monkeypatch.setenv("COLUMNS", "200")


def test_run_writes_outputs(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["run", "--scenario", "tiny", "--rounds", "2", "--out", str(tmp_path)]) == EXIT_OK
    root = tmp_path / "tiny-seed0"
    assert (root / "metrics.csv").is_file()
    assert artifacts.verify_manifest(root) == []
    assert "final_acc=" in capsys.readouterr().out


def test_run_can_snapshot_the_datasets(tmp_path: Path) -> None:
    argv = ["run", "--scenario", "tiny", "--rounds", "1", "--dump-data", "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    root = tmp_path / "tiny-seed0"
    relpaths = [a["relpath"] for a in artifacts.load_manifest(root)["artifacts"]]
    assert relpaths[-2:] == ["data/train.jsonl", "data/test.jsonl"]
    assert artifacts.verify_manifest(root) == []
    assert len(load_dataset(root / "data" / "train.jsonl")) == 400
    assert len(load_dataset(root / "data" / "test.jsonl")) == 200


def test_run_repeats_use_consecutive_seeds(tmp_path: Path) -> None:
    argv = ["run", "--scenario", "tiny", "--rounds", "1", "--seed", "5", "--repeats", "2", "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    assert sorted(p.name for p in tmp_path.iterdir()) == ["tiny-seed5", "tiny-seed6"]


def test_run_from_config_file(tmp_path: Path) -> None:
    cfg = tmp_path / "mini.yaml"
    cfg.write_text(
        "name: mini\nrounds: 1\ntask: {n_train: 200, n_test: 100}\n"
        "servers:\n  P1: {cpu_speeds: [1.0]}\n  P2: {cpu_speeds: [2.0]}\n",
        encoding="utf-8",
    )
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "runs")]) == EXIT_OK
    assert (tmp_path / "runs" / "mini-seed0" / "chain.jsonl").is_file()


def test_missing_config_is_a_usage_error(tmp_path: Path) -> None:
    with pytest.raises(SystemExit) as exc:
        main(["run", "--config", str(tmp_path / "absent.yaml")])
    assert exc.value.code == EXIT_USAGE


def test_invalid_config_is_a_usage_error(tmp_path: Path) -> None:
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("name: bad\nblock_interval: -1\nservers:\n  P1: {cpu_speeds: [1.0]}\n", encoding="utf-8")
    with pytest.raises(SystemExit) as exc:
        main(["run", "--config", str(cfg)])
    assert exc.value.code == EXIT_USAGE


def test_run_requires_a_scenario() -> None:
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == EXIT_USAGE


def test_bad_repeats_is_a_usage_error() -> None:
    with pytest.raises(SystemExit) as exc:
        main(["run", "--scenario", "tiny", "--repeats", "0"])
    assert exc.value.code == EXIT_USAGE


def test_bad_log_level_is_a_usage_error(monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture[str]) -> None:
    monkeypatch.setenv("AGGCHAIN_LOG_LEVEL", "loud")
    assert main(["scenarios"]) == EXIT_USAGE
    assert "How to fix" in _flat(capsys.readouterr().out)


def test_validate_chain(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["run", "--scenario", "tiny", "--rounds", "3", "--out", str(tmp_path)]) == EXIT_OK
    dump = tmp_path / "tiny-seed0" / "chain.jsonl"
    capsys.readouterr()
    assert main(["validate-chain", str(dump)]) == EXIT_OK

    lines = dump.read_text(encoding="utf-8").splitlines(keepends=True)
    # line 0 is the chain header, line 1 genesis
    lines[3] = lines[3].replace('"miner":"P', '"miner":"Q', 1)
    tampered = tmp_path / "tampered.jsonl"
    tampered.write_text("".join(lines), encoding="utf-8")
    capsys.readouterr()
    assert main(["validate-chain", str(tampered)]) == EXIT_FAILED
    out = _flat(capsys.readouterr().out)
    assert "invalid chain" in out
    assert "block 2:" in out


def test_validate_missing_chain(tmp_path: Path) -> None:
    assert main(["validate-chain", str(tmp_path / "none.jsonl")]) == EXIT_FAILED


def test_scenarios_lists_builtins(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["scenarios"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("paper5", "edge5", "byzantine5", "noisy5", "hard5", "tiny"):
        assert name in out


def test_dump_config_round_trips(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["dump-config", "byzantine5"]) == EXIT_OK
    cfg = parse_config(yaml.safe_load(capsys.readouterr().out))
    assert cfg.name == "byzantine5"
    target = tmp_path / "cfg" / "tiny.yaml"
    assert main(["dump-config", "tiny", "--out", str(target)]) == EXIT_OK
    assert parse_config(yaml.safe_load(target.read_text(encoding="utf-8"))).rounds == 5


def test_earlystop_writes_table(tmp_path: Path) -> None:
    argv = ["earlystop", "--scenario", "tiny", "--aggregations", "2", "--epochs-cap", "0.5", "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    text = (tmp_path / "earlystop-tiny-seed0" / "earlystop.csv").read_text(encoding="utf-8")
    assert text.splitlines()[0] == "run,final_acc,sim_time,visits,aggregations"
    assert len(text.splitlines()) == 3
