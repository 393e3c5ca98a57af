from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from aggchain import __version__

MANIFEST_FILENAME = "manifest.json"


@dataclass(frozen=True)
class ArtifactRecord:
    kind: str
    relpath: str
    bytes: int
    sha256: str


def run_dir(out_root: Path, scenario: str, seed: int) -> Path:
    p = out_root / f"{scenario}-seed{seed}"
    p.mkdir(parents=True, exist_ok=True)
    return p


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _manifest_path(root: Path) -> Path:
    return root / MANIFEST_FILENAME


def new_manifest(scenario: str, config_hash: str, seed: int) -> dict[str, Any]:
    # no wall-clock fields: reruns must produce identical bytes
    return {
        "scenario": scenario,
        "config_hash": config_hash,
        "seed": int(seed),
        "tool_version": __version__,
        "artifacts": [],
    }


def load_manifest(root: Path) -> dict[str, Any] | None:
    p = _manifest_path(root)
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))


def write_manifest(root: Path, manifest: dict[str, Any]) -> None:
    root.mkdir(parents=True, exist_ok=True)
    _manifest_path(root).write_text(
        json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def append_manifest(root: Path, record: ArtifactRecord) -> None:
    """
    De-dup on relpath: rewriting a file replaces its record instead of adding one.
    """
    manifest = load_manifest(root)
    if manifest is None:
        raise FileNotFoundError(f"no manifest in {root}; call write_manifest(new_manifest(...)) first")
    artifacts: list[dict[str, Any]] = list(manifest.get("artifacts", []))

    rec_dict = asdict(record)
    for i, existing in enumerate(artifacts):
        if existing.get("relpath") == rec_dict["relpath"]:
            artifacts[i] = rec_dict
            break
    else:
        artifacts.append(rec_dict)

    manifest["artifacts"] = artifacts
    write_manifest(root, manifest)


def record_file(root: Path, path: Path, kind: str) -> ArtifactRecord:
    """Register a file some other writer already produced under ``root``."""
    data = path.read_bytes()
    rec = ArtifactRecord(
        kind=kind,
        relpath=path.relative_to(root).as_posix(),
        bytes=len(data),
        sha256=_sha256(data),
    )
    append_manifest(root, rec)
    return rec


def write_bytes(root: Path, relpath: str, data: bytes, kind: str) -> Path:
    p = root / relpath
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(data)
    append_manifest(
        root,
        ArtifactRecord(kind=kind, relpath=Path(relpath).as_posix(), bytes=len(data), sha256=_sha256(data)),
    )
    return p


def write_text(root: Path, relpath: str, text: str, kind: str) -> Path:
    return write_bytes(root, relpath, text.encode("utf-8"), kind=kind)


def write_json(root: Path, relpath: str, obj: Any, kind: str) -> Path:
    text = json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True) + "\n"
    return write_text(root, relpath, text, kind=kind)


def verify_manifest(root: Path) -> list[str]:
    """Paths whose bytes no longer match their manifest record."""
    manifest = load_manifest(root)
    if manifest is None:
        return [MANIFEST_FILENAME]
    bad = []
    for rec in manifest.get("artifacts", []):
        p = root / rec["relpath"]
        if not p.exists() or _sha256(p.read_bytes()) != rec["sha256"]:
            bad.append(rec["relpath"])
    return bad
