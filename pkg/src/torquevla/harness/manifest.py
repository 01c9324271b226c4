"""Run manifests: one JSON file per run directory, never overwritten."""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

MANIFEST_NAME = "run.json"
WORKSPACE_ENV = "TORQUEVLA_HOME"


def workspace_root() -> Path:
    return Path(os.environ.get(WORKSPACE_ENV, ".")).resolve()


def resolve(path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else workspace_root() / p


def code_hash() -> str:
    """sha256 over the package sources, in sorted path order."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for f in sorted(root.rglob("*.py")):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    dataset_hash: str | None
    arm_name: str
    seeds: dict
    outputs: list
    results: dict = field(default_factory=dict)
    parents: list = field(default_factory=list)
    code_hash: str = field(default_factory=code_hash)
    created: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))

    def write(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        path = d / MANIFEST_NAME
        if path.exists():
            raise FileExistsError(f"{path} already exists; manifests are append-only")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        p = Path(path)
        if p.is_dir():
            p = p / MANIFEST_NAME
        return cls(**json.loads(p.read_text()))


def find_manifests(root) -> list:
    return sorted(Path(root).rglob(MANIFEST_NAME))
