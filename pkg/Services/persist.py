"""Snapshot files, CSV tables and the campaign manifest."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

from Models.state import Grid
from Services.errors import DomainError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17e"
MANIFEST_NAME = "manifest.json"
CODE_VERSION = "rbmelt 0.4.0"

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SnapshotHeader:
    nx: int
    ny: int
    delta: float
    time: float
    name: str


def write_snapshot(path: PathLike, field_values: np.ndarray, grid: Grid, time: float, name: str) -> Path:
    """Write one field: 5 header lines then one value per line, x index fastest."""
    arr = np.asarray(field_values, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != grid.nx:
        raise DomainError(f"snapshot {name!r} has shape {arr.shape}, expected ({grid.nx}, ny)")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"{arr.shape[0]}\n{arr.shape[1]}\n{grid.delta:.17e}\n{time:.17e}\n{name}"
    # (nx, ny) transposed so that i runs fastest in the flat row-major dump
    np.savetxt(path, arr.T.reshape(-1), fmt=FLOAT_FORMAT, header=header, comments="")
    return path


def read_snapshot(path: PathLike) -> Tuple[SnapshotHeader, np.ndarray]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 5:
        raise DomainError(f"{path} is not a snapshot file (short header)")
    try:
        header = SnapshotHeader(
            nx=int(lines[0]), ny=int(lines[1]), delta=float(lines[2]), time=float(lines[3]), name=lines[4].strip()
        )
        values = np.array([float(v) for v in lines[5:] if v.strip()])
    except ValueError as exc:
        raise DomainError(f"malformed snapshot {path}: {exc}") from exc
    if values.size != header.nx * header.ny:
        raise DomainError(f"{path}: expected {header.nx * header.ny} values, found {values.size}")
    return header, values.reshape(header.ny, header.nx).T.copy()


def snapshot_name(field_name: str, index: int) -> str:
    return f"{field_name}_{index:06d}.dat"


def write_table(path: PathLike, rows: Union[pd.DataFrame, Iterable[Mapping[str, Any]]], columns: Optional[List[str]] = None) -> Path:
    """CSV in full double precision."""
    df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    if columns is not None:
        df = df.reindex(columns=columns)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_table(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def config_digest(payload: Union[str, Mapping[str, Any]]) -> str:
    """sha256 of the canonical JSON form."""
    if not isinstance(payload, str):
        payload = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class CampaignManifest:
    directory: Path
    kind: str
    config: Dict[str, Any]
    config_hash: str
    code_version: str = CODE_VERSION
    started: str = field(default_factory=_utc_now)
    finished: Optional[str] = None
    status: str = "running"
    artifacts: Dict[str, str] = field(default_factory=dict)
    counters: Dict[str, Any] = field(default_factory=dict)

    def add(self, key: str, path: PathLike) -> Path:
        path = Path(path)
        try:
            self.artifacts[key] = path.resolve().relative_to(self.directory.resolve()).as_posix()
        except ValueError as exc:
            raise DomainError(f"artifact {path} lies outside the campaign directory {self.directory}") from exc
        return path

    def path(self, key: str) -> Path:
        return self.directory / self.artifacts[key]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "config": self.config,
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "started": self.started,
            "finished": self.finished,
            "status": self.status,
            "artifacts": self.artifacts,
            "counters": self.counters,
        }

    def write(self, status: Optional[str] = None) -> Path:
        if status is not None:
            self.status = status
            self.finished = _utc_now()
        missing = [k for k in self.artifacts if not self.path(k).exists()]
        if missing and self.status == "completed":
            raise DomainError(f"manifest lists missing artifacts: {missing}")
        target = self.directory / MANIFEST_NAME
        self.directory.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return target


def read_manifest(directory: PathLike) -> Dict[str, Any]:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def verify_manifest(directory: PathLike) -> List[str]:
    """Artifacts named by the manifest that are missing or fail to parse."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    problems = []
    for key, rel in manifest.get("artifacts", {}).items():
        path = directory / rel
        if not path.exists():
            problems.append(key)
            continue
        try:
            if path.suffix == ".csv":
                read_table(path)
            elif path.suffix == ".dat":
                read_snapshot(path)
            elif path.suffix == ".json":
                with open(path, encoding="utf-8") as fh:
                    json.load(fh)
        except (ValueError, DomainError, pd.errors.ParserError):
            logger.warning("artifact %s (%s) does not parse", key, rel)
            problems.append(key)
    return problems
