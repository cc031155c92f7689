"""Tidy long-format tables (series, x, y) from a finished campaign."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import pandas as pd

from Services.persist import read_manifest, read_table, write_table

logger = logging.getLogger(__name__)

FORWARD_SERIES = ("h_bar", "Ra_e", "max_u", "melted_volume", "front_deviation", "convection_cells")
HISTORY_SERIES = ("J", "J_over_J0", "grad_norm")


def _long(df: pd.DataFrame, x: str, columns: Iterable[str], suffix: str = "") -> List[pd.DataFrame]:
    frames = []
    for col in columns:
        if col in df and x in df:
            part = df[[x, col]].dropna()
            frames.append(pd.DataFrame({"series": f"{col}{suffix}", "x": part[x].to_numpy(), "y": part[col].to_numpy()}))
    return frames


def _forward_frames(directory: Path, suffix: str = "") -> List[pd.DataFrame]:
    return _long(read_table(directory / "diagnostics.csv"), "t", FORWARD_SERIES, suffix)


def _optimize_frames(directory: Path, artifacts: Dict[str, str]) -> List[pd.DataFrame]:
    frames = _long(read_table(directory / artifacts["history"]), "k", HISTORY_SERIES)
    if "evaluations" in artifacts:
        evals = read_table(directory / artifacts["evaluations"])
        frames += _long(evals, "eval", ("J", "best"), "_per_eval")
    if "front_history" in artifacts:
        front = read_table(directory / artifacts["front_history"])
        frames += _long(front, "t", ("h_bar_optimized", "h_bar_initial"))
    return frames


def _sweep_frames(directory: Path, artifacts: Dict[str, str]) -> List[pd.DataFrame]:
    frames = []
    for key, rel in sorted(artifacts.items()):
        if not key.startswith("campaign:"):
            continue
        label = key.split(":", 1)[1]
        frames += _forward_frames((directory / rel).parent, f"[{label}]")
    return frames


def collect_series(directory: Path) -> Tuple[str, pd.DataFrame]:
    manifest = read_manifest(directory)
    kind = manifest["kind"]
    artifacts = manifest.get("artifacts", {})
    if kind == "forward":
        frames = _forward_frames(directory)
    elif kind == "sweep":
        frames = _sweep_frames(directory, artifacts)
    elif kind.startswith("optimize"):
        frames = _optimize_frames(directory, artifacts)
    elif kind == "gradcheck":
        grad = read_table(directory / artifacts["gradient"])
        frames = _long(grad, "index", ("adjoint", "fd", "relative_error"))
    else:
        frames = []
    if not frames:
        logger.warning("campaign %s (%s) has no plottable series", directory, kind)
        return kind, pd.DataFrame(columns=["series", "x", "y"])
    return kind, pd.concat(frames, ignore_index=True)


def cmd_plotdata(directory: Path, out: Path = None) -> Path:
    """Write plotdata/series.csv for the campaign in `directory`."""
    directory = Path(directory)
    kind, tidy = collect_series(directory)
    target = Path(out) if out else directory / "plotdata"
    path = write_table(target / "series.csv", tidy)
    logger.info("%s: %d series, %d rows -> %s", kind, tidy["series"].nunique(), len(tidy), path)
    return path
