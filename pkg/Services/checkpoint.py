"""Forward-trajectory storage for the reverse sweep.

Checkpoints live in memory until the byte budget is used up; later ones are
written to .npz files under a scratch directory and reloaded on access.
"""
from __future__ import annotations

import logging
import shutil
import tempfile
import weakref
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from Models.state import Checkpoint
from Services.errors import MissingCheckpointError

logger = logging.getLogger(__name__)

_ARRAYS = ("T", "u", "v", "p", "phi")


class CheckpointStore:
    def __init__(self, budget_mb: float = 512.0, spill_dir: Optional[Union[str, Path]] = None):
        self.budget_bytes = int(budget_mb * 1024 * 1024)
        self._spill_root = Path(spill_dir) if spill_dir else None
        self._spill_dir: Optional[Path] = None
        self._memory: Dict[int, Checkpoint] = {}
        self._files: Dict[int, Path] = {}
        self._times: List[float] = []
        self.memory_bytes = 0

    def __len__(self) -> int:
        return len(self._times)

    @property
    def spilled(self) -> int:
        return len(self._files)

    def time_of(self, index: int) -> float:
        return self._times[self._normalize(index)]

    def append(self, cp: Checkpoint) -> None:
        if cp.index != len(self._times):
            raise ValueError(f"checkpoint index {cp.index} out of order (expected {len(self._times)})")
        size = cp.nbytes()
        if self.memory_bytes + size <= self.budget_bytes:
            self._memory[cp.index] = cp
            self.memory_bytes += size
        else:
            self._files[cp.index] = self._write(cp)
        self._times.append(float(cp.time))

    def __getitem__(self, index: int) -> Checkpoint:
        k = self._normalize(index)
        if k in self._memory:
            return self._memory[k]
        path = self._files.get(k)
        if path is None or not path.exists():
            raise MissingCheckpointError(k)
        with np.load(path) as data:
            arrays = {name: data[name] for name in _ARRAYS}
            speed = data["speed"] if "speed" in data.files else None
        return Checkpoint(index=k, time=self._times[k], speed=speed, **arrays)

    def _normalize(self, index: int) -> int:
        k = index + len(self._times) if index < 0 else index
        if not 0 <= k < len(self._times):
            raise MissingCheckpointError(index)
        return k

    def _write(self, cp: Checkpoint) -> Path:
        if self._spill_dir is None:
            if self._spill_root is not None:
                self._spill_root.mkdir(parents=True, exist_ok=True)
            self._spill_dir = Path(tempfile.mkdtemp(prefix="rbmelt-ckpt-", dir=self._spill_root))
            weakref.finalize(self, shutil.rmtree, str(self._spill_dir), True)
            logger.info("checkpoint budget exhausted, spilling to %s", self._spill_dir)
        path = self._spill_dir / f"ckpt_{cp.index:06d}.npz"
        arrays = {name: getattr(cp, name) for name in _ARRAYS}
        if cp.speed is not None:
            arrays["speed"] = cp.speed
        np.savez(path, **arrays)
        return path

    def close(self) -> None:
        if self._spill_dir is not None:
            shutil.rmtree(self._spill_dir, ignore_errors=True)
            self._spill_dir = None
        self._files.clear()

    def __enter__(self) -> "CheckpointStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
