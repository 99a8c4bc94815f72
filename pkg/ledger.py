"""
Sweep Ledger
Tracks which sweep cells have finished so interrupted sweeps can resume.
"""

import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

logger = logging.getLogger(__name__)

STATUS_OK = 'ok'
STATUS_FAILED = 'failed'


@dataclass(frozen=True, order=True)
class SweepCell:
    """One point of the experiment matrix."""

    model: str
    task: str
    ood: str
    n_shot: int
    sigma: float

    @property
    def key(self) -> str:
        return f"{self.model}|{self.task}|{self.ood}|{self.n_shot}|{self.sigma!r}"

    def to_dict(self) -> dict:
        return {
            'model': self.model,
            'task': self.task,
            'ood': self.ood,
            'n_shot': self.n_shot,
            'sigma': self.sigma,
        }


class SweepLedger:
    """A JSON ledger file mapping cell keys to result rows."""

    def __init__(self, path: Union[str, Path], lock: Optional[threading.Lock] = None):
        """
        Initialize a ledger.

        Args:
            path: Ledger file; created on first record
            lock: Lock serializing updates, shared by every handle on the same file
        """
        self.path = Path(path)
        self._lock = lock or threading.Lock()

    def load(self) -> Dict[str, dict]:
        """
        Read all recorded rows.

        Returns:
            Dictionary of cell key -> row, empty when the ledger does not exist yet
        """
        if not self.path.exists():
            return {}
        try:
            with open(self.path, 'r') as f:
                return json.load(f).get('cells', {})
        except (OSError, json.JSONDecodeError) as e:
            logger.error("unreadable ledger %s: %s", self.path, e)
            return {}

    def record(self, cell: SweepCell, row: dict):
        """
        Store the row of a cell, replacing any earlier attempt.

        The file is rewritten through a temporary file and an atomic rename.
        """
        with self._lock:
            cells = self.load()
            cells[cell.key] = row
            self.path.parent.mkdir(parents=True, exist_ok=True)
            temp_path = self.path.with_suffix(self.path.suffix + '.tmp')
            with open(temp_path, 'w') as f:
                json.dump({'cells': cells}, f, indent=2, sort_keys=True)
            os.replace(temp_path, self.path)

    def is_complete(self, cell: SweepCell) -> bool:
        """True when the cell finished without failure."""
        row = self.load().get(cell.key)
        return row is not None and row.get('status') == STATUS_OK

    def rows(self) -> List[dict]:
        return list(self.load().values())

    def summary(self) -> dict:
        """Counts of recorded, finished and failed cells."""
        rows = self.rows()
        done = sum(1 for r in rows if r.get('status') == STATUS_OK)
        failed = sum(1 for r in rows if r.get('status') == STATUS_FAILED)
        return {'recorded': len(rows), 'done': done, 'failed': failed}


class LedgerManager:
    """Hands out ledgers of a sweep directory with one lock per ledger file."""

    def __init__(self, sweep_dir: Union[str, Path]):
        self.sweep_dir = Path(sweep_dir)
        self._locks: Dict[str, threading.Lock] = {}
        self._lock_creation_lock = threading.Lock()

    def _get_lock(self, name: str) -> threading.Lock:
        with self._lock_creation_lock:
            if name not in self._locks:
                self._locks[name] = threading.Lock()
            return self._locks[name]

    def ledger(self, name: str) -> SweepLedger:
        return SweepLedger(self.sweep_dir / name / 'ledger.json', self._get_lock(name))

    def list_sweeps(self) -> List[str]:
        if not self.sweep_dir.exists():
            return []
        return sorted(p.name for p in self.sweep_dir.iterdir() if (p / 'ledger.json').exists())
