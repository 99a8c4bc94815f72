"""
Sweep Service
Runs the fine-tuning experiment matrix (model x task x OOD level x n-shot x
noise) with per-cell derived seeds, a resumable ledger and a consolidated report.
"""

import csv
import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from config import ExperimentConfig
from data_factory import SPLITS, Dataset, build_dataset, derive_seed
from dataset_io import read_dataset, write_dataset
from errors import WorkbenchError
from ledger import STATUS_FAILED, STATUS_OK, SweepCell, SweepLedger
from metrics import REPORT_COLUMNS, evaluate, reports_dir
from pde_systems import SystemTag
from training import MODEL_VARIANTS, finetune, pretrain

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = REPORT_COLUMNS + ('status', 'error', 'seed', 'checkpoint', 'dataset')


def plan_slug(plan_name: str) -> str:
    return plan_name.replace(':', '-')


def cell_seed(seed: int, cell: SweepCell) -> int:
    """Seed of one cell, reproducible in isolation from the global seed."""
    return derive_seed(seed, 'cell', cell.model, cell.task, cell.ood, str(cell.n_shot), repr(cell.sigma))


class SweepService:
    """Prepares shared datasets and checkpoints, then runs sweep cells."""

    def __init__(
        self,
        config: ExperimentConfig,
        ledger: SweepLedger,
        workers: int = 1,
    ):
        """
        Initialize the sweep service.

        Args:
            config: Materialized experiment configuration
            ledger: Cell-completion ledger of this sweep
            workers: Cells run concurrently
        """
        self.config = config
        self.ledger = ledger
        self.workers = max(1, workers)
        self.output_dir = config.output_dir
        self._datasets: Dict[str, Dict[str, Dataset]] = {}
        self._checkpoints: Dict[str, Checkpoint] = {}

    def cells(self) -> List[SweepCell]:
        """Cross product of the sweep axes in report order."""
        sweep = self.config.sweep
        product = itertools.product(sweep['models'], sweep['tasks'], sweep['ood'], sweep['n_shot'], sweep['sigma'])
        return sorted(
            SweepCell(model=m, task=SystemTag.parse(t).value, ood=o, n_shot=int(n), sigma=float(s))
            for m, t, o, n, s in product
        )

    def dataset_splits(self, plan_name: str) -> Dict[str, Dataset]:
        """
        Generate a plan once, persist it and always train from the persisted copy.
        """
        if plan_name in self._datasets:
            return self._datasets[plan_name]
        directory = self.output_dir / 'data' / plan_slug(plan_name)
        plan = self.config.plan(plan_name)
        splits = {}
        for split in SPLITS:
            path = directory / f'{split}.pdewb'
            if not path.exists():
                write_dataset(build_dataset(plan, split), path)
            splits[split] = read_dataset(path)
        self._datasets[plan_name] = splits
        return splits

    def pretrained(self, variant: str) -> Optional[Checkpoint]:
        """Checkpoint of a pre-trained variant, trained on first use; None for scratch."""
        mode, plan_name = MODEL_VARIANTS[variant]
        if mode is None:
            return None
        if variant in self._checkpoints:
            return self._checkpoints[variant]
        path = self.output_dir / 'checkpoints' / f'{variant}.pdewbck'
        if path.exists():
            checkpoint = load_checkpoint(path, self.config.fno_config())
        else:
            splits = self.dataset_splits(plan_name)
            train_config = self.config.train_config(mode=mode, seed=derive_seed(self.config.seed, 'pretrain', variant))
            checkpoint = pretrain(
                train_config,
                splits['train'],
                splits['val'],
                self.config.fno_config(),
                variant=variant,
                log_path=path.with_suffix('.log.jsonl'),
            )
            save_checkpoint(checkpoint, path)
        self._checkpoints[variant] = checkpoint
        return checkpoint

    def prepare(self, cells: List[SweepCell]):
        """Build every shared artifact before cells run concurrently."""
        for variant in sorted({c.model for c in cells}):
            self.pretrained(variant)
        for task, ood in sorted({(c.task, c.ood) for c in cells}):
            self.dataset_splits(f'downstream:{task}:{ood}')

    def run_cell(self, cell: SweepCell) -> dict:
        """
        Fine-tune and evaluate one cell.

        Returns:
            Ledger row; workbench errors become failed rows
        """
        seed = cell_seed(self.config.seed, cell)
        row = dict(cell.to_dict(), seed=seed, status=STATUS_OK, error='')
        try:
            task = SystemTag.parse(cell.task)
            splits = self.dataset_splits(f'downstream:{cell.task}:{cell.ood}')
            base = self.pretrained(cell.model)
            checkpoint = finetune(
                base.copy() if base is not None else None,
                self.config.train_config(mode='data', seed=seed),
                splits['train'],
                splits['val'],
                n_shot=cell.n_shot,
                task=task,
                fno_config=self.config.fno_config(),
                sigma=cell.sigma,
            )
            report = evaluate(checkpoint, splits['test'], model=cell.model, ood=cell.ood, n_shot=cell.n_shot, sigma=cell.sigma)
            row.update(report.to_dict())
        except WorkbenchError as e:
            logger.warning("cell %s failed: %s", cell.key, e)
            row.update(status=STATUS_FAILED, error=f"{type(e).__name__}: {e}")
        return row

    def _run_and_record(self, cell: SweepCell) -> dict:
        row = self.run_cell(cell)
        self.ledger.record(cell, row)
        return row

    def run(self, resume: bool = True) -> dict:
        """
        Execute pending cells and write the consolidated report.

        Args:
            resume: Skip cells the ledger already holds as finished

        Returns:
            Ledger summary
        """
        cells = self.cells()
        pending = [c for c in cells if not (resume and self.ledger.is_complete(c))]
        logger.info("sweep: %d cells, %d pending, %d workers", len(cells), len(pending), self.workers)
        self.prepare(pending)
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                list(pool.map(self._run_and_record, pending))
        else:
            for cell in pending:
                self._run_and_record(cell)
        self.write_report(cells)
        return self.ledger.summary()

    def write_report(self, cells: List[SweepCell]):
        """
        Consolidated CSV with one row per cell, sorted like the cells, next to
        the ledger and under the reports directory as <sweep>.csv.
        """
        rows = self.ledger.load()
        for path in (self.report_path, reports_dir(self.output_dir) / f'{self.name}.csv'):
            self._write_table(path, cells, rows)
            logger.info("sweep report written to %s", path)

    @staticmethod
    def _write_table(path: Path, cells: List[SweepCell], rows: dict):
        path.parent.mkdir(parents=True, exist_ok=True)
        temp_path = path.with_suffix('.csv.tmp')
        with open(temp_path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(SWEEP_COLUMNS)
            for cell in cells:
                row = rows.get(cell.key)
                if row is None:
                    continue
                values = [row.get(column, '') for column in SWEEP_COLUMNS]
                writer.writerow([repr(v) if isinstance(v, float) else v for v in values])
        os.replace(temp_path, path)

    @property
    def name(self) -> str:
        return self.ledger.path.parent.name

    @property
    def report_path(self) -> Path:
        return self.ledger.path.parent / 'report.csv'
