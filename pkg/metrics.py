"""
Metrics
Relative L2, max-abs and frequency-banded RMSE errors, evaluation of a
checkpoint on a dataset, and CSV/JSON report files.
"""

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from checkpoint import Checkpoint, digest
from data_factory import Dataset
from dataset_io import manifest_hash
from errors import ConfigError, PreconditionError, ShapeError
from fno import predict
from losses import loss_data
from spectral_grid import FrequencyBand, GridSpec, max_radial_mode, radial_band_mask

logger = logging.getLogger(__name__)

BAND_EDGES = (4, 12)
REPORTS_DIRNAME = 'reports'
REPORT_COLUMNS = (
    'model', 'task', 'ood', 'n_shot', 'sigma',
    'mu_l2', 'l_inf', 'frmse_low', 'frmse_mid', 'frmse_high',
)

Predictor = Callable[[np.ndarray, Sequence], np.ndarray]


def _check_pair(preds: np.ndarray, targets: np.ndarray):
    if preds.shape != targets.shape or preds.ndim != 3:
        raise ShapeError(f"predictions {preds.shape} and targets {targets.shape} must be matching (batch, ny, nx)")


def relative_l2_errors(preds: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-sample ||u - u_hat|| / ||u|| over the flattened grid.

    Returns:
        Tuple of (errors, mask of samples with a nonzero target)
    """
    _check_pair(preds, targets)
    p = np.asarray(preds, dtype=np.float64).reshape(len(preds), -1)
    t = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    norms = np.linalg.norm(t, axis=1)
    valid = norms > 0.0
    errors = np.full(len(t), np.nan)
    errors[valid] = np.linalg.norm(p[valid] - t[valid], axis=1) / norms[valid]
    return errors, valid


def mu_l2(preds: np.ndarray, targets: np.ndarray) -> float:
    """
    Mean relative L2 error. Samples with an all-zero target are excluded.

    Raises:
        PreconditionError: Every target is zero
    """
    errors, valid = relative_l2_errors(preds, targets)
    if not valid.any():
        raise PreconditionError("relative error undefined: every target is identically zero")
    if not valid.all():
        logger.warning("excluded %d zero-norm targets from mu_l2", int((~valid).sum()))
    return float(errors[valid].mean())


def l_inf(preds: np.ndarray, targets: np.ndarray, reduce: str = 'max') -> float:
    """
    Max-abs error: over the whole set ('max') or the mean of per-sample maxima ('mean').
    """
    _check_pair(preds, targets)
    per_sample = np.abs(np.asarray(preds, dtype=np.float64) - targets).reshape(len(preds), -1).max(axis=1)
    if reduce == 'max':
        return float(per_sample.max())
    if reduce == 'mean':
        return float(per_sample.mean())
    raise ConfigError(f"unknown l_inf reduction '{reduce}'")


def band_error_energy(preds: np.ndarray, targets: np.ndarray, band: FrequencyBand) -> np.ndarray:
    """
    Per-sample squared spectral error inside a radial band.

    The DFT is scaled by 1/(nx*ny) so the zero mode equals the field mean.

    Raises:
        ConfigError: Band invalid for the grid or holding no spectral index
    """
    _check_pair(preds, targets)
    ny, nx = preds.shape[1:]
    grid = GridSpec(nx=nx, ny=ny)
    mask = radial_band_mask(grid, band)
    if not mask.any():
        raise ConfigError(f"band ({band.k_min}, {band.k_max}) holds no spectral index")
    diff = np.fft.fft2(np.asarray(preds, dtype=np.float64) - targets, axes=(-2, -1)) / grid.size
    return (np.abs(diff) ** 2 * mask).sum(axis=(-2, -1))


def frmse(preds: np.ndarray, targets: np.ndarray, band: FrequencyBand) -> float:
    """
    Banded spectral RMSE: mean over samples of sqrt(band energy) / (k_max - k_min + 1).
    """
    energy = band_error_energy(preds, targets, band)
    return float((np.sqrt(energy) / (band.k_max - band.k_min + 1)).mean())


def default_bands(grid: GridSpec, edges: Tuple[int, int] = BAND_EDGES) -> Dict[str, FrequencyBand]:
    """Low [0, k_low], mid [k_low+1, k_high], high [k_high+1, max radial mode]."""
    k_low, k_high = edges
    top = max_radial_mode(grid)
    if top <= k_high:
        raise ConfigError(f"grid {grid.nx}x{grid.ny} is too coarse for band edges {edges}")
    bands = {
        'low': FrequencyBand(0, k_low),
        'mid': FrequencyBand(k_low + 1, k_high),
        'high': FrequencyBand(k_high + 1, top),
    }
    for band in bands.values():
        band.validate(grid)
    return bands


@dataclass
class MetricsReport:
    """One evaluation row with provenance."""

    task: str
    n_samples: int
    mu_l2: float
    l_inf: float
    frmse_low: float
    frmse_mid: float
    frmse_high: float
    model: str = ''
    ood: str = ''
    n_shot: int = 0
    sigma: float = 0.0
    data_loss: float = 0.0
    l_inf_mean: float = 0.0
    excluded: int = 0
    band_edges: List[int] = field(default_factory=lambda: list(BAND_EDGES))
    checkpoint: str = ''
    dataset: str = ''

    def __post_init__(self):
        if self.n_samples <= 0:
            raise PreconditionError("a report needs at least one sample")

    def row(self) -> List:
        return [getattr(self, column) for column in REPORT_COLUMNS]

    def sort_key(self) -> Tuple:
        return (self.model, self.task, self.ood, self.n_shot, self.sigma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'MetricsReport':
        return cls(**data)


def compute_report(
    preds: np.ndarray,
    targets: np.ndarray,
    task: str,
    edges: Tuple[int, int] = BAND_EDGES,
    **provenance,
) -> MetricsReport:
    """All metrics of one prediction batch."""
    ny, nx = targets.shape[1:]
    bands = default_bands(GridSpec(nx=nx, ny=ny), edges)
    _, valid = relative_l2_errors(preds, targets)
    data_loss, _ = loss_data(preds, targets)
    return MetricsReport(
        task=task,
        n_samples=len(targets),
        mu_l2=mu_l2(preds, targets),
        l_inf=l_inf(preds, targets),
        l_inf_mean=l_inf(preds, targets, reduce='mean'),
        frmse_low=frmse(preds, targets, bands['low']),
        frmse_mid=frmse(preds, targets, bands['mid']),
        frmse_high=frmse(preds, targets, bands['high']),
        data_loss=data_loss,
        excluded=int((~valid).sum()),
        band_edges=list(edges),
        **provenance,
    )


def evaluate(
    checkpoint: Checkpoint,
    dataset: Dataset,
    predictor: Optional[Predictor] = None,
    batch_size: int = 64,
    edges: Tuple[int, int] = BAND_EDGES,
    **provenance,
) -> MetricsReport:
    """
    Run inference on a dataset and score it.

    Args:
        checkpoint: Model to evaluate
        dataset: Samples with solutions, normally the test split
        predictor: Replaces the network, called with (inputs, samples)
        batch_size: Inference batch size
        edges: Band edges (k_low, k_high)
        **provenance: model, ood, n_shot, sigma for the report row

    Raises:
        LayoutError: Dataset inputs do not fit the checkpoint's channels
        PreconditionError: A sample has no solution
    """
    if not all(s.has_solution for s in dataset.samples):
        raise PreconditionError("evaluation needs a solution for every sample")
    if dataset.split != 'test':
        logger.info("evaluating on the %s split", dataset.split)
    inputs = checkpoint.layout.build(dataset.samples, checkpoint.config.grid)
    targets = np.stack([s.solution for s in dataset.samples])
    if predictor is None:
        preds = predict(checkpoint.params, inputs, batch_size)
    else:
        preds = np.asarray(predictor(inputs, dataset.samples), dtype=np.float64)

    tasks = sorted({s.system.value for s in dataset.samples})
    provenance.setdefault('model', checkpoint.meta.get('variant', ''))
    return compute_report(
        preds,
        targets,
        task='+'.join(tasks),
        edges=edges,
        checkpoint=digest(checkpoint),
        dataset=manifest_hash(dataset),
        **provenance,
    )


def reports_dir(output_dir: Union[str, Path]) -> Path:
    """Directory the results API lists."""
    return Path(output_dir) / REPORTS_DIRNAME


def report_filename(model: str, task: str, ood: str, n_shot: int, fmt: str = 'csv') -> str:
    return f"{model}-{task}-{ood}-{n_shot}.{fmt}"


def emit_report(reports: List[MetricsReport], path: Union[str, Path], fmt: str = 'csv'):
    """
    Write report rows sorted by (model, task, ood, n_shot, sigma).

    CSV carries the fixed columns; JSON carries every field of every report.
    """
    if fmt not in ('csv', 'json'):
        raise ConfigError(f"unknown report format '{fmt}'")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(reports, key=MetricsReport.sort_key)
    temp_path = path.with_suffix(path.suffix + '.tmp')
    if fmt == 'csv':
        with open(temp_path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(REPORT_COLUMNS)
            for report in ordered:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in report.row()])
    else:
        with open(temp_path, 'w') as f:
            json.dump([r.to_dict() for r in ordered], f, indent=2)
    os.replace(temp_path, path)
    logger.info("wrote %d report rows to %s", len(ordered), path)


def load_report(path: Union[str, Path]) -> List[MetricsReport]:
    """Read a JSON report back."""
    with open(path, 'r') as f:
        try:
            return [MetricsReport.from_dict(entry) for entry in json.load(f)]
        except (json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"{path} is not a JSON report: {e}") from e


def read_report_rows(path: Union[str, Path]) -> List[dict]:
    """Rows of a CSV or JSON report as plain dicts."""
    path = Path(path)
    if path.suffix == '.json':
        with open(path, 'r') as f:
            return json.load(f)
    with open(path, 'r', newline='') as f:
        return list(csv.DictReader(f))
