"""
Loss Functions
Data (MSE), physics (steady-operator residual) and hybrid losses with their
gradients with respect to the predictions.

Every loss is the mean over samples of a per-sample loss; the per-sample data
loss is the mean squared error over grid points.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from errors import ConfigError, PreconditionError, ShapeError, UnsupportedSystemError
from pde_systems import steady_symbol
from spectral_grid import GridSpec, apply_multiplier

LOSS_MODES = ('data', 'physics', 'hybrid')


@dataclass(frozen=True)
class LossConfig:
    """Loss regime; alpha weighs the data term in hybrid mode only."""

    mode: str = 'data'
    alpha: float = 0.5

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode '{self.mode}'")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha={self.alpha} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {'mode': self.mode, 'alpha': self.alpha}


def _per_sample_data(pred: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample MSE and its gradient, both unscaled by the batch size."""
    error = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    points = error[0].size
    return (error ** 2).mean(axis=(-2, -1)), 2.0 * error / points


def _per_sample_physics(pred: np.ndarray, samples: Sequence, grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample mean squared residual and its gradient through the adjoint multiplier."""
    losses = np.empty(len(samples))
    grads = np.empty(pred.shape, dtype=np.float64)
    points = grid.size
    for b, sample in enumerate(samples):
        if not sample.system.is_steady:
            raise UnsupportedSystemError(f"physics loss needs a steady system, got {sample.system.value}")
        symbol = steady_symbol(sample.system, sample.coeffs, grid)
        u = np.asarray(pred[b], dtype=np.float64)
        r = apply_multiplier(u, symbol) - sample.source
        losses[b] = (r ** 2).mean()
        grads[b] = 2.0 * apply_multiplier(r, np.conj(symbol)) / points
    return losses, grads


def _check_batch(pred: np.ndarray, count: int):
    if pred.ndim != 3 or pred.shape[0] != count:
        raise ShapeError(f"predictions of shape {pred.shape} do not match a batch of {count}")


def loss_data(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean squared error over batch and grid.

    Args:
        pred: (batch, ny, nx) predictions
        target: (batch, ny, nx) solutions

    Returns:
        Tuple of (loss, dloss/dpred)
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    losses, grads = _per_sample_data(pred, target)
    batch = pred.shape[0]
    return float(losses.mean()), grads / batch


def loss_physics(pred: np.ndarray, samples: Sequence, grid: GridSpec) -> Tuple[float, np.ndarray]:
    """
    Mean squared residual G(pred) - f of steady samples.

    Raises:
        UnsupportedSystemError: A sample is time-dependent
    """
    _check_batch(pred, len(samples))
    losses, grads = _per_sample_physics(pred, samples, grid)
    return float(losses.mean()), grads / len(samples)


def loss_hybrid(pred: np.ndarray, samples: Sequence, alpha: float, grid: GridSpec) -> Tuple[float, np.ndarray]:
    """
    alpha * data + (1 - alpha) * physics for samples with a solution, physics alone otherwise.

    Terms with zero weight are not evaluated, so alpha=1 on a fully solved batch
    reduces to the data loss and a batch without solutions to the physics loss.
    """
    _check_batch(pred, len(samples))
    batch = len(samples)
    losses = np.zeros(batch)
    grads = np.zeros(pred.shape, dtype=np.float64)

    solved = [b for b, s in enumerate(samples) if s.has_solution]
    unsolved = [b for b, s in enumerate(samples) if not s.has_solution]
    if solved:
        solved_pred = pred[solved]
        if alpha > 0.0:
            target = np.stack([samples[b].solution for b in solved])
            data_losses, data_grads = _per_sample_data(solved_pred, target)
            if alpha == 1.0:
                losses[solved], grads[solved] = data_losses, data_grads
            else:
                losses[solved] = alpha * data_losses
                grads[solved] = alpha * data_grads
        if alpha < 1.0:
            phys_losses, phys_grads = _per_sample_physics(solved_pred, [samples[b] for b in solved], grid)
            if alpha == 0.0:
                losses[solved], grads[solved] = phys_losses, phys_grads
            else:
                losses[solved] += (1.0 - alpha) * phys_losses
                grads[solved] += (1.0 - alpha) * phys_grads
    if unsolved:
        phys_losses, phys_grads = _per_sample_physics(pred[unsolved], [samples[b] for b in unsolved], grid)
        losses[unsolved], grads[unsolved] = phys_losses, phys_grads
    return float(losses.mean()), grads / batch


def compute_loss(config: LossConfig, pred: np.ndarray, samples: Sequence, grid: GridSpec) -> Tuple[float, np.ndarray]:
    """
    Dispatch on the loss mode.

    Raises:
        PreconditionError: Data mode on samples without solutions
    """
    if config.mode == 'data':
        if not all(s.has_solution for s in samples):
            raise PreconditionError("data loss needs a solution for every sample")
        return loss_data(pred, np.stack([s.solution for s in samples]))
    if config.mode == 'physics':
        return loss_physics(pred, samples, grid)
    return loss_hybrid(pred, samples, config.alpha, grid)
