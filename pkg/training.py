"""
Training
Pre-training and fine-tuning loops with seeded shuffling, Adam under a cosine
schedule, best-validation checkpointing and a line-delimited JSON epoch log,
plus the zero-shot channel assignment for coefficients new to a model.
"""

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from augmentation import add_noise, subsample_nshot
from checkpoint import Checkpoint, digest
from data_factory import Dataset, derive_seed
from errors import ConfigError, NumericAbortError
from fno import (
    LIVE_CHANNELS,
    ChannelLayout,
    FnoConfig,
    backward,
    fit_normalization,
    forward,
    init_params,
    predict,
    refit_degenerate_channels,
)
from losses import LossConfig, compute_loss, loss_data
from optim import OptimizerState, adam_step, cosine_lr
from pde_systems import SystemTag

logger = logging.getLogger(__name__)

# Model variant -> (loss mode, pre-training plan). Scratch has no pre-training.
MODEL_VARIANTS = {
    'scratch': (None, None),
    'data': ('data', 'expensive'),
    'physics': ('physics', 'synthetic'),
    'physics-extended': ('physics', 'extended'),
    'hybrid': ('hybrid', 'expensive'),
    'hybrid-extended': ('hybrid', 'extended'),
}

NEW_COEFFICIENTS = ('K',)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs={self.epochs} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"lr_min={self.lr_min} must be below lr_max={self.lr_max}")

    def to_dict(self) -> dict:
        return {
            'epochs': self.epochs,
            'batch_size': self.batch_size,
            'lr_max': self.lr_max,
            'lr_min': self.lr_min,
            'seed': self.seed,
            'loss': self.loss.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainConfig':
        values = dict(data)
        values['loss'] = LossConfig(**values.get('loss', {}))
        return cls(**values)


class EpochLog:
    """Appends one JSON record per epoch to a file; keeps them in memory as well."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.records: List[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text('')

    def append(self, record: dict):
        self.records.append(record)
        if self.path:
            with open(self.path, 'a') as f:
                f.write(json.dumps(record) + '\n')


def _batched_loss(checkpoint: Checkpoint, samples: Sequence, inputs: np.ndarray, loss: LossConfig, batch_size: int) -> float:
    """Per-sample mean loss over a whole split without tapes."""
    grid = checkpoint.config.grid
    total = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        pred = predict(checkpoint.params, inputs[start:start + batch_size])
        value, _ = compute_loss(loss, pred, chunk, grid)
        total += value * len(chunk)
    return total / len(samples)


def _check_loss_mode(loss: LossConfig, *datasets: Dataset):
    for ds in datasets:
        if loss.mode == 'data' and not all(s.has_solution for s in ds.samples):
            raise ConfigError(f"data loss needs solutions; {ds.split} split has samples without one")
        if loss.mode in ('physics', 'hybrid') and not all(s.system.is_steady for s in ds.samples):
            raise ConfigError(f"{loss.mode} loss needs steady systems in the {ds.split} split")


def train(
    checkpoint: Checkpoint,
    config: TrainConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    log_path: Optional[Union[str, Path]] = None,
) -> Checkpoint:
    """
    Optimize a checkpoint and return the parameters with the lowest validation loss.

    The starting parameters count as epoch 0 candidates.

    Raises:
        NumericAbortError: Non-finite loss or gradient; carries the best checkpoint so far
    """
    _check_loss_mode(config.loss, train_ds, val_ds)
    grid = checkpoint.config.grid
    layout = checkpoint.layout
    train_inputs = layout.build(train_ds.samples, grid)
    val_inputs = layout.build(val_ds.samples, grid)
    n = len(train_ds)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, 'shuffle'))

    params = checkpoint.params.copy()
    state = OptimizerState.zeros_like(params.tensors)
    best_val = _batched_loss(checkpoint, val_ds.samples, val_inputs, config.loss, config.batch_size)
    best = Checkpoint(params=params.copy(), layout=layout, meta=dict(checkpoint.meta))
    best_epoch = 0
    history = [best_val]
    log = EpochLog(log_path)

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for batch_start in range(0, n, config.batch_size):
            idx = order[batch_start:batch_start + config.batch_size]
            samples = [train_ds.samples[i] for i in idx]
            pred, tape = forward(params, train_inputs[idx])
            value, seed_grad = compute_loss(config.loss, pred, samples, grid)
            if not np.isfinite(value):
                raise NumericAbortError(
                    f"non-finite training loss at epoch {epoch}",
                    checkpoint=best,
                    diagnostics={'epoch': epoch, 'step': state.step, 'loss': value},
                )
            grads = backward(tape, seed_grad)
            lr = cosine_lr(state.step, total_steps, config.lr_max, config.lr_min)
            try:
                params.tensors, state = adam_step(params.tensors, grads, state, lr)
            except NumericAbortError as e:
                raise NumericAbortError(str(e), checkpoint=best, diagnostics={'epoch': epoch, **e.diagnostics}) from e
            epoch_loss += value * len(idx)

        current = Checkpoint(params=params, layout=layout, meta=checkpoint.meta)
        val_loss = _batched_loss(current, val_ds.samples, val_inputs, config.loss, config.batch_size)
        if not np.isfinite(val_loss):
            raise NumericAbortError(
                f"non-finite validation loss at epoch {epoch}", checkpoint=best, diagnostics={'epoch': epoch}
            )
        history.append(val_loss)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best = Checkpoint(params=params.copy(), layout=layout, meta=dict(checkpoint.meta))

        log.append({
            'epoch': epoch,
            'train_loss': epoch_loss / n,
            'val_loss': val_loss,
            'lr': lr,
            'wall_ms': round(1000.0 * (time.perf_counter() - started), 3),
        })
        logger.debug("epoch %d train %.4e val %.4e", epoch, epoch_loss / n, val_loss)

    best.meta.update({
        'train': config.to_dict(),
        'best_epoch': best_epoch,
        'best_val_loss': best_val,
        'val_history': history,
    })
    logger.info("training done: best val loss %.4e at epoch %d", best_val, best_epoch)
    return best


def pretrain(
    config: TrainConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    fno_config: FnoConfig,
    variant: Optional[str] = None,
    log_path: Optional[Union[str, Path]] = None,
) -> Checkpoint:
    """
    Pre-train a fresh network on a mixed steady-system dataset.

    Args:
        config: Training hyperparameters and loss regime
        train_ds: Training split of a pre-training plan
        val_ds: Validation split of the same plan
        fno_config: Architecture, with the full eight-channel input
        variant: Model variant recorded in the checkpoint
        log_path: Epoch log destination

    Returns:
        Best-validation checkpoint
    """
    layout = ChannelLayout.full()
    if fno_config.in_channels != len(layout):
        raise ConfigError(f"pre-trained models take {len(layout)} input channels, got {fno_config.in_channels}")
    _check_loss_mode(config.loss, train_ds, val_ds)
    params = init_params(fno_config, np.random.default_rng(derive_seed(config.seed, 'init')))
    params = fit_normalization(params, layout.build(train_ds.samples, fno_config.grid))
    start = Checkpoint(params=params, layout=layout, meta={
        'variant': variant or config.loss.mode,
        'stage': 'pretrain',
        'loss': config.loss.to_dict(),
        'dataset': train_ds.manifest.get('plan'),
    })
    logger.info("pre-training %s on %d samples", start.meta['variant'], len(train_ds))
    return train(start, config, train_ds, val_ds, log_path)


def scratch_checkpoint(fno_config: FnoConfig, task: SystemTag, seed: int) -> Checkpoint:
    """Fresh network with only the channels the task needs."""
    layout = ChannelLayout.reduced(task)
    config = replace(fno_config, in_channels=len(layout))
    params = init_params(config, np.random.default_rng(derive_seed(seed, 'init', 'scratch', task.value)))
    return Checkpoint(params=params, layout=layout, meta={'variant': 'scratch', 'stage': 'init'})


def assign_new_coefficient_channel(
    checkpoint: Checkpoint,
    downstream: Dataset,
    name: str = 'K',
    batch_size: int = 64,
) -> int:
    """
    Pick the input channel for a coefficient the model never saw.

    Every coefficient channel is tried in turn with the new field placed there;
    the channel with the lowest zero-shot validation data loss wins, lowest
    index on ties.
    """
    candidates = [c for c in range(1, len(checkpoint.layout)) if checkpoint.layout.channels[c] != 'source']
    if len(candidates) == 1:
        return candidates[0]
    grid = checkpoint.config.grid
    targets = np.stack([s.solution for s in downstream.samples])
    best_channel, best_loss = candidates[0], np.inf
    for channel in candidates:
        layout = checkpoint.layout.with_coefficient(name, channel)
        inputs = layout.build(downstream.samples, grid)
        pred = predict(checkpoint.params, inputs, batch_size)
        value, _ = loss_data(pred, targets)
        logger.debug("channel %d: zero-shot loss %.4e", channel, value)
        if np.isfinite(value) and value < best_loss:
            best_channel, best_loss = channel, value
    logger.info("new coefficient '%s' assigned to channel %d", name, best_channel)
    return best_channel


def prepare_layout(checkpoint: Checkpoint, task: SystemTag, val_ds: Dataset) -> Checkpoint:
    """Route coefficients new to the model into a channel chosen by zero-shot validation."""
    for name in NEW_COEFFICIENTS:
        if name in LIVE_CHANNELS[task] and name not in checkpoint.layout.channels:
            channel = assign_new_coefficient_channel(checkpoint, val_ds, name)
            prepared = checkpoint.copy()
            prepared.layout = checkpoint.layout.with_coefficient(name, channel)
            prepared.meta['assigned_channels'] = {name: channel}
            return prepared
    return checkpoint


def finetune(
    checkpoint: Optional[Checkpoint],
    config: TrainConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    n_shot: int,
    task: SystemTag,
    fno_config: Optional[FnoConfig] = None,
    sigma: float = 0.0,
    log_path: Optional[Union[str, Path]] = None,
) -> Checkpoint:
    """
    Fine-tune on n downstream samples with the data loss.

    Args:
        checkpoint: Pre-trained checkpoint, or None for the scratch baseline
        config: Training hyperparameters; the loss is forced to data
        train_ds: Downstream training split
        val_ds: Downstream validation split
        n_shot: Training samples to keep; 0 returns the checkpoint for zero-shot use
        task: Downstream system
        fno_config: Architecture for the scratch baseline
        sigma: Relative solution noise on the n-shot subset

    Returns:
        Best-validation checkpoint
    """
    config = replace(config, loss=LossConfig(mode='data'))
    if checkpoint is None:
        if fno_config is None:
            raise ConfigError("scratch fine-tuning needs an architecture")
        if n_shot == 0:
            raise ConfigError("the scratch baseline has no zero-shot mode")
        checkpoint = scratch_checkpoint(fno_config, task, config.seed)
        fresh = True
    else:
        checkpoint = prepare_layout(checkpoint, task, val_ds)
        fresh = False

    if n_shot == 0 or config.epochs == 0:
        return checkpoint

    subset = subsample_nshot(train_ds, n_shot, np.random.default_rng(derive_seed(config.seed, 'nshot', task.value)))
    if sigma > 0:
        subset = add_noise(subset, sigma, np.random.default_rng(derive_seed(config.seed, 'noise', task.value, str(n_shot))))

    inputs = checkpoint.layout.build(subset.samples, checkpoint.config.grid)
    if fresh:
        params = fit_normalization(checkpoint.params, inputs)
    else:
        params = refit_degenerate_channels(checkpoint.params, inputs)

    parent = None if fresh else digest(checkpoint)
    start = Checkpoint(params=params, layout=checkpoint.layout, meta=dict(checkpoint.meta))
    start.meta.update({
        'stage': 'finetune',
        'task': task.value,
        'n_shot': n_shot,
        'sigma': sigma,
        'parent': parent,
        'loss': config.loss.to_dict(),
    })
    logger.info("fine-tuning %s on %s with n=%d, sigma=%g", start.meta.get('variant'), task.value, n_shot, sigma)
    return train(start, config, subset, val_ds, log_path)
