"""
Tests for losses, the optimizer, pre-training, fine-tuning and channel assignment
"""

import json
from dataclasses import replace

import pytest
import numpy as np
import sys
import os

sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from checkpoint import Checkpoint, digest
from errors import ConfigError, NumericAbortError, PreconditionError, ShapeError, UnsupportedSystemError
from fno import ChannelLayout, FnoConfig, backward, fit_normalization, forward, init_params
from losses import LossConfig, compute_loss, loss_data, loss_hybrid, loss_physics
from manufactured import make_dataset, mixed_dataset
from optim import OptimizerState, adam_step, cosine_lr
from pde_systems import SystemTag
from spectral_grid import GridSpec
from training import (
    MODEL_VARIANTS,
    TrainConfig,
    assign_new_coefficient_channel,
    finetune,
    prepare_layout,
    pretrain,
    scratch_checkpoint,
    train,
)

GRID = GridSpec(16, 16)


def tiny_fno(**changes):
    values = dict(grid=GRID, in_channels=8, width=4, modes=2, n_blocks=1, dtype='float64')
    values.update(changes)
    return FnoConfig(**values)


def pretrain_splits(with_solution=True, count=2):
    def split(name, seed):
        parts = [
            make_dataset(system, count, GRID, seed=seed, split=name, with_solution=with_solution, pretrain_ranges=True)
            for system in (SystemTag.POISSON, SystemTag.ADVECTION_DIFFUSION, SystemTag.HELMHOLTZ)
        ]
        return mixed_dataset(parts, split=name)

    return split('train', 0), split('val', 1)


def downstream_splits(system, train_count=6, val_count=3):
    return (
        make_dataset(system, train_count, GRID, seed=2, split='train'),
        make_dataset(system, val_count, GRID, seed=3, split='val'),
    )


class TestLosses:
    """Test data, physics and hybrid losses"""

    def test_loss_config_validation(self):
        with pytest.raises(ConfigError):
            LossConfig(mode='sobolev')
        with pytest.raises(ConfigError):
            LossConfig(mode='hybrid', alpha=1.5)

    def test_data_loss_value(self):
        target = np.zeros((2, 4, 4))
        pred = np.ones((2, 4, 4))
        pred[1] *= 3.0
        value, grad = loss_data(pred, target)
        assert value == pytest.approx(5.0)
        np.testing.assert_allclose(grad[1], 2 * 3.0 / 16 / 2)

    def test_data_loss_shape_mismatch(self):
        with pytest.raises(ShapeError):
            loss_data(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))

    def test_physics_loss_vanishes_on_exact_solutions(self):
        train_ds, _ = pretrain_splits()
        pred = np.stack([s.solution for s in train_ds.samples])
        value, _ = loss_physics(pred, train_ds.samples, GRID)
        assert value < 1e-8

    def test_physics_gradient_matches_finite_difference(self):
        train_ds, _ = pretrain_splits()
        samples = train_ds.samples[:3]
        rng = np.random.default_rng(0)
        pred = 0.01 * rng.standard_normal((3,) + GRID.shape)
        direction = rng.standard_normal(pred.shape)
        _, grad = loss_physics(pred, samples, GRID)
        eps = 1e-6
        plus, _ = loss_physics(pred + eps * direction, samples, GRID)
        minus, _ = loss_physics(pred - eps * direction, samples, GRID)
        numeric = (plus - minus) / (2 * eps)
        assert np.sum(grad * direction) == pytest.approx(numeric, rel=1e-5)

    def test_physics_rejects_time_dependent(self):
        ds = make_dataset(SystemTag.REACTION_DIFFUSION, 1, GRID)
        with pytest.raises(UnsupportedSystemError):
            loss_physics(np.zeros((1,) + GRID.shape), ds.samples, GRID)

    def test_hybrid_alpha_one_is_data_loss(self):
        train_ds, _ = pretrain_splits()
        pred = np.random.default_rng(1).standard_normal((len(train_ds),) + GRID.shape)
        target = np.stack([s.solution for s in train_ds.samples])
        hybrid = loss_hybrid(pred, train_ds.samples, 1.0, GRID)
        data = loss_data(pred, target)
        assert hybrid[0] == data[0]
        np.testing.assert_array_equal(hybrid[1], data[1])

    def test_hybrid_alpha_zero_is_physics_loss(self):
        train_ds, _ = pretrain_splits()
        pred = np.random.default_rng(2).standard_normal((len(train_ds),) + GRID.shape)
        hybrid = loss_hybrid(pred, train_ds.samples, 0.0, GRID)
        physics = loss_physics(pred, train_ds.samples, GRID)
        assert hybrid[0] == physics[0]
        np.testing.assert_array_equal(hybrid[1], physics[1])

    def test_hybrid_without_solutions_is_physics_loss(self):
        train_ds, _ = pretrain_splits(with_solution=False)
        pred = np.random.default_rng(3).standard_normal((len(train_ds),) + GRID.shape)
        hybrid = loss_hybrid(pred, train_ds.samples, 0.5, GRID)
        physics = loss_physics(pred, train_ds.samples, GRID)
        assert hybrid[0] == physics[0]
        np.testing.assert_array_equal(hybrid[1], physics[1])

    def test_hybrid_mixes_terms(self):
        train_ds, _ = pretrain_splits()
        pred = np.random.default_rng(4).standard_normal((len(train_ds),) + GRID.shape)
        target = np.stack([s.solution for s in train_ds.samples])
        value, _ = loss_hybrid(pred, train_ds.samples, 0.25, GRID)
        expected = 0.25 * loss_data(pred, target)[0] + 0.75 * loss_physics(pred, train_ds.samples, GRID)[0]
        assert value == pytest.approx(expected, rel=1e-12)

    def test_data_mode_needs_solutions(self):
        train_ds, _ = pretrain_splits(with_solution=False)
        with pytest.raises(PreconditionError):
            compute_loss(LossConfig('data'), np.zeros((len(train_ds),) + GRID.shape), train_ds.samples, GRID)


class TestOptimizer:
    """Test Adam and the cosine schedule"""

    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 1e-3, 1e-6) == pytest.approx(1e-3)
        assert cosine_lr(100, 100, 1e-3, 1e-6) == pytest.approx(1e-6)
        assert cosine_lr(50, 100, 1e-3, 1e-6) == pytest.approx(0.5 * (1e-3 + 1e-6))
        assert cosine_lr(500, 100, 1e-3, 1e-6) == pytest.approx(1e-6)
        assert cosine_lr(0, 0, 1e-3, 1e-6) == 1e-3

    def test_cosine_is_monotone(self):
        values = [cosine_lr(s, 20, 1.0, 0.0) for s in range(21)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_first_step_is_sign_step(self):
        tensors = {'w': np.array([1.0, -2.0, 3.0], dtype=np.float32)}
        grads = {'w': np.array([0.5, -4.0, 0.0], dtype=np.float32)}
        updated, state = adam_step(tensors, grads, OptimizerState.zeros_like(tensors), lr=0.1)
        np.testing.assert_allclose(updated['w'], [0.9, -1.9, 3.0], rtol=1e-6)
        assert updated['w'].dtype == np.float32
        assert state.step == 1
        assert state.m['w'].dtype == np.float64

    def test_complex_components_are_separate_coordinates(self):
        tensors = {'s': np.array([1.0 + 1.0j], dtype=np.complex64)}
        grads = {'s': np.array([2.0 - 0.5j], dtype=np.complex64)}
        updated, state = adam_step(tensors, grads, OptimizerState.zeros_like(tensors), lr=0.1)
        np.testing.assert_allclose(updated['s'], [0.9 + 1.1j], rtol=1e-6)
        assert updated['s'].dtype == np.complex64
        assert state.v['s'].shape == (1,)
        assert state.v['s'].dtype == np.complex128

    def test_minimizes_quadratic(self):
        target = np.array([3.0, -1.0])
        tensors = {'w': np.zeros(2)}
        state = OptimizerState.zeros_like(tensors)
        for step in range(3000):
            lr = cosine_lr(step, 3000, 0.05, 1e-5)
            tensors, state = adam_step(tensors, {'w': 2 * (tensors['w'] - target)}, state, lr=lr)
        np.testing.assert_allclose(tensors['w'], target, atol=1e-3)

    def test_non_finite_gradient_aborts(self):
        tensors = {'w': np.zeros(2)}
        with pytest.raises(NumericAbortError) as excinfo:
            adam_step(tensors, {'w': np.array([np.nan, 0.0])}, OptimizerState.zeros_like(tensors), lr=0.1)
        assert excinfo.value.diagnostics['tensor'] == 'w'
        assert excinfo.value.exit_code == 4


class TestModelGradients:
    """Test loss gradients through the whole network"""

    @pytest.mark.parametrize("mode", ['data', 'physics', 'hybrid'])
    def test_one_step_moves_every_tensor(self, mode):
        train_ds, _ = pretrain_splits()
        config = tiny_fno()
        inputs = ChannelLayout.full().build(train_ds.samples, GRID)
        params = fit_normalization(init_params(config, np.random.default_rng(0)), inputs)
        pred, tape = forward(params, inputs)
        _, seed_grad = compute_loss(LossConfig(mode=mode), pred, train_ds.samples, GRID)
        grads = backward(tape, seed_grad)
        updated, state = adam_step(params.tensors, grads, OptimizerState.zeros_like(params.tensors), 1e-3)
        assert state.step == 1
        for name, value in params.tensors.items():
            assert not np.array_equal(updated[name], value), name

    @pytest.mark.parametrize("mode", ['physics', 'hybrid'])
    def test_finite_differences(self, mode):
        grid = GridSpec(8, 8)
        solved = make_dataset(SystemTag.POISSON, 2, grid, seed=5, pretrain_ranges=True)
        unsolved = make_dataset(SystemTag.HELMHOLTZ, 2, grid, seed=6, with_solution=False, pretrain_ranges=True)
        samples = mixed_dataset([solved, unsolved]).samples
        config = FnoConfig(grid=grid, in_channels=8, width=4, modes=2, n_blocks=2, dtype='float64')
        rng = np.random.default_rng(7)
        inputs = ChannelLayout.full().build(samples, grid)
        params = fit_normalization(init_params(config, rng), inputs)
        for name, value in params.tensors.items():
            if name.endswith('.bias'):
                params.tensors[name] = 0.1 * rng.standard_normal(value.shape)
        loss = LossConfig(mode=mode, alpha=0.5)

        def objective(p):
            pred, _ = forward(p, inputs, record=False)
            return compute_loss(loss, pred, samples, grid)[0]

        pred, tape = forward(params, inputs)
        _, seed_grad = compute_loss(loss, pred, samples, grid)
        grads = backward(tape, seed_grad)
        scale = max(np.abs(g).max() for g in grads.values())
        eps = 1e-5
        for name, value in params.tensors.items():
            flat = value.reshape(-1)
            for index in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                directions = (1.0, 1j) if np.iscomplexobj(value) else (1.0,)
                for direction in directions:
                    plus, minus = params.copy(), params.copy()
                    plus.tensors[name].reshape(-1)[index] += eps * direction
                    minus.tensors[name].reshape(-1)[index] -= eps * direction
                    numeric = (objective(plus) - objective(minus)) / (2 * eps)
                    g = grads[name].reshape(-1)[index]
                    analytic = g.imag if direction == 1j else g.real
                    assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-7 * scale), (name, index, direction)


class TestTrainConfig:
    """Test training hyperparameters"""

    @pytest.mark.parametrize("changes", [{'epochs': -1}, {'batch_size': 0}, {'lr_min': 1e-2}])
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            TrainConfig(**changes)

    def test_dict_round_trip(self):
        config = TrainConfig(epochs=3, seed=9, loss=LossConfig('hybrid', 0.3))
        assert TrainConfig.from_dict(config.to_dict()) == config

    def test_model_variants(self):
        assert MODEL_VARIANTS['physics-extended'] == ('physics', 'extended')
        assert MODEL_VARIANTS['hybrid'] == ('hybrid', 'expensive')
        assert MODEL_VARIANTS['hybrid-extended'] == ('hybrid', 'extended')
        assert MODEL_VARIANTS['scratch'] == (None, None)


class TestPretrain:
    """Test the pre-training loop"""

    def test_data_pretraining(self, tmp_path):
        train_ds, val_ds = pretrain_splits()
        log_path = tmp_path / 'pretrain.log.jsonl'
        config = TrainConfig(epochs=3, batch_size=4, lr_max=1e-2, lr_min=1e-4, seed=1)
        checkpoint = pretrain(config, train_ds, val_ds, tiny_fno(), variant='data', log_path=log_path)

        assert checkpoint.layout == ChannelLayout.full()
        assert checkpoint.meta['variant'] == 'data'
        history = checkpoint.meta['val_history']
        assert len(history) == 4
        assert checkpoint.meta['best_val_loss'] == min(history)
        assert history[checkpoint.meta['best_epoch']] == min(history)

        records = [json.loads(line) for line in log_path.read_text().splitlines()]
        assert [r['epoch'] for r in records] == [1, 2, 3]
        assert set(records[0]) == {'epoch', 'train_loss', 'val_loss', 'lr', 'wall_ms'}
        assert [r['val_loss'] for r in records] == history[1:]
        assert records[-1]['lr'] < records[0]['lr']

    def test_reproducible(self):
        train_ds, val_ds = pretrain_splits()
        config = TrainConfig(epochs=2, batch_size=4, seed=5)
        a = pretrain(config, train_ds, val_ds, tiny_fno())
        b = pretrain(config, train_ds, val_ds, tiny_fno())
        for name, value in a.params.tensors.items():
            np.testing.assert_array_equal(value, b.params.tensors[name])

    def test_physics_pretraining_without_solutions(self):
        train_ds, val_ds = pretrain_splits(with_solution=False)
        config = TrainConfig(epochs=1, batch_size=3, loss=LossConfig('physics'))
        checkpoint = pretrain(config, train_ds, val_ds, tiny_fno(), variant='physics')
        assert checkpoint.meta['loss'] == {'mode': 'physics', 'alpha': 0.5}
        assert checkpoint.params.is_finite()

    def test_data_loss_needs_solutions(self):
        train_ds, val_ds = pretrain_splits(with_solution=False)
        with pytest.raises(ConfigError):
            pretrain(TrainConfig(epochs=1), train_ds, val_ds, tiny_fno())

    def test_needs_full_layout(self):
        train_ds, val_ds = pretrain_splits()
        with pytest.raises(ConfigError):
            pretrain(TrainConfig(epochs=1), train_ds, val_ds, tiny_fno(in_channels=4))

    def test_training_lowers_loss(self):
        train_ds, _ = downstream_splits(SystemTag.HELMHOLTZ, train_count=8)
        start = scratch_checkpoint(tiny_fno(width=8, modes=4), SystemTag.HELMHOLTZ, seed=0)
        config = TrainConfig(epochs=30, batch_size=8, lr_max=1e-2, lr_min=1e-3)
        trained = train(start, config, train_ds, train_ds)
        history = trained.meta['val_history']
        assert min(history[1:]) < history[0]

    def test_non_finite_loss_keeps_best_checkpoint(self):
        train_ds, val_ds = downstream_splits(SystemTag.HELMHOLTZ)
        broken = train_ds.with_samples(
            [replace(s, solution=np.full(GRID.shape, np.nan)) for s in train_ds.samples]
        )
        start = scratch_checkpoint(tiny_fno(), SystemTag.HELMHOLTZ, seed=0)
        with pytest.raises(NumericAbortError) as excinfo:
            train(start, TrainConfig(epochs=2, batch_size=3), broken, val_ds)
        assert isinstance(excinfo.value.checkpoint, Checkpoint)
        assert excinfo.value.diagnostics['epoch'] == 1


class TestFinetune:
    """Test fine-tuning and the zero-shot path"""

    @pytest.fixture
    def pretrained(self):
        train_ds, val_ds = pretrain_splits()
        return pretrain(TrainConfig(epochs=1, batch_size=6), train_ds, val_ds, tiny_fno(), variant='data')

    def test_zero_shot_passes_checkpoint_through(self, pretrained):
        train_ds, val_ds = downstream_splits(SystemTag.POISSON)
        out = finetune(pretrained, TrainConfig(epochs=3), train_ds, val_ds, n_shot=0, task=SystemTag.POISSON)
        assert digest(out) == digest(pretrained)

    def test_scratch_has_no_zero_shot(self):
        train_ds, val_ds = downstream_splits(SystemTag.POISSON)
        with pytest.raises(ConfigError):
            finetune(None, TrainConfig(epochs=1), train_ds, val_ds, n_shot=0, task=SystemTag.POISSON,
                     fno_config=tiny_fno())

    def test_scratch_uses_reduced_layout(self):
        train_ds, val_ds = downstream_splits(SystemTag.HELMHOLTZ)
        out = finetune(None, TrainConfig(epochs=2, batch_size=2), train_ds, val_ds, n_shot=4,
                       task=SystemTag.HELMHOLTZ, fno_config=tiny_fno())
        assert out.layout.to_list() == ['source', 'omega']
        assert out.config.in_channels == 2
        assert out.meta['variant'] == 'scratch'
        assert out.meta['parent'] is None
        assert out.meta['n_shot'] == 4

    def test_pretrained_finetune_records_parent(self, pretrained):
        train_ds, val_ds = downstream_splits(SystemTag.POISSON)
        config = TrainConfig(epochs=2, batch_size=2, loss=LossConfig('physics'))
        out = finetune(pretrained, config, train_ds, val_ds, n_shot=4, task=SystemTag.POISSON, sigma=0.05)
        assert out.meta['stage'] == 'finetune'
        assert out.meta['parent'] == digest(pretrained)
        assert out.meta['sigma'] == 0.05
        assert out.meta['loss']['mode'] == 'data'
        assert out.meta['variant'] == 'data'

    def test_reaction_channel_refit(self, pretrained):
        """The r channel is constant during pre-training and gets real statistics downstream"""
        assert pretrained.params.norm_std[7] <= 1e-8
        train_ds, val_ds = downstream_splits(SystemTag.REACTION_DIFFUSION)
        out = finetune(pretrained, TrainConfig(epochs=1, batch_size=3), train_ds, val_ds, n_shot=6,
                       task=SystemTag.REACTION_DIFFUSION)
        assert out.params.norm_std[7] > 1e-8
        np.testing.assert_array_equal(out.params.norm_std[:4], pretrained.params.norm_std[:4])

    def test_n_shot_too_large(self, pretrained):
        train_ds, val_ds = downstream_splits(SystemTag.POISSON)
        with pytest.raises(ConfigError):
            finetune(pretrained, TrainConfig(epochs=1), train_ds, val_ds, n_shot=7, task=SystemTag.POISSON)

    def test_darcy_gets_permeability_channel(self, pretrained):
        train_ds, val_ds = downstream_splits(SystemTag.DARCY, train_count=3, val_count=2)
        out = finetune(pretrained, TrainConfig(epochs=1, batch_size=3), train_ds, val_ds, n_shot=3,
                       task=SystemTag.DARCY)
        channel = out.meta['assigned_channels']['K']
        assert 1 <= channel <= 7
        assert out.layout.channels[channel] == 'K'
        out.layout.check(SystemTag.DARCY)


class TestChannelAssignment:
    """Test the zero-shot choice of a channel for a new coefficient"""

    def planted_checkpoint(self, watched_channel):
        """Network whose output equals one normalized input channel."""
        config = tiny_fno(activation='identity', width=4)
        params = init_params(config, np.random.default_rng(0))
        tensors = {name: np.zeros_like(value) for name, value in params.tensors.items()}
        tensors['lift.weight'][watched_channel, 0] = 1.0
        tensors['blocks.0.pointwise.weight'] = np.eye(4)
        tensors['proj1.weight'] = np.eye(4)
        tensors['proj2.weight'][0, 0] = 1.0
        params.tensors = tensors
        return Checkpoint(params=params, layout=ChannelLayout.full(), meta={'variant': 'data'})

    def darcy_with_permeability_targets(self):
        ds = make_dataset(SystemTag.DARCY, 3, GRID, split='val', with_solution=False)
        return ds.with_samples([replace(s, solution=s.coeffs.K.copy()) for s in ds.samples])

    def test_planted_signal_channel_wins(self):
        checkpoint = self.planted_checkpoint(3)
        assert assign_new_coefficient_channel(checkpoint, self.darcy_with_permeability_targets()) == 3

    def test_ties_pick_lowest_index(self):
        checkpoint = self.planted_checkpoint(3)
        checkpoint.params.tensors['lift.weight'][:] = 0.0
        assert assign_new_coefficient_channel(checkpoint, self.darcy_with_permeability_targets()) == 1

    def test_prepare_layout_records_choice(self):
        checkpoint = self.planted_checkpoint(5)
        prepared = prepare_layout(checkpoint, SystemTag.DARCY, self.darcy_with_permeability_targets())
        assert prepared.meta['assigned_channels'] == {'K': 5}
        assert prepared.layout.channels[5] == 'K'
        assert checkpoint.layout == ChannelLayout.full()

    def test_known_tasks_keep_layout(self):
        checkpoint = self.planted_checkpoint(3)
        ds = make_dataset(SystemTag.POISSON, 2, GRID, split='val')
        assert prepare_layout(checkpoint, SystemTag.POISSON, ds) is checkpoint
