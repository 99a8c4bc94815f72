"""
Tests for error metrics, evaluation and report files
"""

import csv
import json

import pytest
import numpy as np
import sys
import os

sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from checkpoint import Checkpoint, digest
from dataset_io import manifest_hash
from errors import ConfigError, LayoutError, PreconditionError, ShapeError
from fno import ChannelLayout, FnoConfig, init_params
from manufactured import make_dataset, single_mode
from metrics import (
    REPORT_COLUMNS,
    MetricsReport,
    band_error_energy,
    compute_report,
    default_bands,
    emit_report,
    evaluate,
    frmse,
    l_inf,
    load_report,
    mu_l2,
    read_report_rows,
    relative_l2_errors,
    report_filename,
)
from pde_systems import SystemTag
from spectral_grid import FrequencyBand, GridSpec

GRID = GridSpec(32, 32)


def targets_batch(count=3, seed=0):
    return np.random.default_rng(seed).standard_normal((count,) + GRID.shape)


def report(model='data', task='poisson', ood='id', n_shot=8, sigma=0.0, mu=0.1):
    return MetricsReport(
        task=task, n_samples=4, mu_l2=mu, l_inf=0.5, frmse_low=0.01, frmse_mid=0.02, frmse_high=0.03,
        model=model, ood=ood, n_shot=n_shot, sigma=sigma,
    )


class TestPointwiseErrors:
    """Test relative L2 and max-abs errors"""

    def test_perfect_prediction(self):
        t = targets_batch()
        assert mu_l2(t, t) == 0.0
        assert l_inf(t, t) == 0.0

    def test_doubled_prediction(self):
        t = targets_batch()
        assert mu_l2(2 * t, t) == pytest.approx(1.0)

    def test_zero_target_excluded(self):
        t = targets_batch()
        t[1] = 0.0
        p = 1.5 * t
        errors, valid = relative_l2_errors(p, t)
        assert valid.tolist() == [True, False, True]
        assert np.isnan(errors[1])
        assert mu_l2(p, t) == pytest.approx(0.5)

    def test_all_zero_targets(self):
        t = np.zeros((2,) + GRID.shape)
        with pytest.raises(PreconditionError):
            mu_l2(np.ones_like(t), t)

    def test_l_inf_reductions(self):
        t = np.zeros((2,) + GRID.shape)
        p = t.copy()
        p[0, 3, 4] = -2.0
        p[1, 0, 0] = 1.0
        assert l_inf(p, t) == 2.0
        assert l_inf(p, t, reduce='mean') == 1.5
        with pytest.raises(ConfigError):
            l_inf(p, t, reduce='median')

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mu_l2(np.zeros((2, 8, 8)), np.zeros((2, 8, 16)))


class TestBandedErrors:
    """Test the frequency-banded RMSE"""

    def test_low_mode_error(self):
        t = targets_batch(2)
        p = t + 0.1 * single_mode(GRID, 2, 0)[None]
        bands = default_bands(GRID)
        assert frmse(p, t, bands['low']) == pytest.approx(0.1 * np.sqrt(0.5) / 5)
        assert frmse(p, t, bands['mid']) < 1e-14
        assert frmse(p, t, bands['high']) < 1e-14

    def test_high_mode_error(self):
        t = targets_batch(2)
        p = t + 0.2 * single_mode(GRID, 9, 12)[None]
        bands = default_bands(GRID)
        # round(hypot(9, 12)) = 15 lies in the high band [13, 23]
        assert frmse(p, t, bands['high']) == pytest.approx(0.2 * np.sqrt(0.5) / 11)
        assert frmse(p, t, bands['low']) < 1e-14

    def test_band_energies_sum_to_mse(self):
        t = targets_batch(3, seed=1)
        p = targets_batch(3, seed=2)
        total = sum(band_error_energy(p, t, b) for b in default_bands(GRID).values())
        np.testing.assert_allclose(total, ((p - t) ** 2).mean(axis=(1, 2)), rtol=1e-12)

    def test_default_band_edges(self):
        bands = default_bands(GRID)
        assert (bands['low'].k_min, bands['low'].k_max) == (0, 4)
        assert (bands['mid'].k_min, bands['mid'].k_max) == (5, 12)
        assert (bands['high'].k_min, bands['high'].k_max) == (13, 23)

    def test_coarse_grid_rejected(self):
        with pytest.raises(ConfigError):
            default_bands(GridSpec(16, 16))

    def test_band_outside_grid(self):
        t = np.zeros((1, 8, 8))
        with pytest.raises(ConfigError):
            band_error_energy(t, t, FrequencyBand(4, 9))


class TestReports:
    """Test report rows and files"""

    def test_compute_report(self):
        t = targets_batch(4, seed=3)
        t[2] = 0.0
        p = t + 0.01
        r = compute_report(p, t, task='poisson', model='data', ood='id', n_shot=16)
        assert r.n_samples == 4
        assert r.excluded == 1
        assert r.l_inf == pytest.approx(0.01)
        assert r.data_loss == pytest.approx(1e-4)
        assert r.frmse_low == pytest.approx(0.01 / 5)
        assert r.band_edges == [4, 12]

    def test_row_order(self):
        assert report().row() == ['data', 'poisson', 'id', 8, 0.0, 0.1, 0.5, 0.01, 0.02, 0.03]
        assert len(REPORT_COLUMNS) == 10

    def test_csv_sorted_with_exact_floats(self, tmp_path):
        path = tmp_path / 'out.csv'
        rows = [report(model='physics'), report(n_shot=16), report(n_shot=8, mu=1 / 3)]
        emit_report(rows, path, 'csv')
        with open(path, newline='') as f:
            table = list(csv.reader(f))
        assert table[0] == list(REPORT_COLUMNS)
        assert [r[0] for r in table[1:]] == ['data', 'data', 'physics']
        assert [r[3] for r in table[1:]] == ['8', '16', '8']
        assert float(table[1][5]) == 1 / 3

    def test_json_round_trip(self, tmp_path):
        path = tmp_path / 'out.json'
        original = [report(task='helmholtz'), report(task='advection-diffusion')]
        emit_report(original, path, 'json')
        loaded = load_report(path)
        assert [r.task for r in loaded] == ['advection-diffusion', 'helmholtz']
        assert loaded[1] == original[0]
        assert read_report_rows(path)[0]['task'] == 'advection-diffusion'

    def test_csv_rows(self, tmp_path):
        path = tmp_path / 'out.csv'
        emit_report([report()], path)
        assert read_report_rows(path)[0]['model'] == 'data'

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError):
            emit_report([report()], tmp_path / 'out.xml', 'xml')

    def test_empty_report_rejected(self):
        with pytest.raises(PreconditionError):
            MetricsReport(task='poisson', n_samples=0, mu_l2=0, l_inf=0, frmse_low=0, frmse_mid=0, frmse_high=0)

    def test_filename(self):
        assert report_filename('hybrid', 'darcy', 'id', 32) == 'hybrid-darcy-id-32.csv'


class TestEvaluate:
    """Test checkpoint evaluation"""

    @pytest.fixture
    def checkpoint(self):
        config = FnoConfig(grid=GRID, in_channels=8, width=4, modes=2, n_blocks=1)
        params = init_params(config, np.random.default_rng(0))
        return Checkpoint(params=params, layout=ChannelLayout.full(), meta={'variant': 'hybrid'})

    def test_oracle_predictor(self, checkpoint):
        ds = make_dataset(SystemTag.HELMHOLTZ, 3, GRID, split='test')
        r = evaluate(checkpoint, ds, predictor=lambda inputs, samples: np.stack([s.solution for s in samples]),
                     ood='id', n_shot=8)
        assert r.mu_l2 == 0.0
        assert r.model == 'hybrid'
        assert r.task == 'helmholtz'
        assert r.checkpoint == digest(checkpoint)
        assert r.dataset == manifest_hash(ds)

    def test_network_predictions(self, checkpoint):
        ds = make_dataset(SystemTag.POISSON, 2, GRID, split='test')
        r = evaluate(checkpoint, ds, model='data')
        assert r.model == 'data'
        assert np.isfinite(r.mu_l2) and r.mu_l2 > 0.0

    def test_needs_solutions(self, checkpoint):
        ds = make_dataset(SystemTag.POISSON, 2, GRID, split='test', with_solution=False)
        with pytest.raises(PreconditionError):
            evaluate(checkpoint, ds)

    def test_layout_must_fit(self, checkpoint):
        ds = make_dataset(SystemTag.DARCY, 1, GRID, split='test')
        with pytest.raises(LayoutError):
            evaluate(checkpoint, ds)
