"""
Tests for source sampling, psi calibration and dataset assembly
"""

import pytest
import numpy as np
import sys
import os

sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from data_factory import (
    DOWNSTREAM_RANGES,
    EXTENDED_OOD_RANGES,
    PERMEABILITY_LEVELS,
    PRETRAIN_RANGES,
    RangeSpec,
    SourceSpec,
    build_dataset,
    build_sample,
    calibrate_psi,
    derive_seed,
    diffusion_tensor,
    lattice_rbf_field,
    measure_psi,
    parse_plan,
    plan_length,
    residual_check,
    residual_pass_rate,
    sample_diffusion,
    sample_permeability,
    sample_rng,
    sample_source,
)
from errors import CalibrationError, ConfigError
from pde_systems import CoefficientSet, SystemTag, solve_steady
from spectral_grid import GridSpec, ScalarField2D

GRID = GridSpec(32, 32)
SIZES = {'train': 3, 'val': 2, 'test': 2}


class TestRanges:
    """Test range and source specifications"""

    def test_empty_range_rejected(self):
        with pytest.raises(ConfigError):
            RangeSpec(2.0, 2.0)

    def test_draw_within_range(self):
        spec = RangeSpec(1.0, 2.5)
        rng = np.random.default_rng(0)
        assert all(spec.contains(spec.draw(rng)) for _ in range(100))

    def test_lattice_must_be_square(self):
        with pytest.raises(ConfigError):
            SourceSpec(n_centers=140)

    @pytest.mark.parametrize("sparsity", [0.0, 1.0, 1.5])
    def test_sparsity_bounds(self, sparsity):
        with pytest.raises(ConfigError):
            SourceSpec(sparsity=sparsity)

    def test_range_tables(self):
        assert PRETRAIN_RANGES[SystemTag.HELMHOLTZ]['omega'].to_list() == [1.0, 10.0]
        assert EXTENDED_OOD_RANGES[SystemTag.POISSON]['D'].to_list() == [15.0, 20.0]
        assert DOWNSTREAM_RANGES[SystemTag.ADVECTION_DIFFUSION]['medium-ood']['psi'].to_list() == [2.0, 3.0]
        assert DOWNSTREAM_RANGES[SystemTag.HELMHOLTZ]['high-ood']['omega'].to_list() == [12.0, 15.0]
        assert DOWNSTREAM_RANGES[SystemTag.DARCY]['id'] == {}


class TestSeeding:
    """Test counter-based generators"""

    def test_sample_rng_is_reproducible(self):
        a = sample_rng(7, 'train', 3).random(5)
        b = sample_rng(7, 'train', 3).random(5)
        np.testing.assert_array_equal(a, b)

    def test_sample_rng_streams_differ(self):
        base = sample_rng(7, 'train', 3).random(5)
        assert not np.allclose(base, sample_rng(7, 'train', 4).random(5))
        assert not np.allclose(base, sample_rng(7, 'val', 3).random(5))
        assert not np.allclose(base, sample_rng(8, 'train', 3).random(5))

    def test_derive_seed(self):
        assert derive_seed(1, 'shuffle') == derive_seed(1, 'shuffle')
        assert derive_seed(1, 'shuffle') != derive_seed(1, 'init')
        assert derive_seed(1, 'a', 'b') != derive_seed(1, 'b', 'a')
        assert derive_seed(1, 'shuffle') != derive_seed(2, 'shuffle')


class TestSources:
    """Test RBF sources and diffusion tensors"""

    def test_single_center_peak(self):
        grid = GridSpec(48, 48)
        amplitudes = np.zeros((12, 12))
        amplitudes[0, 0] = 1.0
        values = lattice_rbf_field(grid, amplitudes, 1.0 / 32.0)
        assert values[0, 0] == pytest.approx(1.0)
        assert values.max() == pytest.approx(1.0)
        # Periodic distance: node 1 and node n-1 are equidistant from the center
        assert values[0, 1] == pytest.approx(values[0, -1])
        assert values[1, 0] == pytest.approx(values[-1, 0])

    def test_source_is_nonnegative(self):
        f = sample_source(SourceSpec(sparsity=0.5), np.random.default_rng(1), GRID)
        assert f.values.min() >= 0.0
        assert f.values.max() > 0.0

    def test_sparsity_changes_mass(self):
        dense = [sample_source(SourceSpec(sparsity=0.8), np.random.default_rng(s), GRID).values.sum() for s in range(10)]
        sparse = [sample_source(SourceSpec(sparsity=0.2), np.random.default_rng(s), GRID).values.sum() for s in range(10)]
        assert np.mean(dense) > np.mean(sparse)

    def test_diffusion_tensor_eigenvalues(self):
        D = diffusion_tensor((1.5, 4.0), 0.7)
        np.testing.assert_array_equal(D, D.T)
        np.testing.assert_allclose(np.linalg.eigvalsh(D), [1.5, 4.0])

    def test_sampled_diffusion_in_range(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            eigenvalues = np.linalg.eigvalsh(sample_diffusion(RangeSpec(1.0, 5.0), rng))
            assert eigenvalues.min() >= 1.0 - 1e-12
            assert eigenvalues.max() <= 5.0 + 1e-12

    def test_nonpositive_eigenvalue_range(self):
        with pytest.raises(ConfigError):
            sample_diffusion(RangeSpec(-1.0, 1.0), np.random.default_rng(0))


class TestPsiCalibration:
    """Test the advection-diffusion ratio"""

    def test_zero_velocity(self):
        f = sample_source(SourceSpec(), np.random.default_rng(3), GRID)
        f = ScalarField2D(GRID, f.values - f.values.mean())
        u = solve_steady(SystemTag.POISSON, f, CoefficientSet(D=np.eye(2)))
        assert measure_psi(u, np.eye(2), np.zeros(2)) == 0.0

    @pytest.mark.parametrize("target", [0.25, 0.8])
    def test_reaches_target(self, target):
        f = sample_source(SourceSpec(), np.random.default_rng(4), GRID)
        f = ScalarField2D(GRID, f.values - f.values.mean())
        D = diffusion_tensor((1.0, 3.0), 0.3)
        result = calibrate_psi(f, D, target, np.random.default_rng(5))
        assert abs(result.psi_achieved - target) / target < 1e-3
        assert measure_psi(result.u, D, result.v) == pytest.approx(result.psi_achieved)
        assert result.iterations <= 25

    def test_nonpositive_target(self):
        f = ScalarField2D(GRID, np.zeros(GRID.shape))
        with pytest.raises(ConfigError):
            calibrate_psi(f, np.eye(2), 0.0, np.random.default_rng(0))

    def test_random_targets_at_64(self):
        """At least 99 of 100 random draws land within 0.1% of a target in (0.2, 5)"""
        grid = GridSpec(64, 64)
        rng = np.random.default_rng(2024)
        hits = 0
        for _ in range(100):
            f = sample_source(SourceSpec(sparsity=rng.uniform(0.2, 0.8)), rng, grid)
            f = ScalarField2D(grid, f.values - f.values.mean())
            D = sample_diffusion(RangeSpec(1.0, 5.0), rng)
            target = rng.uniform(0.2, 5.0)
            try:
                result = calibrate_psi(f, D, target, rng)
            except CalibrationError:
                continue
            if abs(result.psi_achieved - target) / target < 1e-3:
                hits += 1
                assert 0.2 * (1 - 1e-3) <= result.psi_achieved <= 5.0 * (1 + 1e-3)
        assert hits >= 99


class TestPermeability:
    """Test two-level permeability fields"""

    def test_levels_split_at_median(self):
        K = sample_permeability(GRID, np.random.default_rng(6)).values
        assert set(np.unique(K)) <= set(PERMEABILITY_LEVELS)
        assert (K == PERMEABILITY_LEVELS[1]).sum() == GRID.size // 2

    def test_reproducible(self):
        a = sample_permeability(GRID, np.random.default_rng(7)).values
        b = sample_permeability(GRID, np.random.default_rng(7)).values
        np.testing.assert_array_equal(a, b)


class TestBuildSample:
    """Test per-system sample construction"""

    @pytest.mark.parametrize("system", list(SystemTag))
    def test_coefficients_validate(self, system):
        ranges = DOWNSTREAM_RANGES[system]['id']
        sample, failed = build_sample(system, ranges, sample_rng(0, 'train', 0), GridSpec(16, 16), True)
        sample.coeffs.validate(system)
        assert not failed
        assert sample.solution.shape == (16, 16)
        assert np.all(np.isfinite(sample.solution))

    def test_mean_projected_source(self):
        sample, _ = build_sample(SystemTag.POISSON, PRETRAIN_RANGES[SystemTag.POISSON],
                                 sample_rng(0, 'train', 1), GRID, True)
        assert abs(sample.source.mean()) < 1e-14

    def test_advection_diffusion_psi_in_range(self):
        ranges = DOWNSTREAM_RANGES[SystemTag.ADVECTION_DIFFUSION]['id']
        for index in range(4):
            sample, failed = build_sample(SystemTag.ADVECTION_DIFFUSION, ranges, sample_rng(1, 'train', index), GRID, True)
            assert not failed
            assert 0.2 * (1 - 1e-3) <= sample.coeffs.psi <= 0.4 * (1 + 1e-3)
            assert residual_check(sample, GRID) < 1e-8

    def test_darcy_initial_condition_vanishes_on_boundary(self):
        sample, _ = build_sample(SystemTag.DARCY, {}, sample_rng(0, 'test', 0), GridSpec(16, 16), True)
        for values in (sample.source, sample.solution):
            for edge in (values[0], values[-1], values[:, 0], values[:, -1]):
                np.testing.assert_array_equal(edge, 0.0)

    def test_without_solution(self):
        sample, _ = build_sample(SystemTag.HELMHOLTZ, PRETRAIN_RANGES[SystemTag.HELMHOLTZ],
                                 sample_rng(0, 'train', 2), GRID, False)
        assert not sample.has_solution
        assert residual_check(sample, GRID) is None

    def test_reaction_coefficients_in_range(self):
        ranges = DOWNSTREAM_RANGES[SystemTag.REACTION_ADVECTION_DIFFUSION]['id']
        sample, _ = build_sample(SystemTag.REACTION_ADVECTION_DIFFUSION, ranges,
                                 sample_rng(2, 'val', 0), GridSpec(16, 16), True)
        assert -1.0 <= sample.coeffs.r <= 1.0
        assert 0.1 <= np.linalg.norm(sample.coeffs.v) <= 1.0


class TestPlans:
    """Test plan parsing and dataset assembly"""

    def test_parse_downstream(self):
        plan = parse_plan('downstream:helmholtz:high-ood', GRID, SIZES, 3)
        assert plan.task is SystemTag.HELMHOLTZ
        assert plan.ood == 'high-ood'
        assert plan.name == 'downstream:helmholtz:high-ood'

    def test_default_ood_is_id(self):
        assert parse_plan('downstream:poisson', GRID, SIZES, 0).ood == 'id'

    @pytest.mark.parametrize("name", ['cheap', 'expensive:poisson', 'downstream', 'downstream:poisson:far-ood',
                                      'downstream:burgers'])
    def test_invalid_plans(self, name):
        with pytest.raises(ConfigError):
            parse_plan(name, GRID, SIZES, 0)

    def test_missing_split_size(self):
        with pytest.raises(ConfigError):
            parse_plan('expensive', GRID, {'train': 3, 'val': 1}, 0)

    def test_pretraining_sizes_count_per_operator(self):
        plan = parse_plan('synthetic', GRID, SIZES, 0)
        assert plan_length(plan, 'train') == 9
        assert plan_length(parse_plan('downstream:poisson', GRID, SIZES, 0), 'train') == 3

    def test_expensive_plan(self):
        ds = build_dataset(parse_plan('expensive', GRID, SIZES, 11), 'train')
        assert len(ds) == 9
        assert ds.manifest['with_solution'] == 9
        assert ds.manifest['systems'] == ['poisson', 'advection-diffusion', 'helmholtz']
        assert [s.system for s in ds.samples[:3]] == [
            SystemTag.POISSON, SystemTag.ADVECTION_DIFFUSION, SystemTag.HELMHOLTZ
        ]
        assert residual_pass_rate(ds) == 1.0

    def test_synthetic_plan_has_no_solutions(self):
        ds = build_dataset(parse_plan('synthetic', GRID, SIZES, 11), 'val')
        assert ds.manifest['with_solution'] == 0
        assert residual_pass_rate(ds) is None

    def test_extended_plan_mix(self):
        ds = build_dataset(parse_plan('extended', GRID, SIZES, 11), 'train')
        assert len(ds) == 9
        assert ds.manifest['with_solution'] == 3
        poisson_D = [np.linalg.eigvalsh(s.coeffs.D).max() for s in ds.samples if s.system is SystemTag.POISSON]
        # solved, in-range synthetic, out-of-range synthetic
        assert poisson_D[0] <= 5.0 and poisson_D[1] <= 5.0
        assert poisson_D[2] >= 15.0

    def test_manifest_provenance(self):
        ds = build_dataset(parse_plan('downstream:poisson:slight-ood', GRID, SIZES, 5), 'test')
        manifest = ds.manifest
        assert manifest['plan'] == 'downstream:poisson:slight-ood'
        assert manifest['seed'] == 5
        assert manifest['split'] == 'test'
        assert manifest['ranges'] == {'poisson': {'D': [2.5, 7.5]}}
        assert manifest['calibration_failures'] == 0

    def test_parallel_build_is_identical(self):
        serial = build_dataset(parse_plan('expensive', GRID, SIZES, 12), 'train')
        parallel = build_dataset(parse_plan('expensive', GRID, SIZES, 12, workers=4), 'train')
        for a, b in zip(serial.samples, parallel.samples):
            np.testing.assert_array_equal(a.source, b.source)
            np.testing.assert_array_equal(a.solution, b.solution)
            np.testing.assert_array_equal(a.coeffs.to_vector(), b.coeffs.to_vector())

    def test_samples_independent_of_split_size(self):
        small = build_dataset(parse_plan('downstream:helmholtz', GRID, SIZES, 13), 'train')
        large = build_dataset(parse_plan('downstream:helmholtz', GRID, {'train': 5, 'val': 2, 'test': 2}, 13), 'train')
        for a, b in zip(small.samples, large.samples[:3]):
            np.testing.assert_array_equal(a.source, b.source)
            assert a.coeffs.omega == b.coeffs.omega

    def test_expensive_and_synthetic_share_streams(self):
        expensive = build_dataset(parse_plan('expensive', GRID, SIZES, 14), 'train')
        synthetic = build_dataset(parse_plan('synthetic', GRID, SIZES, 14), 'train')
        assert len(expensive) == len(synthetic)
        for a, b in zip(expensive.samples, synthetic.samples):
            assert a.system is b.system
            np.testing.assert_array_equal(a.source, b.source)
            np.testing.assert_array_equal(a.coeffs.to_vector(), b.coeffs.to_vector())
            assert a.has_solution and not b.has_solution

    def test_downstream_never_reuses_pretraining_sources(self):
        sizes = {'train': 3, 'val': 3, 'test': 3}
        seen = []
        for name in ('expensive', 'downstream:poisson:id', 'downstream:poisson:slight-ood', 'downstream:helmholtz:id'):
            plan = parse_plan(name, GRID, sizes, 21)
            for split in ('train', 'test'):
                sources = [s.source for s in build_dataset(plan, split).samples]
                for source in sources:
                    assert not any(np.array_equal(source, other) for other in seen), name
                seen.extend(sources)

    def test_plan_streams(self):
        assert parse_plan('synthetic', GRID, SIZES, 0).stream == 'pretrain'
        assert parse_plan('extended', GRID, SIZES, 0).stream == 'pretrain'
        assert parse_plan('downstream:darcy', GRID, SIZES, 0).stream == 'downstream:darcy:id'
        ds = build_dataset(parse_plan('downstream:poisson', GRID, SIZES, 0), 'val')
        assert ds.manifest['stream'] == 'downstream:poisson:id'

    def test_extended_fraction_is_exact(self):
        ds = build_dataset(parse_plan('extended', GRID, {'train': 6, 'val': 3, 'test': 3}, 11), 'train')
        assert len(ds) == 18
        assert ds.manifest['with_solution'] == 6

    def test_extended_size_not_divisible_by_three(self):
        plan = parse_plan('extended', GRID, {'train': 4, 'val': 3, 'test': 3}, 0)
        with pytest.raises(ConfigError, match='divisible by 3'):
            build_dataset(plan, 'train')

    def test_unknown_split(self):
        with pytest.raises(ConfigError):
            build_dataset(parse_plan('expensive', GRID, SIZES, 0), 'holdout')
