"""
Create manufactured solutions and small datasets for testing the workbench.
"""

from typing import List, Tuple

import numpy as np

from data_factory import DOWNSTREAM_RANGES, PRETRAIN_RANGES, Dataset, build_sample, sample_rng
from dataset_io import write_dataset
from pde_systems import CoefficientSet, SystemTag
from spectral_grid import GridSpec, grid_coordinates

# (amplitude, a, b, kind): amplitude * kind(2*pi*(a*x + b*y))
MANUFACTURED_TERMS = ((1.0, 1, 2, 'sin'), (0.5, 3, -1, 'cos'), (0.25, -2, 3, 'sin'))


def single_mode(grid: GridSpec, mx: int, my: int, phase: float = 0.0) -> np.ndarray:
    """cos(2*pi*(mx*x + my*y) + phase) on the grid nodes."""
    X, Y = grid_coordinates(grid)
    return np.cos(2.0 * np.pi * (mx * X + my * Y) + phase)


def band_limited_field(grid: GridSpec, rng: np.random.Generator, k_max: int, mean: float = 0.0) -> np.ndarray:
    """Random real field whose integer modes satisfy |mx|, |my| <= k_max."""
    X, Y = grid_coordinates(grid)
    values = np.full(grid.shape, float(mean))
    for mx in range(0, k_max + 1):
        for my in range(-k_max, k_max + 1):
            if mx == 0 and my <= 0:
                continue
            a, b = rng.standard_normal(2) / (1.0 + mx * mx + my * my)
            theta = 2.0 * np.pi * (mx * X + my * Y)
            values += a * np.cos(theta) + b * np.sin(theta)
    return values


def manufactured_solution(system: SystemTag, grid: GridSpec, coeffs: CoefficientSet) -> Tuple[np.ndarray, np.ndarray]:
    """
    Trigonometric solution u and its forcing f = G(u), differentiated by hand.

    Args:
        system: Steady system
        grid: Grid specification
        coeffs: Coefficients of the system

    Returns:
        Tuple of (u, f)
    """
    X, Y = grid_coordinates(grid)
    u = np.zeros(grid.shape)
    f = np.zeros(grid.shape)
    D = coeffs.D if coeffs.D is not None else np.eye(2)
    v = coeffs.v if coeffs.v is not None else np.zeros(2)
    for amplitude, a, b, kind in MANUFACTURED_TERMS:
        theta = 2.0 * np.pi * (a * X + b * Y)
        k = 2.0 * np.pi * np.array([a, b])
        value, slope = (np.sin(theta), np.cos(theta)) if kind == 'sin' else (np.cos(theta), -np.sin(theta))
        u += amplitude * value
        if system is SystemTag.HELMHOLTZ:
            f += amplitude * (k @ k + coeffs.omega) * value
            continue
        f += amplitude * (k @ D @ k) * value
        if system is SystemTag.ADVECTION_DIFFUSION:
            f += amplitude * (v @ k) * slope
    return u, f


def make_dataset(
    system: SystemTag,
    count: int,
    grid: GridSpec,
    seed: int = 0,
    split: str = 'train',
    ood: str = 'id',
    with_solution: bool = True,
    pretrain_ranges: bool = False,
) -> Dataset:
    """Small single-system dataset drawn the same way the generator draws samples."""
    ranges = PRETRAIN_RANGES[system] if pretrain_ranges else DOWNSTREAM_RANGES[system][ood]
    samples = []
    for index in range(count):
        sample, _ = build_sample(system, ranges, sample_rng(seed, split, index), grid, with_solution)
        samples.append(sample)
    manifest = {'plan': f'test:{system.value}:{ood}', 'seed': seed, 'ood': ood, 'task': system.value}
    return Dataset(samples=samples, split=split, grid=grid, manifest=manifest)


def mixed_dataset(datasets: List[Dataset], split: str = 'train') -> Dataset:
    """Interleave single-system datasets of equal length."""
    samples = [s for group in zip(*(d.samples for d in datasets)) for s in group]
    return Dataset(samples=samples, split=split, grid=datasets[0].grid, manifest={'plan': 'test:mixed'})


if __name__ == '__main__':
    grid = GridSpec(32, 32)
    for split in ('train', 'val', 'test'):
        ds = make_dataset(SystemTag.POISSON, 16, grid, seed=0, split=split)
        write_dataset(ds, f'runs/data/demo-poisson/{split}.pdewb')
    print("Created demo Poisson dataset in runs/data/demo-poisson")
