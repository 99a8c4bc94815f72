"""
Augmentation Engine
Applies solution noise and n-shot subsampling to fine-tuning datasets.
"""

import logging
from dataclasses import replace

import numpy as np

from data_factory import Dataset
from errors import ConfigError, PreconditionError

logger = logging.getLogger(__name__)

NOISE_LEVELS = (0.01, 0.05, 0.1, 0.2)


def perturb_solution(solution: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """
    Add Gaussian noise scaled by the field's own standard deviation.

    u_noisy = u + sigma * std(u) * eps, eps ~ N(0, 1) per grid point.

    Args:
        solution: Solution field
        sigma: Relative noise level
        rng: Random generator

    Returns:
        Perturbed copy of the solution
    """
    eps = rng.standard_normal(solution.shape)
    return solution + sigma * np.std(solution) * eps


def add_noise(ds: Dataset, sigma: float, rng: np.random.Generator) -> Dataset:
    """
    Perturb the solutions of a training split.

    Sources and coefficients are left untouched. Validation and test splits are
    returned unchanged so evaluation stays against clean ground truth.

    Args:
        ds: Dataset whose samples all carry solutions
        sigma: Noise level, sigma >= 0
        rng: Random generator

    Returns:
        New dataset with noisy solutions

    Raises:
        ConfigError: Negative sigma
        PreconditionError: A sample has no solution
    """
    if sigma < 0:
        raise ConfigError(f"noise level must be non-negative, got {sigma}")
    missing = [i for i, s in enumerate(ds.samples) if not s.has_solution]
    if missing:
        raise PreconditionError(f"add_noise needs solutions; {len(missing)} samples have none (first: {missing[0]})")
    if sigma == 0:
        return ds
    if ds.split != 'train':
        logger.info("noise skipped for %s split", ds.split)
        return ds

    noisy = [replace(s, solution=perturb_solution(s.solution, sigma, rng)) for s in ds.samples]
    logger.info("added noise sigma=%g to %d solutions", sigma, len(noisy))
    return ds.with_samples(noisy, noise_sigma=sigma)


def nshot_order(size: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation whose prefixes are the n-shot subsets; nested across n for one generator state."""
    return rng.permutation(size)


def subsample_nshot(ds: Dataset, n: int, rng: np.random.Generator) -> Dataset:
    """
    Uniform subsample without replacement of n training samples.

    Args:
        ds: Training split
        n: Number of samples to keep
        rng: Random generator; the same state yields nested subsets across n

    Returns:
        Dataset with the first n entries of a seeded permutation

    Raises:
        ConfigError: n outside [1, |ds|]
    """
    if n < 1 or n > len(ds):
        raise ConfigError(f"n-shot size {n} must lie in [1, {len(ds)}]")
    order = nshot_order(len(ds), rng)[:n]
    return ds.with_samples([ds.samples[i] for i in order], n_shot=n)
