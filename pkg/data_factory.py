"""
Data Factory
Samples sources, coefficients and permeability fields, calibrates the
advection-diffusion ratio and assembles the pre-training and downstream datasets.

Every sample draws from its own counter-based generator derived from
(dataset seed, split, sample index), so any parallel schedule produces the
same dataset.
"""

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import CalibrationError, ConfigError
from pde_systems import (
    MEAN_PROJECTED,
    STEADY_SYSTEMS,
    CoefficientSet,
    SystemTag,
    TimeSpec,
    residual,
    solve_sample,
    solve_steady,
)
from spectral_grid import (
    GridSpec,
    ScalarField2D,
    diffusion_term,
    spectral_gradient,
    wavenumbers,
)

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
SPLIT_CODES = {name: code for code, name in enumerate(SPLITS)}
OOD_LEVELS = ('id', 'slight-ood', 'medium-ood', 'high-ood')
PLAN_KINDS = ('expensive', 'synthetic', 'extended', 'downstream')

PSI_TOLERANCE = 1e-3
PSI_MAX_ITERATIONS = 25
CALIBRATION_ATTEMPTS = 3
PERMEABILITY_LEVELS = (0.1, 1.0)
RESIDUAL_CHECK = 1e-8


@dataclass(frozen=True)
class RangeSpec:
    """Open interval (lo, hi) a coefficient is drawn from."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"range ({self.lo}, {self.hi}) must satisfy lo < hi")

    def draw(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.lo, self.hi))

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def to_list(self) -> List[float]:
        return [self.lo, self.hi]


@dataclass(frozen=True)
class SourceSpec:
    """Radial-basis source generator: Gaussians on a regular periodic lattice."""

    n_centers: int = 144
    sigma_rbf: float = 1.0 / 32.0
    sparsity: float = 0.5

    def __post_init__(self):
        side = int(round(np.sqrt(self.n_centers)))
        if side * side != self.n_centers:
            raise ConfigError(f"n_centers={self.n_centers} must be a perfect square")
        if not 0.0 < self.sparsity < 1.0:
            raise ConfigError(f"sparsity={self.sparsity} must lie in (0, 1)")

    @property
    def lattice_side(self) -> int:
        return int(round(np.sqrt(self.n_centers)))


def _ranges(**kwargs: Tuple[float, float]) -> Dict[str, RangeSpec]:
    return {name: RangeSpec(*bounds) for name, bounds in kwargs.items()}


# Diffusion eigenvalues for advection-diffusion; the ratio psi sets the velocity.
ADVECTION_DIFFUSION_EIGENVALUES = (1.0, 5.0)

PRETRAIN_RANGES: Dict[SystemTag, Dict[str, RangeSpec]] = {
    SystemTag.POISSON: _ranges(D=(1.0, 5.0)),
    SystemTag.ADVECTION_DIFFUSION: _ranges(D=ADVECTION_DIFFUSION_EIGENVALUES, psi=(0.2, 1.0)),
    SystemTag.HELMHOLTZ: _ranges(omega=(1.0, 10.0)),
}

EXTENDED_OOD_RANGES: Dict[SystemTag, Dict[str, RangeSpec]] = {
    SystemTag.POISSON: _ranges(D=(15.0, 20.0)),
    SystemTag.ADVECTION_DIFFUSION: _ranges(D=ADVECTION_DIFFUSION_EIGENVALUES, psi=(4.0, 5.0)),
    SystemTag.HELMHOLTZ: _ranges(omega=(1.0, 15.0)),
}

_REACTION = _ranges(D=(5.0, 10.0), r=(-1.0, 1.0))
_REACTION_ADVECTION = _ranges(D=(5.0, 10.0), v=(0.1, 1.0), r=(-1.0, 1.0))

DOWNSTREAM_RANGES: Dict[SystemTag, Dict[str, Dict[str, RangeSpec]]] = {
    SystemTag.POISSON: {
        'id': _ranges(D=(1.0, 2.5)),
        'slight-ood': _ranges(D=(2.5, 7.5)),
        'medium-ood': _ranges(D=(7.5, 12.5)),
        'high-ood': _ranges(D=(15.0, 20.0)),
    },
    SystemTag.ADVECTION_DIFFUSION: {
        'id': _ranges(D=ADVECTION_DIFFUSION_EIGENVALUES, psi=(0.2, 0.4)),
        'slight-ood': _ranges(D=ADVECTION_DIFFUSION_EIGENVALUES, psi=(0.4, 1.6)),
        'medium-ood': _ranges(D=ADVECTION_DIFFUSION_EIGENVALUES, psi=(2.0, 3.0)),
        'high-ood': _ranges(D=ADVECTION_DIFFUSION_EIGENVALUES, psi=(4.0, 5.0)),
    },
    SystemTag.HELMHOLTZ: {
        'id': _ranges(omega=(1.0, 5.0)),
        'slight-ood': _ranges(omega=(2.0, 12.0)),
        'medium-ood': _ranges(omega=(10.0, 13.0)),
        'high-ood': _ranges(omega=(12.0, 15.0)),
    },
    SystemTag.REACTION_DIFFUSION: {level: _REACTION for level in OOD_LEVELS},
    SystemTag.REACTION_ADVECTION_DIFFUSION: {level: _REACTION_ADVECTION for level in OOD_LEVELS},
    SystemTag.DARCY: {level: {} for level in OOD_LEVELS},
}


@dataclass
class PdeSample:
    """One record: system, source (or initial condition), coefficients, optional solution."""

    system: SystemTag
    source: np.ndarray
    coeffs: CoefficientSet
    solution: Optional[np.ndarray] = None

    @property
    def has_solution(self) -> bool:
        return self.solution is not None


@dataclass
class Dataset:
    """Ordered samples of one split sharing a grid, plus provenance."""

    samples: List[PdeSample]
    split: str
    grid: GridSpec
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def systems(self) -> List[SystemTag]:
        return sorted({s.system for s in self.samples}, key=lambda tag: tag.code)

    def with_samples(self, samples: List[PdeSample], **manifest_updates) -> 'Dataset':
        manifest = dict(self.manifest)
        manifest.update(manifest_updates)
        return Dataset(samples=samples, split=self.split, grid=self.grid, manifest=manifest)


@dataclass
class DatasetPlan:
    """What to generate: the dataset kind, task, OOD row, grid, split sizes and seed."""

    kind: str
    grid: GridSpec
    sizes: Dict[str, int]
    seed: int
    task: Optional[SystemTag] = None
    ood: Optional[str] = None
    sparsity: Tuple[float, float] = (0.2, 0.8)
    darcy_dt: float = 1e-2
    workers: int = 1

    @property
    def name(self) -> str:
        if self.kind == 'downstream':
            return f"downstream:{self.task.value}:{self.ood}"
        return self.kind

    @property
    def stream(self) -> str:
        """Generator stream name; the pre-training kinds share one, each downstream plan owns one."""
        return self.name if self.kind == 'downstream' else 'pretrain'

    def ranges(self) -> dict:
        """Coefficient ranges used by the plan, for the manifest."""
        def dump(table):
            return {system.value: {k: r.to_list() for k, r in entries.items()} for system, entries in table.items()}

        if self.kind == 'downstream':
            return {self.task.value: {k: r.to_list() for k, r in DOWNSTREAM_RANGES[self.task][self.ood].items()}}
        if self.kind == 'extended':
            return {'solution': dump(PRETRAIN_RANGES), 'synthetic-ood': dump(EXTENDED_OOD_RANGES)}
        return dump(PRETRAIN_RANGES)


def parse_plan(name: str, grid: GridSpec, sizes: Dict[str, int], seed: int, **options) -> DatasetPlan:
    """
    Resolve a plan name: expensive, synthetic, extended or downstream:<task>[:<ood>].

    Raises:
        ConfigError: Unknown plan, task or OOD level
    """
    parts = name.lower().split(':')
    kind = parts[0]
    if kind not in PLAN_KINDS:
        raise ConfigError(f"unknown dataset plan '{name}'")
    for split in SPLITS:
        if split not in sizes or sizes[split] < 1:
            raise ConfigError(f"plan '{name}' needs a positive size for split '{split}'")
    if kind != 'downstream':
        if len(parts) != 1:
            raise ConfigError(f"unknown dataset plan '{name}'")
        return DatasetPlan(kind=kind, grid=grid, sizes=dict(sizes), seed=seed, **options)
    if len(parts) not in (2, 3):
        raise ConfigError(f"downstream plan '{name}' must read downstream:<task>[:<ood>]")
    task = SystemTag.parse(parts[1])
    ood = parts[2] if len(parts) == 3 else 'id'
    if ood not in OOD_LEVELS:
        raise ConfigError(f"unknown OOD level '{ood}'")
    return DatasetPlan(kind=kind, grid=grid, sizes=dict(sizes), seed=seed, task=task, ood=ood, **options)


def sample_rng(seed: int, split: str, index: int, stream: str = 'pretrain') -> np.random.Generator:
    """Independent generator for one sample index of one split of one stream."""
    spawn_key = (zlib.crc32(stream.encode('utf-8')), SPLIT_CODES[split], index)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=spawn_key))


def derive_seed(seed: int, *keys: str) -> int:
    """Counter-based child seed for named sub-tasks (sweep cells, n-shot schedules)."""
    spawn_key = tuple(zlib.crc32(key.encode('utf-8')) for key in keys)
    return int(np.random.SeedSequence(seed, spawn_key=spawn_key).generate_state(1, np.uint32)[0])


def lattice_rbf_field(grid: GridSpec, amplitudes: np.ndarray, sigma: float) -> np.ndarray:
    """
    Sum of periodic Gaussians centred on a regular lattice over the unit square.

    Args:
        grid: Grid specification
        amplitudes: (side, side) amplitudes, row index along y, column along x
        sigma: Gaussian standard deviation

    Returns:
        Field values of shape (ny, nx)
    """
    side = amplitudes.shape[0]
    centers = np.arange(side) / side

    def profile(n):
        x = np.arange(n) / n
        d = np.abs(x[None, :] - centers[:, None])
        d = np.minimum(d, 1.0 - d)
        return np.exp(-d ** 2 / (2.0 * sigma ** 2))

    gx = profile(grid.nx)
    gy = profile(grid.ny)
    return gy.T @ amplitudes @ gx


def sample_source(spec: SourceSpec, rng: np.random.Generator, grid: GridSpec) -> ScalarField2D:
    """
    Sparse linear combination of Gaussian radial basis functions.

    A Bernoulli(sparsity) mask keeps each center; kept amplitudes are U(0, 1).
    """
    side = spec.lattice_side
    keep = rng.random((side, side)) < spec.sparsity
    amplitudes = rng.random((side, side)) * keep
    return ScalarField2D(grid, lattice_rbf_field(grid, amplitudes, spec.sigma_rbf))


def diffusion_tensor(eigenvalues: Tuple[float, float], theta: float) -> np.ndarray:
    """D = R^T diag(e) R for the rotation R by theta."""
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])
    D = R.T @ np.diag(eigenvalues) @ R
    return 0.5 * (D + D.T)


def sample_diffusion(range_e: RangeSpec, rng: np.random.Generator) -> np.ndarray:
    """Random SPD tensor with eigenvalues drawn i.i.d. from range_e."""
    if range_e.lo <= 0:
        raise ConfigError("diffusion eigenvalues must be positive")
    eigenvalues = rng.uniform(range_e.lo, range_e.hi, size=2)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    return diffusion_tensor(tuple(eigenvalues), theta)


def measure_psi(u: ScalarField2D, D: np.ndarray, v: np.ndarray) -> float:
    """Advection-diffusion ratio ||v . grad u|| / ||div(D grad u)|| with discrete L2 norms."""
    ux, uy = spectral_gradient(u)
    advective = v[0] * ux.values + v[1] * uy.values
    diffusive = diffusion_term(u, D).values
    denominator = np.linalg.norm(diffusive)
    if denominator == 0.0:
        return 0.0
    return float(np.linalg.norm(advective) / denominator)


@dataclass
class PsiCalibration:
    v: np.ndarray
    u: ScalarField2D
    psi_achieved: float
    iterations: int


def calibrate_psi(
    f: ScalarField2D,
    D: np.ndarray,
    psi_target: float,
    rng: np.random.Generator,
    tolerance: float = PSI_TOLERANCE,
    max_iterations: int = PSI_MAX_ITERATIONS,
) -> PsiCalibration:
    """
    Scale a randomly oriented velocity until the solution hits the target ratio.

    Args:
        f: Mean-projected source
        D: Diffusion tensor
        psi_target: Desired ratio, positive
        rng: Generator for the velocity direction

    Returns:
        Last iterate (velocity, solution, measured ratio)

    Raises:
        CalibrationError: No convergence; carries the best iterate
    """
    if not psi_target > 0:
        raise ConfigError(f"psi target must be positive, got {psi_target}")
    angle = rng.uniform(0.0, 2.0 * np.pi)
    direction = np.array([np.cos(angle), np.sin(angle)])
    magnitude = 1.0
    best: Optional[PsiCalibration] = None
    best_error = np.inf

    for iteration in range(1, max_iterations + 1):
        v = magnitude * direction
        u = solve_steady(SystemTag.ADVECTION_DIFFUSION, f, CoefficientSet(D=D, v=v))
        psi = measure_psi(u, D, v)
        error = abs(psi - psi_target) / psi_target
        current = PsiCalibration(v=v, u=u, psi_achieved=psi, iterations=iteration)
        if error < best_error:
            best, best_error = current, error
        if error < tolerance:
            return current
        if psi == 0.0:
            raise CalibrationError("advection term vanishes; ratio cannot be calibrated", best=best)
        magnitude *= psi_target / psi

    raise CalibrationError(
        f"psi calibration missed target {psi_target:.4g} after {max_iterations} iterations "
        f"(best relative error {best_error:.2e})",
        best=best,
    )


def sample_permeability(grid: GridSpec, rng: np.random.Generator) -> ScalarField2D:
    """
    Two-level permeability: a Gaussian random field with power (1+|k|^2)^-2
    thresholded at its median into {0.1, 1.0}.
    """
    kx, ky = wavenumbers(grid)
    KX, KY = np.meshgrid(kx, ky)
    amplitude = 1.0 / (1.0 + KX ** 2 + KY ** 2)
    noise = np.fft.fft2(rng.standard_normal(grid.shape))
    field_values = np.fft.ifft2(noise * amplitude).real
    low, high = PERMEABILITY_LEVELS
    K = np.where(field_values > np.median(field_values), high, low)
    return ScalarField2D(grid, K)


def _sample_velocity(magnitude_range: RangeSpec, rng: np.random.Generator) -> np.ndarray:
    magnitude = magnitude_range.draw(rng)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return magnitude * np.array([np.cos(angle), np.sin(angle)])


def _calibrated_advection(f: ScalarField2D, D: np.ndarray, psi_target: float, rng: np.random.Generator):
    """Run calibration, retrying with fresh directions; failures are logged and counted."""
    failure = None
    for _ in range(CALIBRATION_ATTEMPTS):
        try:
            return calibrate_psi(f, D, psi_target, rng), False
        except CalibrationError as e:
            failure = e
    logger.warning("calibration failed for psi=%.4g: %s", psi_target, failure)
    if failure.best is None:
        raise failure
    return failure.best, True


def build_sample(
    system: SystemTag,
    ranges: Dict[str, RangeSpec],
    rng: np.random.Generator,
    grid: GridSpec,
    with_solution: bool,
    sparsity: Tuple[float, float] = (0.2, 0.8),
    darcy_dt: float = 1e-2,
) -> Tuple[PdeSample, bool]:
    """
    Draw one sample. Returns the sample and whether calibration failed.

    Time-dependent systems use the RBF field as initial condition (zeroed on
    the boundary for Darcy) and no forcing.
    """
    spec = SourceSpec(sparsity=RangeSpec(*sparsity).draw(rng))
    source = sample_source(spec, rng, grid)
    if system in MEAN_PROJECTED:
        source = ScalarField2D(grid, source.values - source.values.mean())
    elif system is SystemTag.DARCY:
        values = source.values.copy()
        values[0, :] = values[-1, :] = 0.0
        values[:, 0] = values[:, -1] = 0.0
        source = ScalarField2D(grid, values)

    failed = False
    solution = None
    if system is SystemTag.POISSON:
        coeffs = CoefficientSet(D=sample_diffusion(ranges['D'], rng))
    elif system is SystemTag.ADVECTION_DIFFUSION:
        D = sample_diffusion(ranges['D'], rng)
        psi_target = ranges['psi'].draw(rng)
        calibration, failed = _calibrated_advection(source, D, psi_target, rng)
        coeffs = CoefficientSet(D=D, v=calibration.v, psi=calibration.psi_achieved)
        solution = calibration.u.values
    elif system is SystemTag.HELMHOLTZ:
        coeffs = CoefficientSet(omega=ranges['omega'].draw(rng))
    elif system is SystemTag.REACTION_DIFFUSION:
        coeffs = CoefficientSet(D=sample_diffusion(ranges['D'], rng), r=ranges['r'].draw(rng))
    elif system is SystemTag.REACTION_ADVECTION_DIFFUSION:
        D = sample_diffusion(ranges['D'], rng)
        v = _sample_velocity(ranges['v'], rng)
        coeffs = CoefficientSet(D=D, v=v, r=ranges['r'].draw(rng))
    else:
        coeffs = CoefficientSet(K=sample_permeability(grid, rng).values)

    if not with_solution:
        solution = None
    elif solution is None:
        solution = solve_sample(system, source, coeffs, TimeSpec(1.0, darcy_dt)).values
    return PdeSample(system=system, source=source.values, coeffs=coeffs, solution=solution), failed


def _sample_recipe(plan: DatasetPlan, split: str, index: int) -> Tuple[SystemTag, Dict[str, RangeSpec], bool]:
    """System, coefficient ranges and solution flag of one sample index."""
    if plan.kind == 'downstream':
        return plan.task, DOWNSTREAM_RANGES[plan.task][plan.ood], True
    system = STEADY_SYSTEMS[index % len(STEADY_SYSTEMS)]
    if plan.kind == 'expensive':
        return system, PRETRAIN_RANGES[system], True
    if plan.kind == 'synthetic':
        return system, PRETRAIN_RANGES[system], False
    within = index // len(STEADY_SYSTEMS)
    with_solution = plan.sizes[split] // 3
    if within < with_solution:
        return system, PRETRAIN_RANGES[system], True
    if (within - with_solution) % 2 == 0:
        return system, PRETRAIN_RANGES[system], False
    return system, EXTENDED_OOD_RANGES[system], False


def plan_length(plan: DatasetPlan, split: str) -> int:
    """Number of records in a split; pre-training sizes count per operator."""
    n = plan.sizes[split]
    return n if plan.kind == 'downstream' else n * len(STEADY_SYSTEMS)


def build_dataset(plan: DatasetPlan, split: str) -> Dataset:
    """
    Generate one split of a plan.

    Args:
        plan: Dataset plan
        split: One of train, val, test

    Returns:
        Dataset with a provenance manifest

    Raises:
        ConfigError: Unknown split, or an extended split size not divisible by 3
    """
    if split not in SPLITS:
        raise ConfigError(f"unknown split '{split}'")
    if plan.kind == 'extended' and plan.sizes[split] % 3:
        raise ConfigError(f"extended plan needs a {split} size divisible by 3, got {plan.sizes[split]}")
    count = plan_length(plan, split)

    def make(index: int):
        system, ranges, with_solution = _sample_recipe(plan, split, index)
        rng = sample_rng(plan.seed, split, index, plan.stream)
        return build_sample(system, ranges, rng, plan.grid, with_solution, plan.sparsity, plan.darcy_dt)

    if plan.workers > 1:
        with ThreadPoolExecutor(max_workers=plan.workers) as pool:
            results = list(pool.map(make, range(count)))
    else:
        results = [make(i) for i in range(count)]

    samples = [sample for sample, _ in results]
    failures = sum(1 for _, failed in results if failed)
    manifest = {
        'plan': plan.name,
        'kind': plan.kind,
        'task': plan.task.value if plan.task else None,
        'ood': plan.ood,
        'seed': plan.seed,
        'stream': plan.stream,
        'split': split,
        'grid': plan.grid.to_dict(),
        'sizes': dict(plan.sizes),
        'ranges': plan.ranges(),
        'sparsity': list(plan.sparsity),
        'darcy_dt': plan.darcy_dt,
        'systems': [s.value for s in sorted({s.system for s in samples}, key=lambda t: t.code)],
        'with_solution': sum(1 for s in samples if s.has_solution),
        'calibration_failures': failures,
    }
    logger.info("built %s/%s: %d samples (%d with solution)", plan.name, split, count, manifest['with_solution'])
    return Dataset(samples=samples, split=split, grid=plan.grid, manifest=manifest)


def residual_check(sample: PdeSample, grid: GridSpec) -> Optional[float]:
    """Max abs residual of a with-solution steady sample, None when not applicable."""
    if not (sample.has_solution and sample.system.is_steady):
        return None
    r = residual(
        sample.system,
        ScalarField2D(grid, sample.solution),
        sample.coeffs,
        ScalarField2D(grid, sample.source),
    )
    return float(np.abs(r.values).max())


def residual_pass_rate(dataset: Dataset, threshold: float = RESIDUAL_CHECK) -> Optional[float]:
    """Fraction of checkable samples whose residual stays below the threshold."""
    checks = [residual_check(s, dataset.grid) for s in dataset.samples]
    checks = [c for c in checks if c is not None]
    if not checks:
        return None
    return sum(1 for c in checks if c < threshold) / len(checks)
