"""
PDE Systems
The six operators of the workbench: residual evaluation for the physics loss,
exact Fourier-diagonal solvers for the periodic systems and a finite-difference
solver for the Dirichlet Darcy problem.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as slinalg

from errors import (
    ConfigError,
    DomainError,
    PreconditionError,
    SingularSymbolError,
    SolverError,
    UnsupportedSystemError,
)
from spectral_grid import (
    GridSpec,
    ScalarField2D,
    advection_symbol,
    apply_multiplier,
    check_spd,
    diffusion_symbol,
    laplacian_symbol,
)

logger = logging.getLogger(__name__)

SINGULAR_SYMBOL = 1e-14
ZERO_SYMBOL = 1e-12
CG_TOLERANCE = 1e-10
COEFFICIENT_SLOTS = 12


class SystemTag(Enum):
    POISSON = 'poisson'
    ADVECTION_DIFFUSION = 'advection-diffusion'
    HELMHOLTZ = 'helmholtz'
    REACTION_DIFFUSION = 'reaction-diffusion'
    REACTION_ADVECTION_DIFFUSION = 'reaction-advection-diffusion'
    DARCY = 'darcy'

    @property
    def code(self) -> int:
        return list(SystemTag).index(self)

    @classmethod
    def from_code(cls, code: int) -> 'SystemTag':
        try:
            return list(cls)[code]
        except IndexError:
            raise ConfigError(f"unknown system code {code}")

    @classmethod
    def parse(cls, name: str) -> 'SystemTag':
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(f"unknown PDE system '{name}'")

    @property
    def is_steady(self) -> bool:
        return self in STEADY_SYSTEMS

    @property
    def is_periodic(self) -> bool:
        return self is not SystemTag.DARCY


STEADY_SYSTEMS = (SystemTag.POISSON, SystemTag.ADVECTION_DIFFUSION, SystemTag.HELMHOLTZ)
MEAN_PROJECTED = (SystemTag.POISSON, SystemTag.ADVECTION_DIFFUSION)

# Coefficients each system needs, and the ones it may additionally record.
REQUIRED_COEFFICIENTS: Dict[SystemTag, Tuple[str, ...]] = {
    SystemTag.POISSON: ('D',),
    SystemTag.ADVECTION_DIFFUSION: ('D', 'v'),
    SystemTag.HELMHOLTZ: ('omega',),
    SystemTag.REACTION_DIFFUSION: ('D', 'r'),
    SystemTag.REACTION_ADVECTION_DIFFUSION: ('D', 'v', 'r'),
    SystemTag.DARCY: ('K',),
}
OPTIONAL_COEFFICIENTS: Dict[SystemTag, Tuple[str, ...]] = {
    SystemTag.ADVECTION_DIFFUSION: ('psi',),
}


@dataclass
class CoefficientSet:
    """The PDE parameters lambda of one sample."""

    D: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    omega: Optional[float] = None
    r: Optional[float] = None
    psi: Optional[float] = None
    K: Optional[np.ndarray] = None

    def present(self) -> Tuple[str, ...]:
        return tuple(name for name in ('D', 'v', 'omega', 'r', 'psi', 'K') if getattr(self, name) is not None)

    def validate(self, system: SystemTag):
        """
        Check that exactly the coefficients demanded by the system are present.

        Raises:
            ConfigError: Missing or unexpected coefficient
            DomainError: Non-SPD tensor, nonpositive wavenumber or permeability
        """
        required = REQUIRED_COEFFICIENTS[system]
        allowed = set(required) | set(OPTIONAL_COEFFICIENTS.get(system, ()))
        present = set(self.present())
        missing = set(required) - present
        extra = present - allowed
        if missing or extra:
            raise ConfigError(
                f"{system.value} coefficients: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        if self.D is not None:
            check_spd(self.D)
        if self.omega is not None and not self.omega > 0:
            raise DomainError(f"omega must be positive, got {self.omega}")
        if self.K is not None and not np.all(self.K > 0):
            raise DomainError("permeability must be strictly positive")

    def to_vector(self) -> np.ndarray:
        """Fixed-order coefficient block: D11, D12, D22, vx, vy, omega, r, psi, 4 reserved."""
        vec = np.full(COEFFICIENT_SLOTS, np.nan)
        if self.D is not None:
            vec[0:3] = self.D[0, 0], self.D[0, 1], self.D[1, 1]
        if self.v is not None:
            vec[3:5] = self.v
        if self.omega is not None:
            vec[5] = self.omega
        if self.r is not None:
            vec[6] = self.r
        if self.psi is not None:
            vec[7] = self.psi
        return vec

    @classmethod
    def from_vector(cls, vec: np.ndarray, K: Optional[np.ndarray] = None) -> 'CoefficientSet':
        def scalar(i):
            return None if np.isnan(vec[i]) else float(vec[i])

        D = None
        if not np.isnan(vec[0]):
            D = np.array([[vec[0], vec[1]], [vec[1], vec[2]]], dtype=np.float64)
        v = None if np.isnan(vec[3]) else np.array(vec[3:5], dtype=np.float64)
        return cls(D=D, v=v, omega=scalar(5), r=scalar(6), psi=scalar(7), K=K)


@dataclass(frozen=True)
class TimeSpec:
    """Time horizon of the initial value problems."""

    t_end: float = 1.0
    dt: Optional[float] = None

    @property
    def n_steps(self) -> int:
        if self.dt is None or self.dt <= 0:
            raise ConfigError("time step required and must be positive")
        steps = int(round(self.t_end / self.dt))
        if steps < 1 or abs(steps * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise ConfigError(f"dt={self.dt} does not divide t_end={self.t_end}")
        return steps


def steady_symbol(system: SystemTag, coeffs: CoefficientSet, grid: GridSpec) -> np.ndarray:
    """
    Fourier symbol s(k) of the steady operator G, so that G(u)^ = s * u^.

    Raises:
        UnsupportedSystemError: For time-dependent systems
    """
    if system is SystemTag.POISSON:
        return diffusion_symbol(grid, coeffs.D).astype(np.complex128)
    if system is SystemTag.ADVECTION_DIFFUSION:
        return diffusion_symbol(grid, coeffs.D) + advection_symbol(grid, coeffs.v)
    if system is SystemTag.HELMHOLTZ:
        return (laplacian_symbol(grid) + coeffs.omega).astype(np.complex128)
    raise UnsupportedSystemError(f"{system.value} has no steady operator")


def evolution_symbol(system: SystemTag, coeffs: CoefficientSet, grid: GridSpec) -> np.ndarray:
    """Symbol s(k) of du/dt = -s*u + f for the linear reaction systems."""
    if system is SystemTag.REACTION_DIFFUSION:
        return (diffusion_symbol(grid, coeffs.D) + coeffs.r).astype(np.complex128)
    if system is SystemTag.REACTION_ADVECTION_DIFFUSION:
        return diffusion_symbol(grid, coeffs.D) + advection_symbol(grid, coeffs.v) + coeffs.r
    raise UnsupportedSystemError(f"{system.value} is not a periodic evolution problem")


def residual(system: SystemTag, u: ScalarField2D, coeffs: CoefficientSet, f: ScalarField2D) -> ScalarField2D:
    """
    Pointwise residual G(u; lambda) - f with spectral derivatives.

    Args:
        system: Steady system tag
        u: Candidate solution
        coeffs: Coefficients of the system
        f: Source term

    Returns:
        Residual field
    """
    if not system.is_steady:
        raise UnsupportedSystemError(f"residual is only defined for steady systems, got {system.value}")
    coeffs.validate(system)
    symbol = steady_symbol(system, coeffs, u.grid)
    return ScalarField2D(u.grid, apply_multiplier(u.values, symbol) - f.values)


def project_mean(f: ScalarField2D) -> ScalarField2D:
    """Subtract the mean so the zero mode of the source vanishes."""
    return ScalarField2D(f.grid, f.values - f.values.mean())


def solve_steady(system: SystemTag, f: ScalarField2D, coeffs: CoefficientSet) -> ScalarField2D:
    """
    Fourier-diagonal solve of G(u) = f on the periodic unit square.

    Poisson and advection-diffusion sources are mean-projected and the
    returned solution has zero mean.

    Raises:
        SingularSymbolError: If the symbol vanishes at a nonzero wavenumber
    """
    if not system.is_steady:
        raise UnsupportedSystemError(f"solve_steady does not handle {system.value}")
    coeffs.validate(system)
    symbol = steady_symbol(system, coeffs, f.grid)
    f_hat = np.fft.fft2(f.values)
    projected = system in MEAN_PROJECTED
    if projected:
        f_hat[0, 0] = 0.0
        symbol = symbol.copy()
        symbol[0, 0] = 1.0

    magnitude = np.abs(symbol)
    if projected:
        magnitude[0, 0] = np.inf
    if magnitude.min() < SINGULAR_SYMBOL:
        raise SingularSymbolError(f"{system.value} symbol vanishes at a nonzero wavenumber")

    u_hat = f_hat / symbol
    if projected:
        u_hat[0, 0] = 0.0
    return ScalarField2D(f.grid, np.fft.ifft2(u_hat).real)


def evolve_linear(
    system: SystemTag,
    u0: ScalarField2D,
    f: ScalarField2D,
    coeffs: CoefficientSet,
    time: TimeSpec = TimeSpec(),
) -> ScalarField2D:
    """
    Exact per-mode exponential integrator for the linear reaction systems.

    u^(t) = exp(-s t) u0^ + (1 - exp(-s t)) / s * f^, with t*f^ where |s| ~ 0.

    Args:
        system: Reaction-diffusion or reaction-advection-diffusion
        u0: Initial condition
        f: Constant-in-time source
        coeffs: Coefficients (D, r, and v for the advective system)
        time: Time horizon

    Returns:
        Field at t_end
    """
    coeffs.validate(system)
    t = time.t_end
    if t == 0:
        return ScalarField2D(u0.grid, u0.values.copy())

    symbol = evolution_symbol(system, coeffs, u0.grid)
    decay = np.exp(-symbol * t)
    small = np.abs(symbol) < ZERO_SYMBOL
    safe = np.where(small, 1.0, symbol)
    forcing = np.where(small, t, (1.0 - decay) / safe)

    u_hat = decay * np.fft.fft2(u0.values) + forcing * np.fft.fft2(f.values)
    return ScalarField2D(u0.grid, np.fft.ifft2(u_hat).real)


def darcy_operator(K: np.ndarray) -> sp.csr_matrix:
    """
    Five-point flux-form discretization of -div(K grad p) on interior nodes.

    Nodes sit at x_j = j/(nx-1) including both boundaries, where p = 0.
    Face permeabilities are arithmetic means of the adjacent nodes.

    Args:
        K: Strictly positive permeability on all nodes, shape (ny, nx)

    Returns:
        Sparse SPD matrix of size (ny-2)*(nx-2)
    """
    ny, nx = K.shape
    hx2 = (1.0 / (nx - 1)) ** 2
    hy2 = (1.0 / (ny - 1)) ** 2
    center = K[1:-1, 1:-1]
    east = 0.5 * (center + K[1:-1, 2:]) / hx2
    west = 0.5 * (center + K[1:-1, :-2]) / hx2
    north = 0.5 * (center + K[2:, 1:-1]) / hy2
    south = 0.5 * (center + K[:-2, 1:-1]) / hy2

    diagonal = (east + west + north + south).ravel()
    row_coupling = -east.copy()
    row_coupling[:, -1] = 0.0
    row_coupling = row_coupling.ravel()[:-1]
    stride = nx - 2
    column_coupling = -north[:-1, :].ravel()
    return sp.diags(
        [diagonal, row_coupling, row_coupling, column_coupling, column_coupling],
        [0, 1, -1, stride, -stride],
        format='csr',
    )


def _conjugate_gradient(matrix: sp.spmatrix, rhs: np.ndarray, x0: np.ndarray) -> np.ndarray:
    max_iterations = 10 * rhs.size
    solution, info = slinalg.cg(matrix, rhs, x0=x0, rtol=CG_TOLERANCE, atol=0.0, maxiter=max_iterations)
    if info != 0:
        raise SolverError(f"conjugate gradient did not converge in {max_iterations} iterations (info={info})")
    return solution


def _check_darcy_inputs(K: np.ndarray):
    if not np.all(K > 0):
        raise DomainError("permeability must be strictly positive")


def solve_darcy(
    u0: ScalarField2D,
    K: ScalarField2D,
    f: ScalarField2D,
    time: TimeSpec,
    theta: float = 1.0,
) -> ScalarField2D:
    """
    Time-stepping of dp/dt = div(K grad p) + f with homogeneous Dirichlet boundaries.

    theta=1 is implicit Euler, theta=1/2 is Crank-Nicolson; each step is solved
    by conjugate gradient to relative residual 1e-10.

    Args:
        u0: Initial pressure, zero on the boundary
        K: Permeability field
        f: Source term
        time: Horizon and step
        theta: Implicitness of the one-step scheme

    Returns:
        Pressure at t_end with exactly zero boundary rows and columns

    Raises:
        DomainError: Nonpositive permeability
        SolverError: Conjugate gradient failed to converge
    """
    _check_darcy_inputs(K.values)
    p = u0.values
    boundary = np.concatenate([p[0], p[-1], p[:, 0], p[:, -1]])
    if np.any(boundary != 0.0):
        raise PreconditionError("Darcy initial condition must vanish on the boundary")
    if not 0.0 < theta <= 1.0:
        raise ConfigError(f"theta must lie in (0, 1], got {theta}")

    steps = time.n_steps
    dt = time.dt
    A = darcy_operator(K.values)
    identity = sp.identity(A.shape[0], format='csr')
    implicit = (identity + theta * dt * A).tocsr()
    explicit = (identity - (1.0 - theta) * dt * A).tocsr()

    interior = p[1:-1, 1:-1].ravel().astype(np.float64)
    forcing = dt * f.values[1:-1, 1:-1].ravel()
    logger.debug("darcy: %d steps of dt=%g, theta=%g, %d unknowns", steps, dt, theta, interior.size)
    for _ in range(steps):
        rhs = explicit @ interior + forcing
        interior = _conjugate_gradient(implicit, rhs, interior)

    out = np.zeros_like(u0.values, dtype=np.float64)
    out[1:-1, 1:-1] = interior.reshape(out.shape[0] - 2, out.shape[1] - 2)
    return ScalarField2D(u0.grid, out)


def solve_darcy_steady(K: ScalarField2D, f: ScalarField2D) -> ScalarField2D:
    """Direct CG solve of -div(K grad p) = f with p = 0 on the boundary."""
    _check_darcy_inputs(K.values)
    A = darcy_operator(K.values)
    rhs = f.values[1:-1, 1:-1].ravel().astype(np.float64)
    interior = _conjugate_gradient(A, rhs, np.zeros_like(rhs))
    out = np.zeros(f.values.shape, dtype=np.float64)
    out[1:-1, 1:-1] = interior.reshape(out.shape[0] - 2, out.shape[1] - 2)
    return ScalarField2D(f.grid, out)


def solve_sample(
    system: SystemTag,
    source: ScalarField2D,
    coeffs: CoefficientSet,
    darcy_time: Optional[TimeSpec] = None,
) -> ScalarField2D:
    """
    Ground-truth solution for a sample's stored source.

    Steady systems map f -> u; the time-dependent systems treat the source as
    the initial condition, use f = 0 and return the field at t = 1.
    """
    zero = ScalarField2D(source.grid, np.zeros(source.grid.shape))
    if system.is_steady:
        return solve_steady(system, source, coeffs)
    if system is SystemTag.DARCY:
        K = ScalarField2D(source.grid, coeffs.K)
        return solve_darcy(source, K, zero, darcy_time or TimeSpec(1.0, 1e-2))
    return evolve_linear(system, source, zero, coeffs, TimeSpec(1.0))
