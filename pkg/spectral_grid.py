"""
Spectral Grid
Periodic 2D grid bookkeeping, Fourier transforms, wavenumber tables and
spectral differential operators shared by the solvers, the physics loss and
the frequency-banded metrics.

Conventions: fields are stored row-major as (ny, nx) arrays with x varying
along the last axis; the forward DFT is unnormalized and the inverse carries
1/(nx*ny).
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from errors import ConfigError, DomainError, SymmetryError

SYMMETRY_TOLERANCE = 1e-10


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid over the unit square."""

    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        for name, n in (('nx', self.nx), ('ny', self.ny)):
            if n < 8 or n % 2:
                raise ConfigError(f"{name}={n} must be even and >= 8")
        if self.lx != 1.0 or self.ly != 1.0:
            raise ConfigError("domain is fixed to the unit square")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def to_dict(self) -> dict:
        return {'nx': self.nx, 'ny': self.ny}

    @classmethod
    def from_dict(cls, data: dict) -> 'GridSpec':
        return cls(nx=int(data['nx']), ny=int(data['ny']))


@dataclass(frozen=True)
class ScalarField2D:
    """Real field sampled on a grid."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ConfigError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("field contains non-finite entries")


@dataclass(frozen=True)
class SpectralField2D:
    """DFT coefficients of a field in standard (unshifted) layout."""

    grid: GridSpec
    coeffs: np.ndarray


@dataclass(frozen=True)
class FrequencyBand:
    """Inclusive range of rounded radial wavenumbers."""

    k_min: int
    k_max: int

    def validate(self, grid: GridSpec):
        if not 0 <= self.k_min <= self.k_max <= max_radial_mode(grid):
            raise ConfigError(
                f"band ({self.k_min}, {self.k_max}) invalid for grid {grid.nx}x{grid.ny}"
            )


def grid_coordinates(grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Periodic node coordinates x_j = j/nx, y_i = i/ny.

    Returns:
        Tuple of (X, Y) arrays of shape (ny, nx)
    """
    x = np.arange(grid.nx) / grid.nx
    y = np.arange(grid.ny) / grid.ny
    return np.meshgrid(x, y)


def integer_modes(n: int) -> np.ndarray:
    """Signed DFT mode indices with the Nyquist index carried as +n/2."""
    m = np.arange(n)
    m[m > n // 2] -= n
    return m


def max_radial_mode(grid: GridSpec) -> int:
    """Largest rounded radial mode present on the grid."""
    return int(np.round(np.hypot(grid.nx // 2, grid.ny // 2)))


def wavenumbers(grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Angular wavenumbers 2*pi*m for the unit domain.

    Args:
        grid: Grid specification

    Returns:
        Tuple of 1D arrays (kx, ky) in DFT layout
    """
    kx = 2.0 * np.pi * integer_modes(grid.nx)
    ky = 2.0 * np.pi * integer_modes(grid.ny)
    return kx, ky


def odd_wavenumbers(grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Wavenumbers for odd-order derivatives: Nyquist entries zeroed."""
    kx, ky = wavenumbers(grid)
    kx[grid.nx // 2] = 0.0
    ky[grid.ny // 2] = 0.0
    return kx, ky


def apply_multiplier(values: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
    """
    Apply a Fourier multiplier to one field or a stack of fields.

    The multiplier must be Hermitian-symmetric so the result is real.

    Args:
        values: Real array of shape (..., ny, nx)
        multiplier: Complex or real array of shape (ny, nx)

    Returns:
        Real array with the same shape as values
    """
    spectrum = np.fft.fft2(values, axes=(-2, -1))
    return np.fft.ifft2(spectrum * multiplier, axes=(-2, -1)).real


def check_spd(D: np.ndarray):
    """Raise DomainError unless D is a symmetric positive definite 2x2 matrix."""
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (2, 2) or not np.all(np.isfinite(D)):
        raise DomainError("diffusion tensor must be a finite 2x2 matrix")
    if abs(D[0, 1] - D[1, 0]) > 1e-12 * max(1.0, np.abs(D).max()):
        raise DomainError("diffusion tensor must be symmetric")
    if np.linalg.eigvalsh(D).min() <= 0.0:
        raise DomainError("diffusion tensor must be positive definite")


def diffusion_symbol(grid: GridSpec, D: np.ndarray) -> np.ndarray:
    """
    Symbol of -div(D grad u): D11*kx^2 + 2*D12*kx*ky + D22*ky^2.

    The cross term is first order in each axis and uses Nyquist-zeroed wavenumbers.
    """
    kx, ky = wavenumbers(grid)
    ox, oy = odd_wavenumbers(grid)
    KX, KY = np.meshgrid(kx, ky)
    OX, OY = np.meshgrid(ox, oy)
    return D[0, 0] * KX ** 2 + 2.0 * D[0, 1] * OX * OY + D[1, 1] * KY ** 2


def advection_symbol(grid: GridSpec, v: np.ndarray) -> np.ndarray:
    """Symbol of v . grad u: i*(vx*kx + vy*ky)."""
    ox, oy = odd_wavenumbers(grid)
    OX, OY = np.meshgrid(ox, oy)
    return 1j * (v[0] * OX + v[1] * OY)


def laplacian_symbol(grid: GridSpec) -> np.ndarray:
    """Symbol of -Laplacian: |k|^2."""
    return diffusion_symbol(grid, np.eye(2))


def fft2(field: ScalarField2D) -> SpectralField2D:
    """Forward unnormalized DFT."""
    return SpectralField2D(field.grid, np.fft.fft2(field.values))


def ifft2(spec: SpectralField2D) -> ScalarField2D:
    """
    Inverse DFT of a Hermitian-symmetric spectrum.

    Raises:
        SymmetryError: If the imaginary residue exceeds the tolerance
    """
    z = np.fft.ifft2(spec.coeffs)
    scale = np.abs(z.real).max() if z.size else 0.0
    residue = np.abs(z.imag).max() if z.size else 0.0
    if residue > SYMMETRY_TOLERANCE * max(scale, np.finfo(float).tiny):
        raise SymmetryError(f"spectrum is not Hermitian (imaginary residue {residue:.3e})")
    return ScalarField2D(spec.grid, np.ascontiguousarray(z.real))


def spectral_gradient(u: ScalarField2D) -> Tuple[ScalarField2D, ScalarField2D]:
    """
    Spectral partial derivatives of a periodic field.

    Args:
        u: Periodic field

    Returns:
        Tuple of (du/dx, du/dy)
    """
    ox, oy = odd_wavenumbers(u.grid)
    OX, OY = np.meshgrid(ox, oy)
    spectrum = np.fft.fft2(u.values)
    ux = np.fft.ifft2(1j * OX * spectrum).real
    uy = np.fft.ifft2(1j * OY * spectrum).real
    return ScalarField2D(u.grid, ux), ScalarField2D(u.grid, uy)


def diffusion_term(u: ScalarField2D, D: np.ndarray) -> ScalarField2D:
    """
    Evaluate div(D grad u) for a constant SPD tensor.

    Args:
        u: Periodic field
        D: 2x2 symmetric positive definite matrix

    Returns:
        D11*u_xx + 2*D12*u_xy + D22*u_yy
    """
    D = np.asarray(D, dtype=np.float64)
    check_spd(D)
    return ScalarField2D(u.grid, apply_multiplier(u.values, -diffusion_symbol(u.grid, D)))


def radial_modes(grid: GridSpec) -> np.ndarray:
    """Rounded radial integer mode of every spectral index, shape (ny, nx)."""
    MX, MY = np.meshgrid(integer_modes(grid.nx), integer_modes(grid.ny))
    return np.round(np.hypot(MX, MY)).astype(int)


def radial_band_mask(grid: GridSpec, band: FrequencyBand) -> np.ndarray:
    """
    Boolean mask of spectral indices whose rounded radius lies in the band.

    Args:
        grid: Grid specification
        band: Inclusive radial band

    Returns:
        Boolean array of shape (ny, nx)
    """
    band.validate(grid)
    radius = radial_modes(grid)
    return (radius >= band.k_min) & (radius <= band.k_max)
