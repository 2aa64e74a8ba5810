"""
Transverse Grid

Square sampling of the transverse plane in real (rho) and momentum (q)
space, unitary Fourier transforms between the two, and quadrature inner
products.

Units: every length is measured in sqrt(L / sigma_p), so a balanced source
has sigma_p = L = sqrt(sigma_p * L) and momenta are in inverse units.

Layout: real coordinates are x_k = -a + k * d_rho (origin at index N/2),
momenta q_k = (k - N/2) * d_q with d_q = pi / a. Arrays are indexed
[y, x]. The Fourier pair is F(q) = (1/2pi) * integral f(rho) exp(-i q.rho),
which maps a Gaussian of waist w onto a Gaussian of waist 2/w. With this
kernel sign a Hermite-Gauss mode of total order n and waist w transforms to
(-i)^n times the same mode with waist 2/w (the opposite sign would give i^n).
"""

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import fft as sp_fft

from app.utils.errors import BasisMismatchError
from app.utils.kernels import ordered_vdot

logger = logging.getLogger(__name__)


class SpaceTag(IntEnum):
    """Meaning of the sample indices; values are the serialized codes"""
    REAL = 0
    MOMENTUM = 1
    REAL_IMAGE = 2  # serialized signed real images only


class TransverseGrid(BaseModel):
    """
    Square N x N sampling with real-space span [-a, a) per axis.

    Immutable and hashable; two grids are interchangeable iff they compare equal.
    """

    model_config = ConfigDict(frozen=True)

    samples_per_axis: int = Field(..., ge=8, description="Samples per axis N (even)")
    half_extent: float = Field(..., gt=0, description="Real-space half extent a")

    @field_validator("samples_per_axis")
    @classmethod
    def validate_even(cls, v: int) -> int:
        """Centering of the zero-frequency sample needs even N"""
        if v % 2:
            raise ValueError(f"samples_per_axis must be even, got {v}")
        return v

    @property
    def n(self) -> int:
        return self.samples_per_axis

    @property
    def real_step(self) -> float:
        return 2.0 * self.half_extent / self.samples_per_axis

    @property
    def momentum_step(self) -> float:
        return 2.0 * math.pi / (2.0 * self.half_extent)

    @property
    def momentum_half_span(self) -> float:
        """Largest |q| on the axis (attained by the unpaired -N/2 sample)."""
        return self.samples_per_axis // 2 * self.momentum_step

    def cell_area(self, space: SpaceTag) -> float:
        """Quadrature weight of one sample in the given space."""
        step = self.momentum_step if space == SpaceTag.MOMENTUM else self.real_step
        return step * step

    def axis(self, space: SpaceTag) -> np.ndarray:
        """1-D coordinates along either axis."""
        k = np.arange(self.samples_per_axis, dtype=np.float64)
        if space == SpaceTag.MOMENTUM:
            return (k - self.samples_per_axis // 2) * self.momentum_step
        return -self.half_extent + k * self.real_step

    def coordinates(self, space: SpaceTag) -> Tuple[np.ndarray, np.ndarray]:
        """(X, Y) coordinate arrays indexed [y, x]."""
        ax = self.axis(space)
        return np.meshgrid(ax, ax, indexing="xy")

    def radius(self, space: SpaceTag) -> np.ndarray:
        x, y = self.coordinates(space)
        return np.hypot(x, y)

    def __repr__(self) -> str:
        return (
            f"TransverseGrid(N={self.samples_per_axis}, half_extent={self.half_extent:.6g}, "
            f"d_rho={self.real_step:.6g}, d_q={self.momentum_step:.6g})"
        )


@dataclass(frozen=True, eq=False)
class ComplexField:
    """
    Complex function sampled on a TransverseGrid.

    The values array is copied on construction and made read-only.
    """

    grid: TransverseGrid
    values: np.ndarray = field(repr=False)
    space_tag: SpaceTag

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.complex128, copy=True)
        n = self.grid.samples_per_axis
        if values.shape != (n, n):
            raise ValueError(f"Field values must have shape ({n}, {n}), got {values.shape}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "space_tag", SpaceTag(self.space_tag))

    @property
    def cell_area(self) -> float:
        return self.grid.cell_area(self.space_tag)

    def scaled(self, factor: complex) -> "ComplexField":
        return ComplexField(self.grid, self.values * factor, self.space_tag)

    def __add__(self, other: "ComplexField") -> "ComplexField":
        _require_compatible(self, other)
        return ComplexField(self.grid, self.values + other.values, self.space_tag)


def make_grid(samples_per_axis: int, half_extent: float) -> TransverseGrid:
    """
    Build a transverse grid.

    Args:
        samples_per_axis: Even N >= 8
        half_extent: Real-space half extent a > 0

    Returns:
        TransverseGrid with d_rho = 2a/N and d_q = pi/a (N * d_rho * d_q = 2 pi)

    Raises:
        ValueError: If N is odd or smaller than 8, or a <= 0
    """
    if samples_per_axis < 8 or samples_per_axis % 2:
        raise ValueError(f"samples_per_axis must be even and >= 8, got {samples_per_axis}")
    if not half_extent > 0:
        raise ValueError(f"half_extent must be positive, got {half_extent}")
    return TransverseGrid(samples_per_axis=samples_per_axis, half_extent=float(half_extent))


def self_dual_half_extent(samples_per_axis: int) -> float:
    """Half extent at which d_rho equals d_q, i.e. sqrt(pi N / 2)."""
    return math.sqrt(math.pi * samples_per_axis / 2.0)


def auto_half_extent(samples_per_axis: int, waists: Iterable[float]) -> float:
    """
    Default half extent: five times the largest waist in play, never below the
    self-dual extent.

    Args:
        samples_per_axis: N
        waists: Real-space waists of the modes that will live on the grid

    Returns:
        Half extent a
    """
    largest = max(waists, default=0.0)
    return max(5.0 * largest, self_dual_half_extent(samples_per_axis))


def _transform(values: np.ndarray, grid: TransverseGrid, inverse: bool, axes) -> np.ndarray:
    ratio = grid.real_step / grid.momentum_step
    scale = (1.0 / ratio if inverse else ratio) ** (len(axes) / 2.0)
    shifted = sp_fft.ifftshift(values, axes=axes)
    if inverse:
        out = sp_fft.ifftn(shifted, axes=axes, norm="ortho")
    else:
        out = sp_fft.fftn(shifted, axes=axes, norm="ortho")
    return sp_fft.fftshift(out, axes=axes) * scale


def transform_stack(values: np.ndarray, grid: TransverseGrid, inverse: bool = False) -> np.ndarray:
    """
    Transform a stack of fields (..., N, N) along its last two axes.

    Args:
        values: Complex array whose trailing axes are [y, x]
        grid: Grid the samples live on
        inverse: False for real -> momentum, True for momentum -> real

    Returns:
        Transformed array of the same shape
    """
    return _transform(np.asarray(values, dtype=np.complex128), grid, inverse, (-2, -1))


def transform_axis(
    values: np.ndarray, grid: TransverseGrid, inverse: bool = False, axis: int = -1
) -> np.ndarray:
    """One-axis version of transform_stack, used by separable kernels."""
    return _transform(np.asarray(values, dtype=np.complex128), grid, inverse, (axis,))


def to_momentum(f: ComplexField) -> ComplexField:
    """
    Unitary 2-D transform of a real-space field to centered momentum layout.

    Args:
        f: Field with space_tag REAL

    Returns:
        Momentum-space field with the same norm

    Raises:
        ValueError: If f is not a real-space field
    """
    if f.space_tag != SpaceTag.REAL:
        raise ValueError(f"to_momentum expects a real-space field, got {f.space_tag.name}")
    return ComplexField(f.grid, transform_stack(f.values, f.grid), SpaceTag.MOMENTUM)


def to_real(f: ComplexField) -> ComplexField:
    """
    Inverse of to_momentum.

    Raises:
        ValueError: If f is not a momentum-space field
    """
    if f.space_tag != SpaceTag.MOMENTUM:
        raise ValueError(f"to_real expects a momentum-space field, got {f.space_tag.name}")
    return ComplexField(f.grid, transform_stack(f.values, f.grid, inverse=True), SpaceTag.REAL)


def _require_compatible(f: ComplexField, g: ComplexField) -> None:
    if f.grid != g.grid:
        raise BasisMismatchError(f"Grid mismatch: {f.grid!r} vs {g.grid!r}")
    if f.space_tag != g.space_tag:
        raise BasisMismatchError(
            f"Space mismatch: {f.space_tag.name} vs {g.space_tag.name}"
        )


def inner_product(f: ComplexField, g: ComplexField) -> complex:
    """
    Quadrature inner product sum(conj(f) * g) * cell_area.

    Summation runs in row-major sample order, so the result is reproducible
    and conjugate-symmetric to the last bit.

    Args:
        f: First field
        g: Second field on the same grid and space

    Returns:
        Complex inner product

    Raises:
        BasisMismatchError: On grid or space mismatch
    """
    _require_compatible(f, g)
    acc = ordered_vdot(f.values.ravel(), g.values.ravel())
    return complex(acc) * f.cell_area


def norm(f: ComplexField) -> float:
    """L2 norm with quadrature weights."""
    return math.sqrt(max(inner_product(f, f).real, 0.0))
