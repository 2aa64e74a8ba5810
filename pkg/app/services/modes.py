"""
Transverse Modes

Orthonormal Hermite-Gauss and Laguerre-Gauss families used as Schmidt bases,
for far-field quadrature and for mode galleries.

Polynomials are never built from factorials: HG modes use the normalized
Hermite-function recurrence and LG modes the normalized Laguerre-function
recurrence (with a log-gamma prefactor), which stay finite well beyond total
order 50.

Ordering of a ModeSet is fixed: total order ascending, then
- HG: n_x descending, giving (0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...
- LG: azimuthal index l descending, giving (0,0), (0,1), (0,-1), (0,2), (1,0), (0,-2), ...
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.interpolate import RegularGridInterpolator
from scipy.special import gammaln

from app.models.settings import ModeFamily, ToleranceSettings
from app.services.grid import ComplexField, SpaceTag, TransverseGrid, transform_stack
from app.utils.errors import ResolutionError
from app.utils.kernels import hermitian_gram

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCES = ToleranceSettings()


class ModeSpec(BaseModel):
    """
    One analytic transverse mode.

    index_a is n_x (HG) or the radial index p (LG); index_b is n_y (HG) or the
    azimuthal charge l (LG, any sign). waist is the real-space waist.
    """

    model_config = ConfigDict(frozen=True)

    family: ModeFamily
    index_a: int = Field(..., ge=0)
    index_b: int
    waist: float = Field(..., gt=0)

    @model_validator(mode="after")
    def validate_indices(self) -> "ModeSpec":
        """HG indices are both non-negative"""
        if self.family == ModeFamily.HERMITE_GAUSS and self.index_b < 0:
            raise ValueError(f"hermite_gauss requires index_b >= 0, got {self.index_b}")
        return self

    @property
    def total_order(self) -> int:
        if self.family == ModeFamily.HERMITE_GAUSS:
            return self.index_a + self.index_b
        return 2 * self.index_a + abs(self.index_b)

    @property
    def label(self) -> Tuple[int, int]:
        return (self.index_a, self.index_b)

    def with_waist(self, waist: float) -> "ModeSpec":
        return self.model_copy(update={"waist": waist})


def hermite_functions(n_max: int, x: np.ndarray) -> np.ndarray:
    """
    Normalized Hermite functions psi_0..psi_n_max at x.

    psi_n(x) = H_n(x) exp(-x^2/2) / sqrt(2^n n! sqrt(pi)), evaluated with
    psi_{n+1} = sqrt(2/(n+1)) x psi_n - sqrt(n/(n+1)) psi_{n-1}.

    Returns:
        Array of shape (n_max + 1,) + x.shape
    """
    x = np.asarray(x, dtype=np.float64)
    table = np.empty((n_max + 1,) + x.shape, dtype=np.float64)
    table[0] = math.pi ** -0.25 * np.exp(-0.5 * x * x)
    if n_max >= 1:
        table[1] = math.sqrt(2.0) * x * table[0]
    for n in range(1, n_max):
        table[n + 1] = (
            math.sqrt(2.0 / (n + 1)) * x * table[n] - math.sqrt(n / (n + 1)) * table[n - 1]
        )
    return table


def laguerre_functions(p_max: int, alpha: int, t: np.ndarray) -> np.ndarray:
    """
    Normalized generalized Laguerre functions for p = 0..p_max.

    g_p(t) = sqrt(p!/(p+alpha)!) L_p^alpha(t) t^(alpha/2) exp(-t/2), so that
    integral_0^inf g_p g_q dt = delta_pq.

    Returns:
        Array of shape (p_max + 1,) + t.shape
    """
    t = np.asarray(t, dtype=np.float64)
    table = np.empty((p_max + 1,) + t.shape, dtype=np.float64)
    if alpha == 0:
        table[0] = np.exp(-0.5 * t)
    else:
        # t^(alpha/2) / sqrt(alpha!) in log form; the core sample t = 0 is exactly zero
        safe_t = np.where(t > 0, t, 1.0)
        table[0] = np.where(
            t > 0,
            np.exp(0.5 * alpha * np.log(safe_t) - 0.5 * t - 0.5 * gammaln(alpha + 1.0)),
            0.0,
        )
    if p_max >= 1:
        table[1] = (1.0 + alpha - t) * table[0] / math.sqrt(1.0 + alpha)
    for k in range(1, p_max):
        table[k + 1] = (
            (2 * k + 1 + alpha - t) * table[k] - math.sqrt(k * (k + alpha)) * table[k - 1]
        ) / math.sqrt((k + 1) * (k + 1 + alpha))
    return table


def _hg_real(spec: ModeSpec, x: np.ndarray, y: np.ndarray, waist: float) -> np.ndarray:
    scale = math.sqrt(2.0) / waist
    hx = hermite_functions(spec.index_a, scale * x)[spec.index_a]
    hy = hermite_functions(spec.index_b, scale * y)[spec.index_b]
    return (scale * hx * hy).astype(np.complex128)


def _lg_real(spec: ModeSpec, x: np.ndarray, y: np.ndarray, waist: float) -> np.ndarray:
    p, ell = spec.index_a, spec.index_b
    t = 2.0 * (x * x + y * y) / (waist * waist)
    radial = laguerre_functions(p, abs(ell), t)[p]
    phi = np.arctan2(y, x)
    return math.sqrt(2.0 / math.pi) / waist * radial * np.exp(1j * ell * phi)


def evaluate_mode(
    spec: ModeSpec, x: np.ndarray, y: np.ndarray, space: SpaceTag = SpaceTag.REAL
) -> np.ndarray:
    """
    Evaluate an analytic mode at arbitrary points.

    In momentum space the mode of real waist w is (-i)^order times the same
    mode with waist 2/w, matching the transform convention of the grid module.

    Args:
        spec: Mode to evaluate
        x: x coordinates (rho or q)
        y: y coordinates, broadcastable with x
        space: REAL or MOMENTUM

    Returns:
        Complex samples, continuum-normalized
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    waist = spec.waist
    prefactor: complex = 1.0
    if space == SpaceTag.MOMENTUM:
        waist = 2.0 / spec.waist
        prefactor = (-1j) ** (spec.total_order % 4)
    if spec.family == ModeFamily.HERMITE_GAUSS:
        values = _hg_real(spec, x, y, waist)
    else:
        values = _lg_real(spec, x, y, waist)
    return prefactor * values


def _sample_normalized(
    spec: ModeSpec,
    grid: TransverseGrid,
    space: SpaceTag,
    tolerances: ToleranceSettings,
) -> Tuple[np.ndarray, float]:
    x, y = grid.coordinates(space)
    values = evaluate_mode(spec, x, y, space)
    norm_sq = float(np.sum(np.abs(values) ** 2) * grid.cell_area(space))
    if abs(norm_sq - 1.0) > tolerances.normalization:
        raise ResolutionError(
            f"Mode {spec.family.value}{spec.label} with waist {spec.waist:.4g} is not resolved "
            f"on {grid!r} in {space.name.lower()} space: norm^2 = {norm_sq:.6g}"
        )
    norm = math.sqrt(norm_sq)
    return values / norm, norm


def hermite_gauss(
    spec: ModeSpec,
    grid: TransverseGrid,
    space: SpaceTag = SpaceTag.REAL,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
) -> ComplexField:
    """
    Sample a 2-D Hermite-Gauss mode and unit-normalize it on the grid.

    Args:
        spec: Mode with family hermite_gauss
        grid: Target grid
        space: REAL, or MOMENTUM for the transformed mode
        tolerances: Normalization tolerance

    Returns:
        Unit-norm ComplexField

    Raises:
        ValueError: If spec is not a Hermite-Gauss mode
        ResolutionError: If the sampled norm deviates from 1 by more than the tolerance
    """
    if spec.family != ModeFamily.HERMITE_GAUSS:
        raise ValueError(f"hermite_gauss expects a hermite_gauss spec, got {spec.family.value}")
    values, _ = _sample_normalized(spec, grid, space, tolerances)
    return ComplexField(grid, values, space)


def laguerre_gauss(
    spec: ModeSpec,
    grid: TransverseGrid,
    space: SpaceTag = SpaceTag.REAL,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
) -> ComplexField:
    """
    Sample a Laguerre-Gauss mode LG_{p,l} (azimuthal phase exp(i l phi)) and
    unit-normalize it on the grid.

    Raises:
        ValueError: If spec is not a Laguerre-Gauss mode
        ResolutionError: If the sampled norm deviates from 1 by more than the tolerance
    """
    if spec.family != ModeFamily.LAGUERRE_GAUSS:
        raise ValueError(
            f"laguerre_gauss expects a laguerre_gauss spec, got {spec.family.value}"
        )
    values, _ = _sample_normalized(spec, grid, space, tolerances)
    return ComplexField(grid, values, space)


def mode_labels(family: ModeFamily, max_total_order: int) -> List[Tuple[int, int]]:
    """
    Index pairs of all modes up to max_total_order in the fixed ordering.

    Args:
        family: Mode family
        max_total_order: Highest total order (>= 0)

    Returns:
        List of (index_a, index_b)
    """
    if max_total_order < 0:
        raise ValueError(f"max_total_order must be >= 0, got {max_total_order}")
    labels: List[Tuple[int, int]] = []
    for order in range(max_total_order + 1):
        if family == ModeFamily.HERMITE_GAUSS:
            labels.extend((n_x, order - n_x) for n_x in range(order, -1, -1))
        else:
            labels.extend(((order - abs(ell)) // 2, ell) for ell in range(order, -order - 1, -2))
    return labels


@dataclass(frozen=True, eq=False)
class ModeSet:
    """
    Ordered, orthonormal set of modes sampled on one grid.

    stack holds the samples as (M, N, N). specs is set for analytic sets and
    enables exact evaluation off the grid; phases are constant prefactors
    applied on top of the analytic modes (idler regime signs). labels are the
    (index_a, index_b) pairs when known. manifest names the basis so coupling
    matrices can be checked against it.
    """

    grid: TransverseGrid
    stack: np.ndarray = field(repr=False)
    space_tag: SpaceTag
    manifest: str
    labels: Tuple[Tuple[int, ...], ...] = ()
    specs: Optional[Tuple[ModeSpec, ...]] = None
    phases: Optional[np.ndarray] = field(default=None, repr=False)
    norms: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        stack = np.array(self.stack, dtype=np.complex128, copy=True)
        n = self.grid.samples_per_axis
        if stack.ndim != 3 or stack.shape[1:] != (n, n):
            raise ValueError(f"Mode stack must have shape (M, {n}, {n}), got {stack.shape}")
        stack.flags.writeable = False
        object.__setattr__(self, "stack", stack)
        object.__setattr__(self, "space_tag", SpaceTag(self.space_tag))
        if self.labels and len(self.labels) != len(stack):
            raise ValueError("labels must match the number of modes")
        if self.specs is not None and len(self.specs) != len(stack):
            raise ValueError("specs must match the number of modes")

    def __len__(self) -> int:
        return self.stack.shape[0]

    @property
    def fields(self) -> Tuple[ComplexField, ...]:
        return tuple(ComplexField(self.grid, mode, self.space_tag) for mode in self.stack)

    @property
    def flat(self) -> np.ndarray:
        """(M, N*N) view in row-major sample order."""
        return self.stack.reshape(len(self), -1)

    def subset(self, count: int) -> "ModeSet":
        """First `count` modes."""
        if not 1 <= count <= len(self):
            raise ValueError(f"count must be in [1, {len(self)}], got {count}")
        return ModeSet(
            grid=self.grid,
            stack=self.stack[:count],
            space_tag=self.space_tag,
            manifest=self.manifest,
            labels=self.labels[:count],
            specs=self.specs[:count] if self.specs is not None else None,
            phases=self.phases[:count] if self.phases is not None else None,
            norms=self.norms[:count] if self.norms is not None else None,
        )

    def in_space(self, space: SpaceTag) -> "ModeSet":
        """Same modes represented in another space (grid transform of the samples)."""
        if space == self.space_tag:
            return self
        stack = transform_stack(self.stack, self.grid, inverse=space == SpaceTag.REAL)
        return ModeSet(
            grid=self.grid,
            stack=stack,
            space_tag=space,
            manifest=self.manifest,
            labels=self.labels,
            specs=self.specs,
            phases=self.phases,
            norms=self.norms,
        )

    def gram(self) -> np.ndarray:
        """Gram matrix <u_n, u_m> with quadrature weights."""
        weight = np.full(self.flat.shape[1], self.grid.cell_area(self.space_tag))
        return hermitian_gram(np.ascontiguousarray(self.flat), weight).T

    def evaluate(self, x: np.ndarray, y: np.ndarray, space: SpaceTag) -> np.ndarray:
        """
        Evaluate every mode at arbitrary points.

        Analytic sets are evaluated exactly; sampled sets are interpolated
        bilinearly (zero outside the grid) in the requested space.

        Returns:
            Array of shape (M,) + broadcast(x, y).shape
        """
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        if self.specs is not None:
            out = np.stack([evaluate_mode(spec, x, y, space) for spec in self.specs])
            if self.norms is not None:
                out = out / self.norms.reshape((-1,) + (1,) * x.ndim)
            if self.phases is not None:
                out = out * self.phases.reshape((-1,) + (1,) * x.ndim)
            return out
        sampled = self.in_space(space)
        axis = self.grid.axis(space)
        values = np.moveaxis(sampled.stack, 0, -1)
        points = np.stack([y.ravel(), x.ravel()], axis=-1)
        real = RegularGridInterpolator(
            (axis, axis), values.real, method="linear", bounds_error=False, fill_value=0.0
        )(points)
        imag = RegularGridInterpolator(
            (axis, axis), values.imag, method="linear", bounds_error=False, fill_value=0.0
        )(points)
        return np.moveaxis(real + 1j * imag, -1, 0).reshape((len(self),) + x.shape)


def gram_deviation(modes: ModeSet) -> float:
    """max |Gram - I| over all entries."""
    gram = modes.gram()
    return float(np.max(np.abs(gram - np.eye(len(modes)))))


def build_mode_set(
    family: ModeFamily,
    max_total_order: int,
    waist: float,
    grid: TransverseGrid,
    space: SpaceTag = SpaceTag.REAL,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
    phases: Optional[Sequence[complex]] = None,
    conjugate_azimuth: bool = False,
) -> ModeSet:
    """
    All modes of a family with total order <= max_total_order.

    Args:
        family: hermite_gauss or laguerre_gauss
        max_total_order: Highest total order
        waist: Real-space waist
        grid: Target grid
        space: Space the samples are taken in
        tolerances: Gram and normalization tolerances
        phases: Optional constant prefactor per mode
        conjugate_azimuth: Use LG_{p,-l} in place of LG_{p,l} (complex-conjugate modes)

    Returns:
        ModeSet in the documented ordering

    Raises:
        ResolutionError: If a mode is unresolved or the Gram deviation exceeds gram_fail
    """
    labels = mode_labels(family, max_total_order)
    specs = []
    for a, b in labels:
        if conjugate_azimuth and family == ModeFamily.LAGUERRE_GAUSS:
            b = -b
        specs.append(ModeSpec(family=family, index_a=a, index_b=b, waist=waist))

    stack = np.empty((len(specs), grid.n, grid.n), dtype=np.complex128)
    norms = np.empty(len(specs))
    for k, spec in enumerate(specs):
        stack[k], norms[k] = _sample_normalized(spec, grid, space, tolerances)

    phase_array = None
    if phases is not None:
        phase_array = np.asarray(phases, dtype=np.complex128)
        if phase_array.shape != (len(specs),):
            raise ValueError(f"phases must have {len(specs)} entries")
        stack *= phase_array[:, None, None]

    modes = ModeSet(
        grid=grid,
        stack=stack,
        space_tag=space,
        manifest=f"{family.value}:order={max_total_order}:waist={waist!r}:N={grid.n}",
        labels=tuple(labels),
        specs=tuple(specs),
        phases=phase_array,
        norms=norms,
    )

    deviation = gram_deviation(modes)
    if deviation > tolerances.gram_fail:
        raise ResolutionError(
            f"Gram matrix of {family.value} up to order {max_total_order} deviates by "
            f"{deviation:.3e} on {grid!r}"
        )
    if deviation > tolerances.gram:
        logger.warning(
            f"{family.value} set up to order {max_total_order}: Gram deviation {deviation:.3e}"
        )
    else:
        logger.debug(
            f"{family.value} set up to order {max_total_order}: {len(modes)} modes, "
            f"Gram deviation {deviation:.3e}"
        )
    return modes


def closure_residual(modes: ModeSet, f: ComplexField, count: int) -> float:
    """
    Relative residual of projecting f onto the first `count` modes.

    Returns:
        ||f - sum_n u_n <u_n, f>|| / ||f||
    """
    if f.grid != modes.grid or f.space_tag != modes.space_tag:
        raise ValueError("Field and mode set must share grid and space")
    basis = modes.flat[:count]
    target = f.values.ravel()
    cell = modes.grid.cell_area(modes.space_tag)
    coefficients = (basis.conj() @ target) * cell
    residual = target - coefficients @ basis
    return float(np.linalg.norm(residual) / np.linalg.norm(target))
