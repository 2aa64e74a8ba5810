"""
Biphoton Amplitude and Schmidt Decomposition

Builds the two-photon transverse amplitude
    Phi(q_s, q_i) = Gamma(q_s + q_i) * F(q_s - q_i)
with a Gaussian pump envelope Gamma of momentum width sigma_p and either
the phase-matching sinc F = sinc(L^2 |q_s - q_i|^2) or its Gaussian stand-in
F = exp(-c_g L^2 |q_s - q_i|^2). The amplitude is Schmidt-decomposed by SVD
and characterized by its Schmidt number and entanglement entropy.

With c_g = 1/4 the Gaussian model is exactly the Mehler kernel: its
per-axis spectrum is geometric with ratio ((g-1)/(g+1))^2 for g = sigma_p * L,
the 2-D Schmidt number is (g + 1/g)^2 / 4 and the Schmidt modes are
Hermite-Gauss (or, shell by shell, Laguerre-Gauss) modes.
"""

import logging
import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
from numba import njit, prange
from pydantic import BaseModel, ConfigDict, Field

from app.models.settings import (
    AmplitudeModel,
    GaussianMatching,
    ModeFamily,
    PumpSettings,
    ToleranceSettings,
)
from app.services.grid import SpaceTag, TransverseGrid, transform_axis, transform_stack
from app.services.modes import ModeSet, build_mode_set, mode_labels
from app.utils.errors import DecompositionError, ResolutionError

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCES = ToleranceSettings()

MATCHING_CONSTANTS = {
    GaussianMatching.CLOSED_FORM: 0.25,
    GaussianMatching.SECOND_MOMENT: 1.0,
}

MAX_FULL_KERNEL_SAMPLES = 64

# Products of axis weights closer than this (relative) form one degenerate shell
DEGENERACY_RTOL = 1e-9

# Relative deficit of the SVD Schmidt number below the closed form that is logged
KAPPA_SHORTFALL = 0.05


class Representation(str, Enum):
    """Storage of a biphoton kernel"""
    FULL_KERNEL = "full_kernel"  # (N^2, N^2) matrix over flattened [y, x] samples
    SEPARABLE_1D = "separable_1d"  # two (N, N) one-axis kernels, 2-D kernel = kron(K_y, K_x)


class PumpCrystalSpec(BaseModel):
    """Pump momentum width, crystal parameter and amplitude model"""

    model_config = ConfigDict(frozen=True)

    sigma_p: float = Field(..., gt=0, description="Pump transverse-momentum width")
    L: float = Field(..., gt=0, description="Crystal parameter, L^2 = l_z lambda_p / 4 pi")
    model: AmplitudeModel = AmplitudeModel.DOUBLE_GAUSSIAN
    gaussian_match: GaussianMatching = GaussianMatching.CLOSED_FORM

    @classmethod
    def balanced(
        cls,
        product: float,
        model: AmplitudeModel = AmplitudeModel.DOUBLE_GAUSSIAN,
        gaussian_match: GaussianMatching = GaussianMatching.CLOSED_FORM,
    ) -> "PumpCrystalSpec":
        """sigma_p = L = sqrt(product), i.e. lengths in units of sqrt(L / sigma_p)."""
        if not product > 0:
            raise ValueError(f"sigma_p * L must be positive, got {product}")
        root = math.sqrt(product)
        return cls(sigma_p=root, L=root, model=model, gaussian_match=gaussian_match)

    @classmethod
    def from_settings(cls, settings: PumpSettings) -> "PumpCrystalSpec":
        if settings.sigma_p is not None and settings.L is not None:
            return cls(
                sigma_p=settings.sigma_p,
                L=settings.L,
                model=settings.model,
                gaussian_match=settings.gaussian_match,
            )
        return cls.balanced(settings.sigma_p_L, settings.model, settings.gaussian_match)

    @property
    def product(self) -> float:
        return self.sigma_p * self.L

    @property
    def matching_constant(self) -> float:
        return MATCHING_CONSTANTS[self.gaussian_match]

    @property
    def effective_length(self) -> float:
        """Length entering the closed forms (2 sqrt(c_g) L for the Gaussian model)."""
        if self.model == AmplitudeModel.SINC:
            return self.L
        return 2.0 * math.sqrt(self.matching_constant) * self.L

    @property
    def effective_product(self) -> float:
        return self.sigma_p * self.effective_length


class EntanglementMetrics(BaseModel):
    """Schmidt number (participation ratio) and entanglement entropy in bits"""

    model_config = ConfigDict(frozen=True)

    schmidt_number_kappa: float = Field(..., gt=0.0)
    entropy_bits: float = Field(..., ge=0.0)


def schmidt_number_gaussian(sigma_p: float, L: float) -> float:
    """
    Closed-form 2-D Schmidt number of the double-Gaussian amplitude.

    Args:
        sigma_p: Pump momentum width
        L: Crystal parameter

    Returns:
        (sigma_p L + 1 / (sigma_p L))^2 / 4, minimal (= 1) at sigma_p L = 1

    Raises:
        ValueError: If either argument is not positive
    """
    if not (sigma_p > 0 and L > 0):
        raise ValueError(f"sigma_p and L must be positive, got {sigma_p}, {L}")
    g = sigma_p * L
    return 0.25 * (g + 1.0 / g) ** 2


def axis_schmidt_number(product: float) -> float:
    """Per-axis Schmidt number (g + 1/g) / 2; its square is the 2-D value."""
    if not product > 0:
        raise ValueError(f"product must be positive, got {product}")
    return 0.5 * (product + 1.0 / product)


def geometric_ratio(product: float) -> float:
    """Per-axis ratio lambda_{n+1} / lambda_n = ((g - 1)/(g + 1))^2."""
    return ((product - 1.0) / (product + 1.0)) ** 2


def fundamental_waist(spec: PumpCrystalSpec) -> float:
    """
    Real-space waist of the fundamental Schmidt mode of the Gaussian model.

    The momentum waist is sqrt(2 sigma_p / L_eff); the real-space waist is
    its transform partner 2 / w_q (sqrt(2) in balanced units).
    """
    return math.sqrt(2.0 * spec.effective_length / spec.sigma_p)


def entanglement_metrics(
    weights: np.ndarray, tolerances: ToleranceSettings = DEFAULT_TOLERANCES
) -> EntanglementMetrics:
    """
    Schmidt number 1 / sum(lambda^2) and entropy -sum(lambda log2 lambda).

    Args:
        weights: Normalized Schmidt weights
        tolerances: Allowed deviation of sum(weights) from 1

    Returns:
        EntanglementMetrics

    Raises:
        ValueError: If weights are negative or not normalized
    """
    lam = np.asarray(weights, dtype=np.float64)
    if lam.size == 0 or np.any(lam < 0):
        raise ValueError("weights must be non-empty and non-negative")
    total = float(np.sum(lam))
    if abs(total - 1.0) > tolerances.weight_sum:
        raise ValueError(f"weights must sum to 1, got {total!r}")
    positive = lam[lam > 0]
    kappa = 1.0 / float(np.sum(lam * lam))
    entropy = float(-np.sum(positive * np.log2(positive)))
    return EntanglementMetrics(schmidt_number_kappa=kappa, entropy_bits=max(entropy, 0.0))


def check_resolution(
    spec: PumpCrystalSpec,
    grid: TransverseGrid,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
) -> None:
    """
    Verify the momentum grid resolves both amplitude factors.

    Passing does not mean the grid holds every Schmidt mode: at N = 64 the
    SVD Schmidt number saturates near 90, so kappa >= 100 needs N >= 128.
    schmidt_decompose logs a warning when the SVD value falls short.

    Raises:
        ResolutionError: If d_q exceeds resolution_factor * min(sigma_p, 1/L_eff)
            or the momentum half span is below span_factor * max(sigma_p, 1/L_eff)
    """
    inverse_length = 1.0 / spec.effective_length
    narrow = min(spec.sigma_p, inverse_length)
    wide = max(spec.sigma_p, inverse_length)
    if grid.momentum_step > tolerances.resolution_factor * narrow:
        raise ResolutionError(
            f"Momentum step {grid.momentum_step:.4g} does not resolve the narrowest amplitude "
            f"feature {narrow:.4g} (sigma_p={spec.sigma_p:.4g}, 1/L={inverse_length:.4g}); "
            f"increase grid.half_extent"
        )
    if grid.momentum_half_span < tolerances.span_factor * wide:
        raise ResolutionError(
            f"Momentum half span {grid.momentum_half_span:.4g} is too small for the widest "
            f"amplitude feature {wide:.4g}; increase grid.samples_per_axis or reduce "
            f"grid.half_extent"
        )


class BiphotonAmplitude:
    """
    Discretized biphoton kernel over momentum samples, unit Frobenius norm.

    Full kernels are indexed (q_s flat, q_i flat) with row-major [y, x]
    flattening; separable kernels store the x and y one-axis factors.
    """

    def __init__(
        self,
        grid: TransverseGrid,
        representation: Representation,
        kernel: Optional[np.ndarray] = None,
        kernel_x: Optional[np.ndarray] = None,
        kernel_y: Optional[np.ndarray] = None,
        spec: Optional[PumpCrystalSpec] = None,
    ):
        """
        Initialize and normalize the kernel.

        Args:
            grid: Momentum sampling grid
            representation: full_kernel or separable_1d
            kernel: (N^2, N^2) matrix for full_kernel
            kernel_x: (N, N) x-axis factor for separable_1d
            kernel_y: (N, N) y-axis factor for separable_1d
            spec: Source parameters, when known

        Raises:
            ValueError: On missing or mis-shaped kernels
        """
        n = grid.samples_per_axis
        self.grid = grid
        self.representation = Representation(representation)
        self.spec = spec
        self.kernel: Optional[np.ndarray] = None
        self.kernel_x: Optional[np.ndarray] = None
        self.kernel_y: Optional[np.ndarray] = None

        if self.representation == Representation.FULL_KERNEL:
            if kernel is None or kernel.shape != (n * n, n * n):
                raise ValueError(f"full_kernel needs a ({n * n}, {n * n}) kernel")
            self.kernel = _unit_frobenius(kernel)
        else:
            if spec is not None and spec.model != AmplitudeModel.DOUBLE_GAUSSIAN:
                raise ValueError("separable_1d is only exact for the double_gaussian model")
            if kernel_x is None or kernel_y is None:
                raise ValueError("separable_1d needs kernel_x and kernel_y")
            if kernel_x.shape != (n, n) or kernel_y.shape != (n, n):
                raise ValueError(f"one-axis kernels must be ({n}, {n})")
            self.kernel_x = _unit_frobenius(kernel_x)
            self.kernel_y = _unit_frobenius(kernel_y)

    @property
    def is_separable(self) -> bool:
        return self.representation == Representation.SEPARABLE_1D

    def frobenius_norm(self) -> float:
        if self.is_separable:
            return float(np.linalg.norm(self.kernel_x) * np.linalg.norm(self.kernel_y))
        return float(np.linalg.norm(self.kernel))

    def full_kernel(self) -> np.ndarray:
        """Dense (N^2, N^2) kernel; separable kernels are expanded with kron(K_y, K_x)."""
        if self.is_separable:
            return np.kron(self.kernel_y, self.kernel_x)
        return self.kernel

    def with_global_phase(self, theta: float) -> "BiphotonAmplitude":
        """Same amplitude multiplied by exp(i theta)."""
        phase = np.exp(1j * theta)
        if self.is_separable:
            return BiphotonAmplitude(
                self.grid,
                self.representation,
                kernel_x=self.kernel_x * phase,
                kernel_y=self.kernel_y,
                spec=self.spec,
            )
        return BiphotonAmplitude(
            self.grid, self.representation, kernel=self.kernel * phase, spec=self.spec
        )

    def __repr__(self) -> str:
        return f"BiphotonAmplitude({self.representation.value}, grid={self.grid!r})"


def _unit_frobenius(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix)
    if not np.all(np.isfinite(matrix)):
        raise ValueError("kernel contains non-finite values")
    total = np.linalg.norm(matrix)
    if total == 0:
        raise ValueError("kernel is identically zero")
    out = matrix / total
    if np.iscomplexobj(out) and not np.any(out.imag):
        out = out.real
    return out


@njit(parallel=True, cache=True)
def _assemble_sinc_kernel(qx: np.ndarray, qy: np.ndarray, sigma_p: float, L: float) -> np.ndarray:
    """Gamma(q_s + q_i) sinc(L^2 |q_s - q_i|^2) over flattened samples, one row per thread."""
    size = qx.shape[0]
    out = np.empty((size, size), dtype=np.float64)
    inv_four_var = 1.0 / (4.0 * sigma_p * sigma_p)
    l_sq = L * L
    for i in prange(size):
        for j in range(size):
            sx = qx[i] + qx[j]
            sy = qy[i] + qy[j]
            dx = qx[i] - qx[j]
            dy = qy[i] - qy[j]
            arg = l_sq * (dx * dx + dy * dy)
            phase_matching = 1.0 if arg == 0.0 else math.sin(arg) / arg
            out[i, j] = math.exp(-(sx * sx + sy * sy) * inv_four_var) * phase_matching
    return out


def full_kernel_memory_bytes(samples_per_axis: int) -> int:
    """Rough peak memory of a full-kernel real SVD: kernel, U and V^T in float64."""
    return 3 * 8 * samples_per_axis**4


def amplitude_sinc(
    spec: PumpCrystalSpec,
    grid: TransverseGrid,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
) -> BiphotonAmplitude:
    """
    Full kernel Gamma(q_s + q_i) sinc(L^2 |q_s - q_i|^2), unit Frobenius norm.

    Args:
        spec: Source with model sinc
        grid: Momentum grid (N <= 64)
        tolerances: Resolution factors

    Returns:
        BiphotonAmplitude in full_kernel representation

    Raises:
        ValueError: If the model is not sinc or N exceeds the full-kernel limit
        ResolutionError: If the grid does not resolve the kernel
    """
    if spec.model != AmplitudeModel.SINC:
        raise ValueError(f"amplitude_sinc expects model sinc, got {spec.model.value}")
    if grid.samples_per_axis > MAX_FULL_KERNEL_SAMPLES:
        raise ValueError(
            f"Full-kernel amplitudes are limited to N <= {MAX_FULL_KERNEL_SAMPLES} "
            f"(N = {grid.samples_per_axis} would need about "
            f"{full_kernel_memory_bytes(grid.samples_per_axis) / 2**30:.1f} GiB)"
        )
    check_resolution(spec, grid, tolerances)

    qx, qy = grid.coordinates(SpaceTag.MOMENTUM)
    kernel = _assemble_sinc_kernel(qx.ravel(), qy.ravel(), spec.sigma_p, spec.L)
    logger.info(
        f"Assembled sinc kernel {kernel.shape} for sigma_p*L={spec.product:.4g}, "
        f"~{full_kernel_memory_bytes(grid.samples_per_axis) / 2**20:.0f} MiB for the SVD"
    )
    return BiphotonAmplitude(grid, Representation.FULL_KERNEL, kernel=kernel, spec=spec)


def amplitude_gaussian(
    spec: PumpCrystalSpec,
    grid: TransverseGrid,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
) -> BiphotonAmplitude:
    """
    Separable double-Gaussian kernel
    exp(-|q_s + q_i|^2 / 4 sigma_p^2) exp(-c_g L^2 |q_s - q_i|^2).

    Args:
        spec: Source with model double_gaussian
        grid: Momentum grid
        tolerances: Resolution factors

    Returns:
        BiphotonAmplitude in separable_1d representation (identical x and y factors)

    Raises:
        ValueError: If the model is not double_gaussian
        ResolutionError: If the grid does not resolve the kernel
    """
    if spec.model != AmplitudeModel.DOUBLE_GAUSSIAN:
        raise ValueError(
            f"amplitude_gaussian expects model double_gaussian, got {spec.model.value}"
        )
    check_resolution(spec, grid, tolerances)

    q = grid.axis(SpaceTag.MOMENTUM)
    q_s, q_i = np.meshgrid(q, q, indexing="ij")
    axis_kernel = np.exp(
        -((q_s + q_i) ** 2) / (4.0 * spec.sigma_p**2)
        - spec.matching_constant * spec.L**2 * (q_s - q_i) ** 2
    )
    return BiphotonAmplitude(
        grid,
        Representation.SEPARABLE_1D,
        kernel_x=axis_kernel,
        kernel_y=axis_kernel.copy(),
        spec=spec,
    )


def build_amplitude(
    spec: PumpCrystalSpec,
    grid: TransverseGrid,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
) -> BiphotonAmplitude:
    """Amplitude for the configured pump model."""
    if spec.model == AmplitudeModel.SINC:
        return amplitude_sinc(spec, grid, tolerances)
    return amplitude_gaussian(spec, grid, tolerances)


class SchmidtDecomposition:
    """
    Schmidt weights with paired signal/idler modes.

    Modes are kept in momentum space (as decomposed) and in real space
    (inverse transform). Weights are renormalized to sum to 1 over the kept
    rank; the mass lost to truncation is reported in discarded_mass.
    """

    def __init__(
        self,
        weights: np.ndarray,
        signal_modes: ModeSet,
        idler_modes: ModeSet,
        signal_real: ModeSet,
        idler_real: ModeSet,
        discarded_mass: float = 0.0,
        axis_weights: Optional[np.ndarray] = None,
        spec: Optional[PumpCrystalSpec] = None,
        tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
    ):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 1 or weights.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(weights < 0) or np.any(np.diff(weights) > 1e-15):
            raise ValueError("weights must be non-negative and non-increasing")
        if abs(float(weights.sum()) - 1.0) > tolerances.weight_sum:
            raise ValueError(f"weights must sum to 1, got {float(weights.sum())!r}")
        for modes in (signal_modes, idler_modes, signal_real, idler_real):
            if len(modes) != weights.size:
                raise ValueError("every mode set must hold one mode per weight")
        if signal_modes.space_tag != SpaceTag.MOMENTUM or signal_real.space_tag != SpaceTag.REAL:
            raise ValueError("signal_modes must be momentum-space, signal_real real-space")

        self.weights = weights
        self.signal_modes = signal_modes
        self.idler_modes = idler_modes
        self.signal_real = signal_real
        self.idler_real = idler_real
        self.discarded_mass = float(discarded_mass)
        self.axis_weights = axis_weights
        self.spec = spec

    @property
    def truncation_rank(self) -> int:
        return int(self.weights.size)

    @property
    def grid(self) -> TransverseGrid:
        return self.signal_modes.grid

    @property
    def manifest(self) -> str:
        return self.signal_real.manifest

    @property
    def labels(self) -> Tuple[Tuple[int, ...], ...]:
        return self.signal_real.labels

    def metrics(self) -> EntanglementMetrics:
        return entanglement_metrics(self.weights)

    def reconstruct(self) -> np.ndarray:
        """sum_n sqrt(lambda_n) u_n v_n^T in the normalization of BiphotonAmplitude.full_kernel."""
        cell = self.grid.cell_area(SpaceTag.MOMENTUM)
        u = self.signal_modes.flat * np.sqrt(self.weights)[:, None]
        return (u.T @ self.idler_modes.flat) * cell

    def summary(self) -> Dict[str, float]:
        """Scalar diagnostics for reports and CSV export."""
        metrics = self.metrics()
        out: Dict[str, float] = {
            "rank": float(self.truncation_rank),
            "kappa_svd": metrics.schmidt_number_kappa,
            "entropy_bits": metrics.entropy_bits,
            "discarded_mass": self.discarded_mass,
            "fundamental_waist": fundamental_waist_from(self),
        }
        if self.axis_weights is not None:
            out["kappa_axis_svd"] = 1.0 / float(np.sum(self.axis_weights**2))
        if self.spec is not None:
            out["sigma_p_L"] = self.spec.product
            out["kappa_closed_form"] = schmidt_number_gaussian(
                self.spec.sigma_p, self.spec.effective_length
            )
            out["kappa_axis_closed_form"] = axis_schmidt_number(self.spec.effective_product)
        return out

    def __repr__(self) -> str:
        return (
            f"SchmidtDecomposition(rank={self.truncation_rank}, "
            f"lambda0={self.weights[0]:.4g}, discarded={self.discarded_mass:.3e})"
        )


def fundamental_waist_from(dec: SchmidtDecomposition) -> float:
    """Real-space waist sqrt(2 <rho^2>) of the leading signal mode."""
    grid = dec.grid
    intensity = np.abs(dec.signal_real.stack[0]) ** 2
    rho_sq = grid.radius(SpaceTag.REAL) ** 2
    return math.sqrt(2.0 * float(np.sum(intensity * rho_sq) / np.sum(intensity)))


def _svd(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        return scipy.linalg.svd(matrix, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        logger.warning("gesdd did not converge, retrying with gesvd")
    try:
        return scipy.linalg.svd(matrix, full_matrices=False, lapack_driver="gesvd")
    except np.linalg.LinAlgError as e:
        raise DecompositionError(f"SVD did not converge: {e}") from e


def _fix_phases(
    u_real: np.ndarray, u_mom: np.ndarray, v_real: np.ndarray, v_mom: np.ndarray
) -> None:
    """
    Rotate each pair in place so the largest-magnitude real-space sample of u
    is real-positive; v takes the conjugate rotation so u v is unchanged.
    """
    flat = u_real.reshape(u_real.shape[0], -1)
    peak = flat[np.arange(flat.shape[0]), np.argmax(np.abs(flat), axis=1)]
    magnitude = np.abs(peak)
    rotation = np.where(magnitude > 0, np.conj(peak) / np.where(magnitude > 0, magnitude, 1), 1)
    shape = (-1,) + (1,) * (u_real.ndim - 1)
    u_real *= rotation.reshape(shape)
    u_mom *= rotation.reshape(shape)
    v_real *= np.conj(rotation).reshape(shape)
    v_mom *= np.conj(rotation).reshape(shape)


def _mode_sets(
    grid: TransverseGrid,
    u_mom: np.ndarray,
    v_mom: np.ndarray,
    u_real: np.ndarray,
    v_real: np.ndarray,
    manifest: str,
    labels: Tuple[Tuple[int, ...], ...],
) -> Tuple[ModeSet, ModeSet, ModeSet, ModeSet]:
    return (
        ModeSet(grid, u_mom, SpaceTag.MOMENTUM, manifest, labels),
        ModeSet(grid, v_mom, SpaceTag.MOMENTUM, manifest, labels),
        ModeSet(grid, u_real, SpaceTag.REAL, manifest, labels),
        ModeSet(grid, v_real, SpaceTag.REAL, manifest, labels),
    )


def _manifest(amp: BiphotonAmplitude, rank: int) -> str:
    source = (
        f"{amp.spec.model.value}:sigma_p={amp.spec.sigma_p!r}:L={amp.spec.L!r}"
        f":match={amp.spec.gaussian_match.value}"
        if amp.spec is not None
        else "custom"
    )
    return (
        f"schmidt:{amp.representation.value}:{source}:N={amp.grid.n}"
        f":half_extent={amp.grid.half_extent!r}:rank={rank}"
    )


def _shell_order(
    lam: np.ndarray, index_x: np.ndarray, index_y: np.ndarray, rtol: float = DEGENERACY_RTOL
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Descending order of product weights with near-equal values grouped.

    Sorted neighbours within rtol of each other share a shell; shells are
    ordered by weight, members by total order and then larger n_x first.

    Returns:
        (order, weights) where every member of a shell carries the shell mean
    """
    by_value = np.argsort(-lam, kind="stable")
    sorted_lam = lam[by_value]
    gaps = sorted_lam[1:] < sorted_lam[:-1] * (1.0 - rtol)
    group = np.concatenate([[0], np.cumsum(gaps)])
    group_of = np.empty_like(group)
    group_of[by_value] = group
    means = np.bincount(group, weights=sorted_lam) / np.bincount(group)
    order = np.lexsort((-index_x, index_x + index_y, group_of))
    return order, means[group_of]


def _decompose_separable(amp: BiphotonAmplitude, rank: int) -> SchmidtDecomposition:
    grid = amp.grid
    axis_cell = grid.momentum_step
    factors = []
    for kernel in (amp.kernel_x, amp.kernel_y):
        u, s, vh = _svd(kernel)
        u_mom = np.ascontiguousarray(u.T) / math.sqrt(axis_cell)
        v_mom = vh / math.sqrt(axis_cell)
        u_real = transform_axis(u_mom, grid, inverse=True)
        v_real = transform_axis(v_mom, grid, inverse=True)
        u_mom = u_mom.astype(np.complex128)
        v_mom = v_mom.astype(np.complex128)
        _fix_phases(u_real, u_mom, v_real, v_mom)
        factors.append((s * s, u_mom, v_mom, u_real, v_real))

    (lam_x, ux, vx, ux_r, vx_r), (lam_y, uy, vy, uy_r, vy_r) = factors
    n = grid.n
    index_x, index_y = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    index_x = index_x.ravel()
    index_y = index_y.ravel()
    lam = np.outer(lam_y, lam_x).ravel()
    order, shell_lam = _shell_order(lam, index_x, index_y)
    order = order[:rank]
    a = index_x[order]
    b = index_y[order]

    kept = shell_lam[order]
    total = float(lam.sum())
    discarded = max(0.0, 1.0 - float(kept.sum()) / total)
    weights = kept / kept.sum()
    labels = tuple((int(i), int(j)) for i, j in zip(a, b))

    def outer(fy: np.ndarray, fx: np.ndarray) -> np.ndarray:
        return np.einsum("ki,kj->kij", fy[b], fx[a])

    u_mom, v_mom, u_real, v_real = _mode_sets(
        grid,
        outer(uy, ux),
        outer(vy, vx),
        outer(uy_r, ux_r),
        outer(vy_r, vx_r),
        _manifest(amp, rank),
        labels,
    )
    return SchmidtDecomposition(
        weights,
        u_mom,
        v_mom,
        u_real,
        v_real,
        discarded_mass=discarded,
        axis_weights=lam_x / lam_x.sum(),
        spec=amp.spec,
    )


def _decompose_full(amp: BiphotonAmplitude, rank: int) -> SchmidtDecomposition:
    grid = amp.grid
    n = grid.n
    cell = grid.cell_area(SpaceTag.MOMENTUM)
    u, s, vh = _svd(amp.kernel)
    lam_all = s * s
    kept = lam_all[:rank]
    discarded = max(0.0, 1.0 - float(kept.sum()) / float(lam_all.sum()))

    u_mom = (u[:, :rank].T.reshape(rank, n, n) / math.sqrt(cell)).astype(np.complex128)
    v_mom = (vh[:rank].reshape(rank, n, n) / math.sqrt(cell)).astype(np.complex128)
    u_real = transform_stack(u_mom, grid, inverse=True)
    v_real = transform_stack(v_mom, grid, inverse=True)
    _fix_phases(u_real, u_mom, v_real, v_mom)

    labels = tuple((k,) for k in range(rank))
    sets = _mode_sets(grid, u_mom, v_mom, u_real, v_real, _manifest(amp, rank), labels)
    return SchmidtDecomposition(
        kept / kept.sum(), *sets, discarded_mass=discarded, spec=amp.spec
    )


def schmidt_decompose(amp: BiphotonAmplitude, rank: int) -> SchmidtDecomposition:
    """
    Schmidt decomposition of a sampled amplitude by SVD.

    Separable kernels are decomposed axis by axis and recombined with
    lambda_(n_x, n_y) = lambda_x[n_x] lambda_y[n_y], re-sorted descending.
    Products equal to a relative DEGENERACY_RTOL form one shell with a
    shared weight, ordered by lower total order first, then larger n_x.

    Args:
        amp: Biphoton amplitude
        rank: Number of mode pairs to keep (1 <= rank <= N^2)

    Returns:
        SchmidtDecomposition with phase-fixed modes

    Raises:
        DecompositionError: If rank is out of range or the SVD fails
    """
    n_sq = amp.grid.n**2
    if not 1 <= rank <= n_sq:
        raise DecompositionError(f"rank must be in [1, {n_sq}], got {rank}")

    if amp.is_separable:
        dec = _decompose_separable(amp, rank)
    else:
        dec = _decompose_full(amp, rank)

    kappa = dec.metrics().schmidt_number_kappa
    logger.info(
        f"Schmidt decomposition ({amp.representation.value}, rank {rank}): "
        f"kappa={kappa:.4g}, discarded mass {dec.discarded_mass:.3e}"
    )
    _warn_kappa_shortfall(amp, kappa, rank)
    return dec


def _warn_kappa_shortfall(amp: BiphotonAmplitude, kappa: float, rank: int) -> None:
    spec = amp.spec
    if spec is None or spec.model != AmplitudeModel.DOUBLE_GAUSSIAN:
        return
    closed = schmidt_number_gaussian(spec.sigma_p, spec.effective_length)
    if kappa < (1.0 - KAPPA_SHORTFALL) * closed:
        logger.warning(
            f"SVD Schmidt number {kappa:.4g} is {1.0 - kappa / closed:.1%} below the "
            f"closed form {closed:.4g}: N={amp.grid.n} samples per axis with rank {rank} "
            f"cannot hold this many modes; raise grid.samples_per_axis "
            f"(kappa >= 100 needs N >= 128)"
        )


def schmidt_decompose_analytic(
    spec: PumpCrystalSpec,
    family: ModeFamily,
    max_total_order: int,
    grid: TransverseGrid,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
) -> SchmidtDecomposition:
    """
    Closed-form Schmidt decomposition of the double-Gaussian amplitude.

    Weights are (1 - mu)^2 mu^order per mode (mu the per-axis geometric
    ratio); shells of equal total order are degenerate, so HG and LG modes are
    both valid Schmidt bases. Real-space idler modes are
    (-1)^order u_n for sigma_p L > 1 (mirror) and u_n otherwise (direct), with
    LG idlers complex-conjugated.

    Args:
        spec: double_gaussian source
        family: hermite_gauss or laguerre_gauss
        max_total_order: Highest kept total order
        grid: Sampling grid
        tolerances: Mode tolerances

    Returns:
        SchmidtDecomposition whose mode sets carry analytic specs

    Raises:
        ValueError: If the model is not double_gaussian
    """
    if spec.model != AmplitudeModel.DOUBLE_GAUSSIAN:
        raise ValueError("Analytic Schmidt modes exist only for the double_gaussian model")

    product = spec.effective_product
    mu = geometric_ratio(product)
    waist = fundamental_waist(spec)
    sign = -1.0 if product > 1.0 else 1.0

    orders = np.array(
        [
            a + b if family == ModeFamily.HERMITE_GAUSS else 2 * a + abs(b)
            for a, b in mode_labels(family, max_total_order)
        ]
    )
    idler_phases = sign**orders

    sets = []
    for space in (SpaceTag.MOMENTUM, SpaceTag.REAL):
        signal = build_mode_set(family, max_total_order, waist, grid, space, tolerances)
        idler = build_mode_set(
            family,
            max_total_order,
            waist,
            grid,
            space,
            tolerances,
            phases=idler_phases,
            conjugate_azimuth=True,
        )
        sets.append((signal, idler))
    (u_mom, v_mom), (u_real, v_real) = sets

    raw = (1.0 - mu) ** 2 * mu**orders.astype(np.float64)
    kept = float(raw.sum())
    manifest = (
        f"analytic:{family.value}:order={max_total_order}:waist={waist!r}"
        f":sigma_p={spec.sigma_p!r}:L={spec.L!r}:N={grid.n}:half_extent={grid.half_extent!r}"
    )
    u_mom, v_mom, u_real, v_real = (
        _with_manifest(m, manifest) for m in (u_mom, v_mom, u_real, v_real)
    )
    logger.info(
        f"Analytic {family.value} Schmidt basis: {len(orders)} modes, mu={mu:.4g}, "
        f"discarded mass {max(0.0, 1.0 - kept):.3e}"
    )
    return SchmidtDecomposition(
        raw / kept,
        u_mom,
        v_mom,
        u_real,
        v_real,
        discarded_mass=max(0.0, 1.0 - kept),
        axis_weights=(1.0 - mu) * mu ** np.arange(max_total_order + 1, dtype=np.float64)
        / (1.0 - mu ** (max_total_order + 1)),
        spec=spec,
    )


def _with_manifest(modes: ModeSet, manifest: str) -> ModeSet:
    return ModeSet(
        grid=modes.grid,
        stack=modes.stack,
        space_tag=modes.space_tag,
        manifest=manifest,
        labels=modes.labels,
        specs=modes.specs,
        phases=modes.phases,
        norms=modes.norms,
    )


def participation_ratios(weights: np.ndarray) -> List[float]:
    """Cumulative participation ratio of the first k weights (renormalized), k = 1..len."""
    lam = np.asarray(weights, dtype=np.float64)
    sums = np.cumsum(lam)
    squares = np.cumsum(lam * lam)
    return list(sums * sums / squares)
