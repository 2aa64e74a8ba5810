"""
Far-Field Diffraction

Spectrally gated far-field imaging. The detected signal direction rho_hat
and frequency omega select the momentum Q = omega * rho_hat (c = 1), so the
coupling seen by the idler is

    gamma_nm = sum_k beta_km int d omega E[omega] int d^2 rho u_n(rho) conj(u_k(omega rho_hat))

with the spectral weight

    E[omega_s] = int d omega_i G_s(omega_s) G_i(omega_i) |A(omega_s + omega_i)|^2.

Gates are unit-peak Gaussians, |A|^2 a unit-area Gaussian; widths are FWHM.
"""

import logging
import math
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import integrate, special

from app.models.settings import GateSettings, QuadratureSettings, ToleranceSettings, WeightScheme
from app.services.biphoton import SchmidtDecomposition
from app.services.grid import SpaceTag
from app.services.imaging import RealImage, coincidence_image, reweight
from app.services.matter import CouplingMatrix, CouplingOrder
from app.services.modes import DEFAULT_TOLERANCES
from app.utils.errors import BasisMismatchError, ResolutionError
from app.utils.kernels import weighted_gram

logger = logging.getLogger(__name__)

FWHM_PER_STD = 2.0 * math.sqrt(2.0 * math.log(2.0))
IDLER_NODES = 129
IDLER_WINDOW_STDS = 8.0
SIGNAL_WINDOW_STDS = 4.0


class GateSpec(BaseModel):
    """Signal and idler detector gates and the pump spectral envelope"""

    model_config = ConfigDict(frozen=True)

    signal_center: float = Field(..., description="Signal gate center frequency")
    signal_fwhm: float = Field(..., gt=0)
    idler_center: float = Field(..., description="Idler gate center frequency")
    idler_fwhm: float = Field(..., gt=0)
    pump_center: float = Field(..., description="Center of |A(omega_s + omega_i)|^2")
    pump_width: float = Field(..., gt=0, description="FWHM of |A|^2")

    @classmethod
    def from_settings(cls, settings: GateSettings) -> "GateSpec":
        pump_center = settings.pump_center
        if pump_center is None:
            pump_center = settings.signal_center + settings.idler_center
        return cls(
            signal_center=settings.signal_center,
            signal_fwhm=settings.signal_fwhm,
            idler_center=settings.idler_center,
            idler_fwhm=settings.idler_fwhm,
            pump_center=pump_center,
            pump_width=settings.pump_width,
        )

    @property
    def signal_std(self) -> float:
        return self.signal_fwhm / FWHM_PER_STD

    @property
    def idler_std(self) -> float:
        return self.idler_fwhm / FWHM_PER_STD

    @property
    def pump_std(self) -> float:
        return self.pump_width / FWHM_PER_STD

    def narrowest_feature(self) -> float:
        """Narrowest FWHM of E[omega_s]: the signal gate or the idler-pump convolution."""
        return min(self.signal_fwhm, math.hypot(self.idler_fwhm, self.pump_width))

    def envelope(self) -> Tuple[float, float]:
        """Mean and standard deviation of the (Gaussian) closed-form E[omega_s]."""
        s2 = self.signal_std**2
        c2 = self.idler_std**2 + self.pump_std**2
        center = self.pump_center - self.idler_center
        mean = (self.signal_center * c2 + center * s2) / (s2 + c2)
        return mean, math.sqrt(s2 * c2 / (s2 + c2))


class QuadratureSpec(BaseModel):
    """Sample counts of the nested far-field quadrature"""

    model_config = ConfigDict(frozen=True)

    omega_samples: int = Field(default=33, ge=1)
    radial_samples: int = Field(default=48, ge=2)
    azimuthal_samples: int = Field(default=64, ge=4)

    @classmethod
    def from_settings(cls, settings: QuadratureSettings) -> "QuadratureSpec":
        return cls(**settings.model_dump())


def _gaussian(omega: np.ndarray, center: float, std: float) -> np.ndarray:
    return np.exp(-((omega - center) ** 2) / (2.0 * std * std))


def _check_gate_resolution(
    gates: GateSpec, omega_grid: np.ndarray, tolerances: ToleranceSettings
) -> None:
    if omega_grid.size < 2:
        return
    spacing = float(np.max(np.diff(omega_grid)))
    limit = gates.narrowest_feature() / tolerances.min_gate_samples
    if spacing > limit:
        raise ResolutionError(
            f"Frequency grid spacing {spacing:.4g} exceeds {limit:.4g}; the narrowest gate "
            f"feature needs {tolerances.min_gate_samples} samples per FWHM"
        )


def spectral_gate_functional(
    gates: GateSpec,
    omega_grid: np.ndarray,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
) -> np.ndarray:
    """
    E[omega_s] by trapezoid quadrature over omega_i at every grid sample.

    The omega_i window follows the product of the idler gate and the pump
    envelope (its mean +- 8 standard deviations), so the quadrature stays
    resolved however narrow the pump is.

    Args:
        gates: Gate specification
        omega_grid: Increasing signal frequencies
        tolerances: min_gate_samples sets the required resolution

    Returns:
        Non-negative E sampled on omega_grid

    Raises:
        ResolutionError: If the grid under-resolves the narrowest feature
    """
    omega_grid = np.asarray(omega_grid, dtype=np.float64)
    if omega_grid.ndim != 1 or np.any(np.diff(omega_grid) <= 0):
        raise ValueError("omega_grid must be a strictly increasing vector")
    _check_gate_resolution(gates, omega_grid, tolerances)

    s_i, s_p = gates.idler_std, gates.pump_std
    total = s_i * s_i + s_p * s_p
    s_eff = s_i * s_p / math.sqrt(total)
    offsets = np.linspace(-IDLER_WINDOW_STDS, IDLER_WINDOW_STDS, IDLER_NODES) * s_eff

    values = np.empty_like(omega_grid)
    norm = 1.0 / (math.sqrt(2.0 * math.pi) * s_p)
    for j, omega_s in enumerate(omega_grid):
        mean = (gates.idler_center * s_p * s_p + (gates.pump_center - omega_s) * s_i * s_i) / total
        omega_i = mean + offsets
        integrand = _gaussian(omega_i, gates.idler_center, s_i) * norm * _gaussian(
            omega_s + omega_i, gates.pump_center, s_p
        )
        values[j] = integrate.trapezoid(integrand, omega_i)
    return _gaussian(omega_grid, gates.signal_center, gates.signal_std) * values


def spectral_gate_closed_form(gates: GateSpec, omega: np.ndarray) -> np.ndarray:
    """Analytic E[omega_s] for Gaussian gates and envelope."""
    omega = np.asarray(omega, dtype=np.float64)
    total = gates.idler_std**2 + gates.pump_std**2
    factor = gates.idler_std / math.sqrt(total)
    idler_part = np.exp(-((omega - (gates.pump_center - gates.idler_center)) ** 2) / (2 * total))
    return _gaussian(omega, gates.signal_center, gates.signal_std) * factor * idler_part


def omega_nodes(
    gates: GateSpec,
    quadrature: QuadratureSpec,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Signal-frequency nodes and normalized spectral weights.

    Nodes span the closed-form envelope mean +- 4 standard deviations; one
    sample means a single node at the mean.

    Returns:
        (nodes, weights) with weights summing to 1
    """
    mean, std = gates.envelope()
    if quadrature.omega_samples == 1:
        return np.array([mean]), np.array([1.0])
    nodes = np.linspace(
        mean - SIGNAL_WINDOW_STDS * std, mean + SIGNAL_WINDOW_STDS * std, quadrature.omega_samples
    )
    spectrum = spectral_gate_functional(gates, nodes, tolerances)
    trapezoid = np.full(nodes.size, nodes[1] - nodes[0])
    trapezoid[[0, -1]] *= 0.5
    weights = spectrum * trapezoid
    total = float(weights.sum())
    if not total > 0:
        raise ResolutionError("Spectral gate weights vanish on the frequency grid")
    return nodes, weights / total


def _polar_nodes(
    half_extent: float, quadrature: QuadratureSpec
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss-Legendre radii on [0, a] with weights, and uniform azimuths."""
    x, w = special.roots_legendre(quadrature.radial_samples)
    radii = 0.5 * half_extent * (x + 1.0)
    radial_weights = 0.5 * half_extent * w
    phi = 2.0 * math.pi * np.arange(quadrature.azimuthal_samples) / quadrature.azimuthal_samples
    return radii, radial_weights, phi


def transfer_matrix(
    dec: SchmidtDecomposition,
    size: int,
    gates: GateSpec,
    quadrature: QuadratureSpec,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
) -> np.ndarray:
    """
    T_nk = integral d omega E[omega] integral d^2 rho u_n(rho) conj(u_k(omega rho_hat)).

    The radial integral is done once per azimuth, R_n(phi) = integral r dr u_n(r, phi),
    because u_k(omega rho_hat) does not depend on r.

    Raises:
        ResolutionError: If a frequency node lies beyond the momentum grid
        ValueError: If a frequency node is negative
    """
    grid = dec.grid
    nodes, weights = omega_nodes(gates, quadrature, tolerances)
    if np.any(nodes < 0):
        raise ValueError(f"Frequency nodes must be non-negative, lowest is {nodes.min():.4g}")
    if float(nodes.max()) > grid.momentum_half_span:
        raise ResolutionError(
            f"Far-field momentum |Q| = {nodes.max():.4g} exceeds the grid's momentum span "
            f"{grid.momentum_half_span:.4g}; increase samples_per_axis or lower the gate "
            f"frequencies"
        )

    signal = dec.signal_real.subset(size)
    radii, radial_weights, phi = _polar_nodes(grid.half_extent, quadrature)
    d_phi = 2.0 * math.pi / phi.size
    rr, pp = np.meshgrid(radii, phi, indexing="ij")
    samples = signal.evaluate(rr * np.cos(pp), rr * np.sin(pp), SpaceTag.REAL)
    ring = np.einsum("r,mra->ma", radial_weights * radii, samples) * d_phi

    momentum = dec.signal_modes.subset(size)
    ww, pp = np.meshgrid(nodes, phi, indexing="ij")
    targets = momentum.evaluate(ww * np.cos(pp), ww * np.sin(pp), SpaceTag.MOMENTUM)

    a = np.ascontiguousarray(np.tile(ring, (1, nodes.size)))
    b = np.ascontiguousarray(targets.reshape(size, -1))
    w = np.ascontiguousarray(np.repeat(weights, phi.size).astype(np.complex128))
    return weighted_gram(a, w, b)


def gamma_matrix(
    dec: SchmidtDecomposition,
    beta1: CouplingMatrix,
    gates: GateSpec,
    quadrature: QuadratureSpec,
    tolerances: ToleranceSettings = DEFAULT_TOLERANCES,
) -> CouplingMatrix:
    """
    Far-field coupling gamma = T beta^(1).

    Args:
        dec: Schmidt decomposition
        beta1: First-order coupling in dec's signal basis
        gates: Spectral gates
        quadrature: Frequency, radial and azimuthal sample counts
        tolerances: Gate resolution settings

    Returns:
        CouplingMatrix of order gamma with beta1's size

    Raises:
        BasisMismatchError: If beta1 is not first order or in another basis
        ResolutionError: If the far-field momenta leave the grid
    """
    if beta1.order_p != CouplingOrder.FIRST:
        raise BasisMismatchError(f"gamma needs a first-order coupling, got {beta1.order_p.value}")
    if beta1.basis_manifest != dec.manifest:
        raise BasisMismatchError(
            f"Coupling basis '{beta1.basis_manifest}' differs from decomposition "
            f"basis '{dec.manifest}'"
        )
    if beta1.size > dec.truncation_rank:
        raise BasisMismatchError(
            f"Coupling has {beta1.size} modes, decomposition only {dec.truncation_rank}"
        )
    transfer = transfer_matrix(dec, beta1.size, gates, quadrature, tolerances)
    logger.info(
        f"gamma assembled: {beta1.size} modes, {quadrature.omega_samples} frequencies, "
        f"{quadrature.radial_samples}x{quadrature.azimuthal_samples} polar nodes"
    )
    return CouplingMatrix(transfer @ beta1.entries, dec.manifest, CouplingOrder.GAMMA)


def far_field_image(dec: SchmidtDecomposition, gamma: CouplingMatrix, truncation: int) -> RealImage:
    """Re sum_{n,m<N} gamma_nm sqrt(lambda_n lambda_m) conj(v_n) v_m on the idler grid."""
    weights = reweight(dec, WeightScheme.NATURAL, truncation)
    return coincidence_image(dec, gamma, weights, truncation)
