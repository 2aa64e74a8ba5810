"""
Coincidence Imaging

Builds idler-plane images from a Schmidt decomposition and a coupling
matrix:

    C(rho) = sum_{n,m<N} conj(w_n v_n(rho)) beta_nm w_m v_m(rho),  image = Re C

with w_n = sqrt(lambda_n) for the natural spectrum or a reweighted
(flattened, custom) spectrum. Also provides background subtraction, phase
recovery from in-phase/quadrature images, the frequency-resolved limit and
fidelity metrics.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import stats

from app.models.settings import PhaseAxis, RegimeSign, WeightScheme
from app.services.biphoton import SchmidtDecomposition
from app.services.grid import SpaceTag, TransverseGrid
from app.services.matter import ChargeDensity, CouplingMatrix
from app.utils.errors import BasisMismatchError
from app.utils.kernels import sesquilinear_map

logger = logging.getLogger(__name__)

# |sigma| threshold below which phase is undefined for correlation purposes
PHASE_MASK_THRESHOLD = 0.1


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Per-mode weights w_n of a truncated image sum"""

    values: np.ndarray = field(repr=False)
    scheme: WeightScheme

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("weights must be finite and non-negative")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "scheme", WeightScheme(self.scheme))

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class RealImage:
    """Signed real image on the idler grid"""

    grid: TransverseGrid
    values: np.ndarray = field(repr=False)
    background_subtracted: bool = False

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, copy=True)
        n = self.grid.samples_per_axis
        if values.shape != (n, n):
            raise ValueError(f"Image must have shape ({n}, {n}), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Image contains non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __add__(self, other: "RealImage") -> "RealImage":
        _require_same_grid(self, other)
        return RealImage(self.grid, self.values + other.values, self.background_subtracted)


def _require_same_grid(a: RealImage, b: RealImage) -> None:
    if a.grid != b.grid:
        raise BasisMismatchError(f"Image grids differ: {a.grid!r} vs {b.grid!r}")


def _check_truncation(dec: SchmidtDecomposition, truncation: int) -> None:
    if not 1 <= truncation <= dec.truncation_rank:
        raise ValueError(
            f"Truncation N={truncation} outside [1, {dec.truncation_rank}] (decomposition rank)"
        )


def reweight(
    dec: SchmidtDecomposition,
    scheme: WeightScheme,
    truncation: int,
    custom: Optional[Sequence[float]] = None,
) -> WeightVector:
    """
    Weights for the first `truncation` modes.

    natural: w_n = sqrt(lambda_n). flattened: w_n = c with c^2 N = sum_{n<N} lambda_n,
    so the truncated sum carries the same energy. custom: user weights, used
    as given.

    Args:
        dec: Schmidt decomposition
        scheme: Weight scheme
        truncation: Number of modes N
        custom: Weights for the custom scheme (at least N entries)

    Returns:
        WeightVector of length N

    Raises:
        ValueError: If N is out of range or custom weights are missing or non-positive
    """
    scheme = WeightScheme(scheme)
    _check_truncation(dec, truncation)
    lam = dec.weights[:truncation]
    if scheme == WeightScheme.NATURAL:
        values = np.sqrt(lam)
    elif scheme == WeightScheme.FLATTENED:
        values = np.full(truncation, math.sqrt(float(lam.sum()) / truncation))
    else:
        if custom is None or len(custom) < truncation:
            raise ValueError(f"custom scheme needs at least {truncation} weights")
        values = np.asarray(custom[:truncation], dtype=np.float64)
        if np.any(values <= 0):
            raise ValueError("custom weights must be positive")
    return WeightVector(values, scheme)


def coincidence_field(
    dec: SchmidtDecomposition,
    beta: CouplingMatrix,
    weights: WeightVector,
    truncation: int,
) -> np.ndarray:
    """
    Complex contraction C(rho) over the idler grid; the image is its real part.

    Args:
        dec: Schmidt decomposition whose real-space idler modes are used
        beta: Coupling matrix in dec's signal basis
        weights: At least `truncation` weights
        truncation: Number of modes N

    Returns:
        Complex (N_grid, N_grid) array indexed [y, x]

    Raises:
        BasisMismatchError: If beta belongs to another basis or natural weights disagree
        ValueError: If N exceeds the rank, beta or the weights
    """
    if beta.basis_manifest != dec.manifest:
        raise BasisMismatchError(
            f"Coupling basis '{beta.basis_manifest}' differs from decomposition basis "
            f"'{dec.manifest}'"
        )
    _check_truncation(dec, truncation)
    if truncation > beta.size or truncation > len(weights):
        raise ValueError(
            f"Truncation N={truncation} exceeds coupling size {beta.size} "
            f"or weight count {len(weights)}"
        )
    w = weights.values[:truncation]
    if weights.scheme == WeightScheme.NATURAL and not np.allclose(
        w * w, dec.weights[:truncation], rtol=1e-12, atol=0.0
    ):
        raise BasisMismatchError("Natural weights do not match this decomposition's spectrum")

    grid = dec.grid
    modes = dec.idler_real.flat[:truncation]
    a_t = np.ascontiguousarray((w[:, None] * modes).T)
    block = np.ascontiguousarray(beta.entries[:truncation, :truncation])
    return sesquilinear_map(a_t, block).reshape(grid.n, grid.n)


def coincidence_image(
    dec: SchmidtDecomposition,
    beta: CouplingMatrix,
    weights: WeightVector,
    truncation: int,
) -> RealImage:
    """
    Re sum_{n,m<N} w_n w_m beta_nm conj(v_n(rho)) v_m(rho) on the idler grid.

    Linear in beta for fixed weights. See coincidence_field for arguments and errors.
    """
    field_values = coincidence_field(dec, beta, weights, truncation)
    logger.debug(
        f"Coincidence image: order {beta.order_p.value}, N={truncation}, "
        f"scheme {weights.scheme.value}"
    )
    return RealImage(dec.grid, field_values.real)


def recover_phase(
    dec: SchmidtDecomposition,
    beta: CouplingMatrix,
    weights: WeightVector,
    truncation: int,
) -> np.ndarray:
    """
    Phase map from an in-phase image (beta) and a quadrature image (-i beta).

    Returns:
        Phase in (-pi, pi] per idler pixel
    """
    in_phase = coincidence_image(dec, beta, weights, truncation)
    quadrature = coincidence_image(dec, beta.scaled(-1j), weights, truncation)
    return np.arctan2(quadrature.values, in_phase.values)


def phase_correlation(
    phase: np.ndarray, reference: np.ndarray, mask: Optional[np.ndarray] = None
) -> float:
    """
    Pearson correlation of unit phasors (cos and sin stacked) over a mask.

    Wrap-around at +-pi does not count as an error.

    Args:
        phase: Recovered phase
        reference: Programmed phase
        mask: Boolean pixels to compare (all when None)

    Raises:
        ValueError: If the mask selects fewer than two pixels
    """
    if mask is None:
        mask = np.ones(np.shape(phase), dtype=bool)
    if int(np.count_nonzero(mask)) < 2:
        raise ValueError("phase_correlation needs at least two masked pixels")
    p = phase[mask]
    r = reference[mask]
    a = np.concatenate([np.cos(p), np.sin(p)])
    b = np.concatenate([np.cos(r), np.sin(r)])
    return float(stats.pearsonr(a, b).statistic)


def phase_mask(sigma: ChargeDensity, threshold: float = PHASE_MASK_THRESHOLD) -> np.ndarray:
    """Pixels where |sigma| is large enough for its phase to be meaningful."""
    return np.abs(sigma.values) > threshold


def resolve_regime_sign(setting: RegimeSign, dec: SchmidtDecomposition) -> RegimeSign:
    """
    Concrete detector sign: auto resolves to mirror when sigma_p L_eff > 1.

    Raises:
        ValueError: If auto is requested for a decomposition without a source spec
    """
    setting = RegimeSign(setting)
    if setting != RegimeSign.AUTO:
        return setting
    if dec.spec is None:
        raise ValueError("regime_sign=auto needs a decomposition with a source spec")
    return RegimeSign.MIRROR if dec.spec.effective_product > 1.0 else RegimeSign.DIRECT


def orient_to_sample(values: np.ndarray, sign: RegimeSign) -> np.ndarray:
    """
    Map idler-detector samples back to sample-plane orientation.

    Mirror maps grid index k to (N - k) mod N on both axes, i.e. rho -> -rho
    exactly on the sampled coordinates.
    """
    if RegimeSign(sign) == RegimeSign.AUTO:
        raise ValueError("Resolve regime_sign before orienting an image")
    if sign == RegimeSign.DIRECT:
        return np.array(values, copy=True)
    return np.roll(np.flip(values, axis=(0, 1)), 1, axis=(0, 1))


def subtract_background(raw: RealImage, reference: RealImage) -> RealImage:
    """
    S = -(raw - reference), the image with the non-interacting background removed.

    Raises:
        BasisMismatchError: On grid mismatch
    """
    _require_same_grid(raw, reference)
    return RealImage(raw.grid, -(raw.values - reference.values), background_subtracted=True)


def ideal_image(sigma: ChargeDensity) -> RealImage:
    """Infinite-entanglement limit of the first-order image: Re sigma."""
    return RealImage(sigma.grid, sigma.values.real)


def frequency_resolved_image(
    sigma: ChargeDensity, omega_bar: float, axis: PhaseAxis = PhaseAxis.RADIAL
) -> RealImage:
    """
    Perfect-correlation, single-frequency limit Re[sigma(rho) exp(-i omega_bar r)].

    Args:
        sigma: Charge density
        omega_bar: Signal frequency (c = 1), >= 0
        axis: r = |rho| (radial) or the x coordinate

    Raises:
        ValueError: If omega_bar is negative
    """
    if omega_bar < 0:
        raise ValueError(f"omega_bar must be non-negative, got {omega_bar}")
    grid = sigma.grid
    x, _ = grid.coordinates(SpaceTag.REAL)
    r = grid.radius(SpaceTag.REAL) if PhaseAxis(axis) == PhaseAxis.RADIAL else x
    return RealImage(grid, np.real(sigma.values * np.exp(-1j * omega_bar * r)))


def image_metrics(img: RealImage, reference: RealImage) -> Dict[str, float]:
    """
    Scale-invariant fidelity of an image against a reference.

    nmse is the normalized squared error after the best non-negative scaling
    of img (1 - cos^2 of the angle between them, or 1 when anti-correlated).
    pearson is the pixel correlation coefficient (nan for a constant img).

    Raises:
        BasisMismatchError: On grid mismatch
        ValueError: If the reference has zero variance or zero energy
    """
    _require_same_grid(img, reference)
    a = img.values.ravel()
    b = reference.values.ravel()
    ref_energy = float(b @ b)
    if ref_energy == 0.0 or float(np.ptp(b)) == 0.0:
        raise ValueError("Reference image has zero variance")

    img_energy = float(a @ a)
    overlap = float(a @ b)
    if img_energy == 0.0 or overlap <= 0.0:
        nmse = 1.0
    else:
        nmse = max(0.0, 1.0 - overlap * overlap / (img_energy * ref_energy))

    pearson = float("nan") if float(np.ptp(a)) == 0.0 else float(stats.pearsonr(a, b).statistic)
    return {"nmse": nmse, "pearson": pearson}
