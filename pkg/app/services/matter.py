"""
Matter Coupling

Ingests the projected charge density sigma(rho), projects it on a mode
basis (coupling matrices beta^(1) with weight sigma and beta^(2) with weight
|sigma|^2) and builds the idler reduced density matrix before and after the
first-order interaction.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from app.services.biphoton import SchmidtDecomposition
from app.services.exporters import read_pgm, sha256_file
from app.services.grid import ComplexField, SpaceTag, TransverseGrid, to_momentum
from app.services.modes import ModeSet
from app.utils.errors import BasisMismatchError
from app.utils.kernels import circular_correlate, hermitian_gram, weighted_gram

logger = logging.getLogger(__name__)


class CouplingOrder(str, Enum):
    """Which matter quantity a coupling matrix projects"""
    FIRST = "1"  # sigma
    SECOND = "2"  # |sigma|^2
    GAMMA = "gamma"  # far-field generalization of FIRST


class DensityOrder(str, Enum):
    """Order of an idler density matrix"""
    ZEROTH = "zeroth"
    FIRST_ORDER_CORRECTION = "first_order_correction"


@dataclass(frozen=True)
class ChargeDensity:
    """Real-space complex charge density, magnitude normalized to max 1"""

    density: ComplexField
    source: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.density.space_tag != SpaceTag.REAL:
            raise ValueError("ChargeDensity must be a real-space field")
        if not np.all(np.isfinite(self.density.values)):
            raise ValueError("ChargeDensity contains non-finite values")

    @property
    def grid(self) -> TransverseGrid:
        return self.density.grid

    @property
    def values(self) -> np.ndarray:
        return self.density.values

    @classmethod
    def from_array(
        cls, grid: TransverseGrid, values: np.ndarray, normalize: bool = True, **source: str
    ) -> "ChargeDensity":
        """
        Wrap an in-memory array.

        Args:
            grid: Real-space grid
            values: (N, N) complex samples
            normalize: Scale so max |sigma| = 1
            source: Provenance entries

        Raises:
            ValueError: If normalization is requested for an all-zero array
        """
        values = np.asarray(values, dtype=np.complex128)
        if normalize:
            peak = float(np.max(np.abs(values)))
            if peak == 0:
                raise ValueError("Cannot normalize an all-zero charge density")
            values = values / peak
        return cls(ComplexField(grid, values, SpaceTag.REAL), dict(source))


def _resample(image: np.ndarray, grid: TransverseGrid) -> np.ndarray:
    """
    Bilinear resampling of an image spanning [-a, a) onto the grid.

    Image pixel (i, j) sits at the same relative position as grid sample
    (i N/H, j N/W), so an N x N image maps one-to-one.
    """
    height, width = image.shape
    k = np.arange(grid.n, dtype=np.float64)
    rows = k * height / grid.n
    cols = k * width / grid.n
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(image, [rr, cc], order=1, mode="nearest")


def load_charge_density(
    magnitude_path: str | Path,
    phase_path: Optional[str | Path],
    grid: TransverseGrid,
) -> ChargeDensity:
    """
    Load |sigma| (and optionally its phase) from grayscale PGM files.

    Gray levels g of the phase file map to phi = -pi + 2 pi g / (maxval + 1),
    so mid-gray is zero phase. Both images are resampled bilinearly (the phase
    through its unit phasor) and the magnitude is normalized to max 1.

    Args:
        magnitude_path: 8- or 16-bit PGM (P2/P5)
        phase_path: Optional PGM of identical dimensions
        grid: Target real-space grid

    Returns:
        ChargeDensity with provenance (paths and sha256)

    Raises:
        ValueError: If the phase image dimensions differ or the magnitude is all zero
        MalformedArtifactError: If a file is not a readable PGM
    """
    magnitude_path = Path(magnitude_path)
    magnitude, max_value = read_pgm(magnitude_path)
    magnitude = magnitude.astype(np.float64) / max_value
    source = {"magnitude": str(magnitude_path), "magnitude_sha256": sha256_file(magnitude_path)}

    phase = None
    if phase_path is not None:
        phase_path = Path(phase_path)
        gray, phase_max = read_pgm(phase_path)
        if gray.shape != magnitude.shape:
            raise ValueError(
                f"Phase image {phase_path.name} is {gray.shape[1]}x{gray.shape[0]} but magnitude "
                f"image {magnitude_path.name} is {magnitude.shape[1]}x{magnitude.shape[0]}"
            )
        phase = -math.pi + 2.0 * math.pi * gray.astype(np.float64) / (phase_max + 1)
        source.update({"phase": str(phase_path), "phase_sha256": sha256_file(phase_path)})

    values = _resample(magnitude, grid).astype(np.complex128)
    if phase is not None:
        re = _resample(np.cos(phase), grid)
        im = _resample(np.sin(phase), grid)
        values = values * np.exp(1j * np.arctan2(im, re))

    logger.info(
        f"Loaded charge density {magnitude.shape[1]}x{magnitude.shape[0]} "
        f"{'with' if phase is not None else 'without'} phase onto {grid!r}"
    )
    return ChargeDensity.from_array(grid, values, **source)


class CouplingMatrix:
    """Mode-to-mode coupling matrix in a named basis"""

    def __init__(self, entries: np.ndarray, basis_manifest: str, order_p: CouplingOrder):
        entries = np.array(entries, dtype=np.complex128, copy=True)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError(f"Coupling matrix must be square, got {entries.shape}")
        entries.flags.writeable = False
        self.entries = entries
        self.basis_manifest = basis_manifest
        self.order_p = CouplingOrder(order_p)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def is_hermitian(self, atol: float = 1e-12) -> bool:
        return bool(np.allclose(self.entries, self.entries.conj().T, rtol=0, atol=atol))

    def scaled(self, factor: complex) -> "CouplingMatrix":
        return CouplingMatrix(self.entries * factor, self.basis_manifest, self.order_p)

    def __add__(self, other: "CouplingMatrix") -> "CouplingMatrix":
        if other.basis_manifest != self.basis_manifest or other.size != self.size:
            raise BasisMismatchError("Cannot add coupling matrices in different bases")
        return CouplingMatrix(self.entries + other.entries, self.basis_manifest, self.order_p)

    def __repr__(self) -> str:
        return f"CouplingMatrix(order={self.order_p.value}, size={self.size})"


def _require_real_modes(sigma: ChargeDensity, modes: ModeSet) -> None:
    if modes.grid != sigma.grid:
        raise BasisMismatchError(f"Mode grid {modes.grid!r} differs from sigma grid {sigma.grid!r}")
    if modes.space_tag != SpaceTag.REAL:
        raise BasisMismatchError("Coupling matrices need real-space modes")


def beta_matrix(sigma: ChargeDensity, modes: ModeSet, order_p: int) -> CouplingMatrix:
    """
    beta_nm = sum_rho u_n(rho) w(rho) conj(u_m(rho)) d_rho^2 with w = sigma
    (order 1) or |sigma|^2 (order 2).

    Real weights use the Hermitian kernel, so beta^(2) (and beta^(1) of a real
    sigma) is exactly Hermitian.

    Args:
        sigma: Charge density
        modes: Real-space modes on sigma's grid
        order_p: 1 or 2

    Returns:
        CouplingMatrix in the modes' basis

    Raises:
        ValueError: If order_p is not 1 or 2
        BasisMismatchError: On grid or space mismatch
    """
    if order_p not in (1, 2):
        raise ValueError(f"order_p must be 1 or 2, got {order_p}")
    _require_real_modes(sigma, modes)

    cell = sigma.grid.cell_area(SpaceTag.REAL)
    values = sigma.values.ravel()
    a = np.ascontiguousarray(modes.flat)
    if order_p == 2:
        entries = hermitian_gram(a, (np.abs(values) ** 2) * cell)
    elif not np.any(values.imag):
        entries = hermitian_gram(a, values.real * cell)
    else:
        entries = weighted_gram(a, values * cell, a)

    order = CouplingOrder.FIRST if order_p == 1 else CouplingOrder.SECOND
    logger.debug(f"beta^({order_p}) assembled for {len(modes)} modes")
    return CouplingMatrix(entries, modes.manifest, order)


def beta_matrix_momentum(sigma: ChargeDensity, modes: ModeSet) -> CouplingMatrix:
    """
    First-order coupling evaluated in momentum space,
    beta_nm = (d_q^4 / 2 pi) sum_{s,d} u_n(s) sigma_hat(d - s) conj(u_m(d)),
    with circular (DFT-periodic) momentum differences. On a common grid this
    equals beta_matrix(sigma, modes, 1) up to rounding.

    Args:
        sigma: Charge density
        modes: Modes on sigma's grid (either space; transformed as needed)

    Returns:
        CouplingMatrix of order 1
    """
    if modes.grid != sigma.grid:
        raise BasisMismatchError(f"Mode grid {modes.grid!r} differs from sigma grid {sigma.grid!r}")
    grid = sigma.grid
    u_hat = np.ascontiguousarray(modes.in_space(SpaceTag.MOMENTUM).stack)
    sigma_hat = np.ascontiguousarray(to_momentum(sigma.density).values)

    correlated = circular_correlate(u_hat, sigma_hat)
    scale = grid.momentum_step**4 / (2.0 * math.pi)
    flat_u = u_hat.reshape(len(modes), -1)
    flat_h = np.conj(correlated.reshape(len(modes), -1))
    entries = weighted_gram(flat_u, np.full(flat_u.shape[1], scale, dtype=np.complex128), flat_h)
    return CouplingMatrix(entries, modes.manifest, CouplingOrder.FIRST)


class IdlerDensityMatrix:
    """Idler reduced density matrix (or its first-order correction) in the Schmidt basis"""

    def __init__(
        self,
        entries: np.ndarray,
        order: DensityOrder,
        basis_manifest: str,
        labels: Sequence[Tuple[int, ...]] = (),
    ):
        entries = np.array(entries, dtype=np.complex128, copy=True)
        entries.flags.writeable = False
        self.entries = entries
        self.order = DensityOrder(order)
        self.basis_manifest = basis_manifest
        self.labels = tuple(labels)

    def trace(self) -> complex:
        return complex(np.trace(self.entries))

    def purity(self) -> float:
        return float(np.real(np.trace(self.entries @ self.entries)))

    def is_hermitian(self, atol: float = 1e-14) -> bool:
        return bool(np.allclose(self.entries, self.entries.conj().T, rtol=0, atol=atol))

    def __repr__(self) -> str:
        return f"IdlerDensityMatrix(order={self.order.value}, size={self.entries.shape[0]})"


def idler_density_initial(dec: SchmidtDecomposition) -> IdlerDensityMatrix:
    """diag(lambda_n): the idler marginal of the unperturbed pair."""
    return IdlerDensityMatrix(
        np.diag(dec.weights).astype(np.complex128),
        DensityOrder.ZEROTH,
        dec.manifest,
        dec.labels,
    )


def idler_density_first_order(
    dec: SchmidtDecomposition, beta1: CouplingMatrix
) -> IdlerDensityMatrix:
    """
    First-order correction P + P^dagger with P_nm = i beta_nm sqrt(lambda_n lambda_m).

    Args:
        dec: Schmidt decomposition
        beta1: First-order coupling in dec's signal basis (at least rank x rank)

    Returns:
        Hermitian IdlerDensityMatrix

    Raises:
        BasisMismatchError: If beta1 is not first order or belongs to another basis
    """
    if beta1.order_p != CouplingOrder.FIRST:
        raise BasisMismatchError(f"Expected a first-order coupling, got {beta1.order_p.value}")
    if beta1.basis_manifest != dec.manifest:
        raise BasisMismatchError(
            f"Coupling basis '{beta1.basis_manifest}' differs from decomposition "
            f"basis '{dec.manifest}'"
        )
    rank = dec.truncation_rank
    if beta1.size < rank:
        raise BasisMismatchError(f"Coupling has {beta1.size} modes, decomposition {rank}")

    root = np.sqrt(dec.weights)
    p = 1j * beta1.entries[:rank, :rank] * np.outer(root, root)
    return IdlerDensityMatrix(
        p + p.conj().T, DensityOrder.FIRST_ORDER_CORRECTION, dec.manifest, dec.labels
    )


def traced_heatmap(matrix: np.ndarray, labels: Sequence[Tuple[int, ...]]) -> np.ndarray:
    """
    Trace out the second mode index: T[n_x, m_x] = sum_{n_y} rho[(n_x, n_y), (m_x, n_y)].

    Args:
        matrix: (M, M) matrix in a two-index basis
        labels: (n_x, n_y) per basis element

    Returns:
        Complex (K, K) matrix, K = max n_x + 1

    Raises:
        ValueError: If labels are not two-index labels
    """
    if len(labels) != matrix.shape[0] or any(len(label) != 2 for label in labels):
        raise ValueError("traced_heatmap needs one (n_x, n_y) label per basis element")
    first = np.array([label[0] for label in labels])
    second = np.array([label[1] for label in labels])
    size = int(first.max()) + 1
    out = np.zeros((size, size), dtype=np.complex128)
    same = second[:, None] == second[None, :]
    rows, cols = np.nonzero(same)
    np.add.at(out, (first[rows], first[cols]), matrix[rows, cols])
    return out


def project_density(
    density: IdlerDensityMatrix, idler_real: ModeSet, basis: ModeSet
) -> np.ndarray:
    """
    Re-express a Schmidt-basis density matrix in another real-space basis:
    rho'_ab = sum_nm <h_a|v_n> rho_nm <v_m|h_b>.

    Args:
        density: Matrix in the idler Schmidt basis
        idler_real: Real-space idler modes the matrix refers to
        basis: Target real-space basis on the same grid

    Returns:
        Complex (len(basis), len(basis)) matrix

    Raises:
        BasisMismatchError: On grid, space or size mismatch
    """
    if basis.grid != idler_real.grid or basis.space_tag != idler_real.space_tag:
        raise BasisMismatchError("Target basis must share the idler modes' grid and space")
    size = density.entries.shape[0]
    if size > len(idler_real):
        raise BasisMismatchError(f"Density has {size} modes, idler set only {len(idler_real)}")
    cell = idler_real.grid.cell_area(idler_real.space_tag)
    weight = np.full(idler_real.flat.shape[1], cell, dtype=np.complex128)
    overlap = np.conj(
        weighted_gram(
            np.ascontiguousarray(basis.flat),
            weight,
            np.ascontiguousarray(idler_real.flat[:size]),
        )
    )
    return overlap @ density.entries @ overlap.conj().T
