"""
Phantoms

Synthetic charge densities used by tests, examples and the sweep
configurations, plus the seeded white-noise utility behind the image
stage's noise-floor table (driven by output.seed and --seed).
"""

import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from app.services.exporters import PGM_MAX, write_gray
from app.services.grid import SpaceTag, TransverseGrid
from app.services.matter import ChargeDensity

logger = logging.getLogger(__name__)

# Blobs of the documented object, as (x, y, width, amplitude) in units of the object radius
OBJECT_BLOBS: Tuple[Tuple[float, float, float, float], ...] = (
    (0.35, 0.30, 0.18, 0.6),
    (-0.40, 0.15, 0.12, -0.4),
    (0.05, -0.45, 0.15, 0.5),
)


def point_phantom(grid: TransverseGrid, x: float, y: float) -> ChargeDensity:
    """
    One-cell spike at the grid sample nearest to (x, y).

    Raises:
        ValueError: If the point lies outside [-a, a)
    """
    step = grid.real_step
    col = int(round((x + grid.half_extent) / step))
    row = int(round((y + grid.half_extent) / step))
    if not (0 <= col < grid.n and 0 <= row < grid.n):
        raise ValueError(f"Point ({x}, {y}) lies outside the grid")
    values = np.zeros((grid.n, grid.n), dtype=np.complex128)
    values[row, col] = 1.0
    return ChargeDensity.from_array(grid, values, phantom="point")


def gaussian_blobs(
    grid: TransverseGrid,
    centers: Sequence[Tuple[float, float]],
    widths: Sequence[float],
    amplitudes: Optional[Sequence[complex]] = None,
) -> ChargeDensity:
    """Sum of Gaussians a_j exp(-|rho - c_j|^2 / w_j^2), normalized to max |sigma| = 1."""
    if amplitudes is None:
        amplitudes = [1.0] * len(centers)
    if not len(centers) == len(widths) == len(amplitudes):
        raise ValueError("centers, widths and amplitudes must have equal length")
    x, y = grid.coordinates(SpaceTag.REAL)
    values = np.zeros((grid.n, grid.n), dtype=np.complex128)
    for (cx, cy), width, amplitude in zip(centers, widths, amplitudes):
        if width <= 0:
            raise ValueError(f"Blob width must be positive, got {width}")
        values += amplitude * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / width**2)
    return ChargeDensity.from_array(grid, values, phantom="gaussian_blobs")


def object_phantom(
    grid: TransverseGrid,
    radius: float = 4.0,
    phase_pitch: Optional[float] = None,
    edge: Optional[float] = None,
) -> ChargeDensity:
    """
    Smooth disk with internal blobs and a programmed radial phase.

    sigma(rho) = |I(rho)| exp(-2 pi i r / pitch) with pitch defaulting to a
    third of the object size (2 * radius). A zero pitch disables the phase.

    Args:
        grid: Real-space grid
        radius: Disk radius
        phase_pitch: Radial phase period
        edge: Width of the tanh edge (defaults to one grid step)
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if phase_pitch is None:
        phase_pitch = 2.0 * radius / 3.0
    if edge is None:
        edge = grid.real_step
    x, y = grid.coordinates(SpaceTag.REAL)
    r = np.hypot(x, y)

    magnitude = 0.5 * (1.0 - np.tanh((r - radius) / edge))
    for bx, by, width, amplitude in OBJECT_BLOBS:
        magnitude = magnitude + amplitude * np.exp(
            -((x - bx * radius) ** 2 + (y - by * radius) ** 2) / (width * radius) ** 2
        )
    magnitude = np.clip(magnitude, 0.0, None)

    phase = np.zeros_like(r) if phase_pitch == 0 else -2.0 * math.pi * r / phase_pitch
    logger.debug(f"Object phantom: radius {radius}, phase pitch {phase_pitch}")
    return ChargeDensity.from_array(grid, magnitude * np.exp(1j * phase), phantom="object")


def white_noise(reference: np.ndarray, relative_power: float, seed: int) -> np.ndarray:
    """
    Real white noise with ||noise||^2 = relative_power * ||reference||^2.

    Args:
        reference: Array whose energy sets the scale
        relative_power: Noise-to-signal energy ratio
        seed: Generator seed

    Returns:
        Noise array shaped like reference
    """
    if relative_power < 0:
        raise ValueError(f"relative_power must be non-negative, got {relative_power}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(np.shape(reference))
    energy = float(np.sum(np.abs(reference) ** 2))
    return noise * math.sqrt(relative_power * energy / float(np.sum(noise**2)))


def phase_to_gray(phase: np.ndarray, max_value: int = PGM_MAX) -> np.ndarray:
    """Inverse of the load mapping phi = -pi + 2 pi g / (maxval + 1)."""
    levels = max_value + 1
    gray = np.rint((np.asarray(phase) + math.pi) * levels / (2.0 * math.pi)).astype(np.int64)
    return np.mod(gray, levels)


def save_phantom(
    sigma: ChargeDensity, magnitude_path: Path, phase_path: Optional[Path] = None
) -> Tuple[Path, Optional[Path]]:
    """
    Write a charge density as magnitude (and optional phase) PGM files that
    load_charge_density reads back on the same grid.
    """
    magnitude = np.abs(sigma.values)
    peak = float(magnitude.max())
    write_gray(magnitude_path, np.rint(magnitude / peak * PGM_MAX).astype(np.int64))
    if phase_path is not None:
        write_gray(phase_path, phase_to_gray(np.angle(sigma.values)))
    return magnitude_path, phase_path
