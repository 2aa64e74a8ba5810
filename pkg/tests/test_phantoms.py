"""
Unit Tests for Phantoms

Tests for the synthetic charge densities, the seeded noise utility and the
phase gray-level mapping.
"""

import math

import numpy as np
import pytest

from app.services.exporters import read_pgm
from app.services.grid import SpaceTag, make_grid, self_dual_half_extent
from app.services.phantoms import (
    gaussian_blobs,
    object_phantom,
    phase_to_gray,
    point_phantom,
    save_phantom,
    white_noise,
)


@pytest.fixture
def grid():
    """Self-dual 64-sample grid"""
    return make_grid(64, self_dual_half_extent(64))


class TestPointPhantom:
    """Test single-sample phantoms"""

    def test_nearest_sample(self, grid):
        """Test that the spike lands on the nearest grid sample"""
        sigma = point_phantom(grid, 2.0, 0.0)
        rows, cols = np.nonzero(sigma.values)
        assert (rows.tolist(), cols.tolist()) == ([32], [38])
        assert sigma.values[32, 38] == 1.0
        assert sigma.source == {"phantom": "point"}

    def test_outside_grid(self, grid):
        """Test that points outside the grid are rejected"""
        with pytest.raises(ValueError, match="outside"):
            point_phantom(grid, 50.0, 0.0)


class TestGaussianBlobs:
    """Test Gaussian blob phantoms"""

    def test_peak_normalized(self, grid):
        """Test max |sigma| = 1 with the peak at the blob center"""
        sigma = gaussian_blobs(grid, [(0.0, 0.0)], [1.0], [3.0])
        assert np.max(np.abs(sigma.values)) == pytest.approx(1.0)
        assert np.unravel_index(np.argmax(np.abs(sigma.values)), (64, 64)) == (32, 32)

    def test_length_mismatch(self, grid):
        """Test that centers, widths and amplitudes must align"""
        with pytest.raises(ValueError, match="equal length"):
            gaussian_blobs(grid, [(0.0, 0.0)], [1.0, 2.0])

    def test_non_positive_width(self, grid):
        """Test that widths must be positive"""
        with pytest.raises(ValueError, match="width"):
            gaussian_blobs(grid, [(0.0, 0.0)], [0.0])


class TestObjectPhantom:
    """Test the disk-with-blobs object"""

    def test_radial_phase(self, grid):
        """Test phase -2 pi r / pitch inside the disk"""
        sigma = object_phantom(grid, radius=4.0, phase_pitch=2.0)
        r = grid.radius(SpaceTag.REAL)
        inside = (np.abs(sigma.values) > 0.2) & (r < 3.5)
        error = np.angle(sigma.values[inside] * np.exp(2j * math.pi * r[inside] / 2.0))
        assert np.max(np.abs(error)) < 1e-10

    def test_zero_pitch_is_real(self, grid):
        """Test that pitch 0 disables the phase"""
        sigma = object_phantom(grid, phase_pitch=0)
        assert np.all(sigma.values.imag == 0)
        assert np.all(sigma.values.real >= 0)

    def test_support(self, grid):
        """Test that the object vanishes well outside its radius"""
        sigma = object_phantom(grid, radius=3.0)
        outside = grid.radius(SpaceTag.REAL) > 6.0
        assert np.max(np.abs(sigma.values[outside])) < 1e-6
        assert np.max(np.abs(sigma.values)) == pytest.approx(1.0)

    def test_non_positive_radius(self, grid):
        """Test that the radius must be positive"""
        with pytest.raises(ValueError, match="radius"):
            object_phantom(grid, radius=0.0)


class TestNoise:
    """Test seeded white noise"""

    def test_relative_power(self):
        """Test ||noise||^2 = p ||reference||^2"""
        reference = np.linspace(-1.0, 1.0, 256).reshape(16, 16)
        noise = white_noise(reference, 0.01, seed=3)
        assert np.sum(noise**2) == pytest.approx(0.01 * np.sum(reference**2))

    def test_seed_reproducible(self):
        """Test that equal seeds give equal noise"""
        reference = np.ones((8, 8))
        assert np.array_equal(white_noise(reference, 1.0, 5), white_noise(reference, 1.0, 5))
        assert not np.array_equal(white_noise(reference, 1.0, 5), white_noise(reference, 1.0, 6))

    def test_negative_power(self):
        """Test that negative power is rejected"""
        with pytest.raises(ValueError, match="relative_power"):
            white_noise(np.ones((4, 4)), -0.1, 0)


class TestSavePhantom:
    """Test PGM export of phantoms"""

    def test_phase_to_gray(self):
        """Test that zero phase is mid-gray and +-pi wrap to 0"""
        gray = phase_to_gray(np.array([0.0, -math.pi, math.pi, math.pi / 2]))
        assert gray.tolist() == [128, 0, 0, 192]

    def test_save_writes_magnitude_and_phase(self, grid, tmp_path):
        """Test 8-bit magnitude and phase files with the peak at 255"""
        sigma = object_phantom(grid)
        magnitude, phase = save_phantom(sigma, tmp_path / "m.pgm", tmp_path / "p.pgm")
        gray, max_value = read_pgm(magnitude)
        assert max_value == 255
        assert gray.shape == (64, 64)
        assert gray.max() == 255
        phase_gray, _ = read_pgm(phase)
        assert phase_gray.shape == (64, 64)

    def test_save_magnitude_only(self, grid, tmp_path):
        """Test that the phase file is optional"""
        magnitude, phase = save_phantom(object_phantom(grid), tmp_path / "m.pgm")
        assert magnitude.is_file()
        assert phase is None
