"""
Unit Tests for Reduction Kernels

Tests the compiled reductions against plain numpy expressions.
"""

import numpy as np
import pytest

from app.utils.kernels import (
    circular_correlate,
    hermitian_gram,
    ordered_vdot,
    sesquilinear_map,
    weighted_gram,
)


@pytest.fixture
def rng():
    """Seeded generator"""
    return np.random.default_rng(7)


def complex_normal(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


class TestKernels:
    """Test each kernel against numpy"""

    def test_ordered_vdot(self, rng):
        """Test the conjugated inner product"""
        a, b = complex_normal(rng, 50), complex_normal(rng, 50)
        assert ordered_vdot(a, b) == pytest.approx(np.vdot(a, b), rel=1e-12)

    def test_weighted_gram(self, rng):
        """Test a diag(w) b^H"""
        a, b = complex_normal(rng, (3, 20)), complex_normal(rng, (4, 20))
        weight = complex_normal(rng, 20)
        expected = (a * weight) @ b.conj().T
        assert np.allclose(weighted_gram(a, weight, b), expected, atol=1e-12)

    def test_hermitian_gram(self, rng):
        """Test that the Gram matrix is exactly Hermitian with a real diagonal"""
        a = complex_normal(rng, (5, 30))
        weight = rng.random(30).astype(np.complex128)
        gram = hermitian_gram(a, weight)
        assert np.array_equal(gram, gram.conj().T)
        assert np.all(np.diag(gram).imag == 0)
        assert np.allclose(gram, (a * weight) @ a.conj().T, atol=1e-12)

    def test_circular_correlate(self, rng):
        """Test the centered circular correlation with conjugated modes"""
        n = 4
        modes = complex_normal(rng, (2, n, n))
        kernel = complex_normal(rng, (n, n))
        expected = np.zeros_like(modes)
        for m in range(2):
            for sy in range(n):
                for sx in range(n):
                    shifted = np.roll(kernel, (sy - n // 2, sx - n // 2), axis=(0, 1))
                    expected[m, sy, sx] = np.sum(shifted * np.conj(modes[m]))
        assert np.allclose(circular_correlate(modes, kernel), expected, atol=1e-12)

    def test_sesquilinear_map(self, rng):
        """Test c_j = a_j^H beta a_j per pixel"""
        a_t = complex_normal(rng, (10, 3))
        beta = complex_normal(rng, (3, 3))
        expected = np.einsum("jn,nm,jm->j", a_t.conj(), beta, a_t)
        assert np.allclose(sesquilinear_map(a_t, beta), expected, atol=1e-12)

    def test_deterministic(self, rng):
        """Test that repeated calls are bit-identical"""
        a = complex_normal(rng, (6, 40))
        weight = rng.random(40).astype(np.complex128)
        assert np.array_equal(weighted_gram(a, weight, a), weighted_gram(a, weight, a))
