"""
Unit Tests for Coincidence Imaging

Tests for weight schemes, the coincidence contraction, image orientation,
phase recovery, the frequency-resolved limit and image metrics.
"""

import math

import numpy as np
import pytest

from app.models.settings import ModeFamily, PhaseAxis, RegimeSign, WeightScheme
from app.services.biphoton import (
    BiphotonAmplitude,
    PumpCrystalSpec,
    Representation,
    amplitude_gaussian,
    schmidt_decompose,
    schmidt_decompose_analytic,
)
from app.services.grid import SpaceTag, make_grid, self_dual_half_extent
from app.services.imaging import (
    RealImage,
    WeightVector,
    coincidence_image,
    frequency_resolved_image,
    ideal_image,
    image_metrics,
    orient_to_sample,
    phase_correlation,
    phase_mask,
    recover_phase,
    resolve_regime_sign,
    reweight,
    subtract_background,
)
from app.services.matter import ChargeDensity, CouplingMatrix, CouplingOrder, beta_matrix
from app.services.phantoms import gaussian_blobs, object_phantom, point_phantom
from app.utils.errors import BasisMismatchError


@pytest.fixture
def grid():
    """Self-dual 32-sample grid"""
    return make_grid(32, self_dual_half_extent(32))


def analytic(grid, product, order=3):
    return schmidt_decompose_analytic(
        PumpCrystalSpec.balanced(product), ModeFamily.HERMITE_GAUSS, order, grid
    )


class TestReweight:
    """Test weight schemes"""

    def test_natural(self, grid):
        """Test w_n = sqrt(lambda_n)"""
        dec = analytic(grid, 2.0)
        weights = reweight(dec, WeightScheme.NATURAL, 5)
        assert np.allclose(weights.values, np.sqrt(dec.weights[:5]))

    def test_flattened_energy(self, grid):
        """Test equal weights with c^2 N = sum of the kept lambdas"""
        dec = analytic(grid, 2.0)
        weights = reweight(dec, WeightScheme.FLATTENED, 6)
        assert np.all(weights.values == weights.values[0])
        assert np.sum(weights.values**2) == pytest.approx(float(dec.weights[:6].sum()))

    def test_custom(self, grid):
        """Test that custom weights are used as given"""
        dec = analytic(grid, 2.0)
        weights = reweight(dec, WeightScheme.CUSTOM, 2, custom=[0.3, 0.2, 0.1])
        assert list(weights.values) == [0.3, 0.2]
        assert weights.scheme == WeightScheme.CUSTOM

    def test_custom_too_short(self, grid):
        """Test that custom weights must cover the truncation"""
        with pytest.raises(ValueError, match="at least 3"):
            reweight(analytic(grid, 2.0), WeightScheme.CUSTOM, 3, custom=[1.0])

    def test_custom_non_positive(self, grid):
        """Test that custom weights must be positive"""
        with pytest.raises(ValueError, match="positive"):
            reweight(analytic(grid, 2.0), WeightScheme.CUSTOM, 2, custom=[1.0, 0.0])

    @pytest.mark.parametrize("truncation", [0, 11])
    def test_truncation_range(self, grid, truncation):
        """Test that N must lie in [1, rank]"""
        with pytest.raises(ValueError, match="Truncation"):
            reweight(analytic(grid, 2.0), WeightScheme.NATURAL, truncation)

    def test_negative_weight_vector(self):
        """Test that WeightVector refuses negative entries"""
        with pytest.raises(ValueError, match="non-negative"):
            WeightVector(np.array([1.0, -1.0]), WeightScheme.CUSTOM)


class TestCoincidenceImage:
    """Test the coincidence contraction"""

    def test_product_state(self, grid):
        """Test that a single Schmidt pair images Re(beta_00) |v_0|^2"""
        dec = analytic(grid, 1.0)
        sigma = gaussian_blobs(grid, [(1.0, 0.0)], [1.5], [1.0 + 0.5j])
        beta = beta_matrix(sigma, dec.signal_real, 1)
        image = coincidence_image(dec, beta, reweight(dec, WeightScheme.NATURAL, 10), 10)
        expected = beta.entries[0, 0].real * np.abs(dec.idler_real.stack[0]) ** 2
        assert np.allclose(image.values, expected, atol=1e-14)

    def test_linear_in_beta(self, grid):
        """Test image(beta_a + beta_b) = image(beta_a) + image(beta_b)"""
        dec = analytic(grid, 2.0)
        weights = reweight(dec, WeightScheme.FLATTENED, 10)
        a = beta_matrix(object_phantom(grid, radius=3.0), dec.signal_real, 1)
        b = beta_matrix(gaussian_blobs(grid, [(0.5, -1.0)], [1.0]), dec.signal_real, 1)
        combined = coincidence_image(dec, a + b, weights, 10)
        separate = coincidence_image(dec, a, weights, 10) + coincidence_image(dec, b, weights, 10)
        assert np.allclose(combined.values, separate.values, atol=1e-13)

    def test_other_basis_rejected(self, grid):
        """Test that beta must share the decomposition's basis"""
        dec = analytic(grid, 2.0)
        beta = CouplingMatrix(np.eye(10), "other", CouplingOrder.FIRST)
        with pytest.raises(BasisMismatchError, match="differs"):
            coincidence_image(dec, beta, reweight(dec, WeightScheme.NATURAL, 3), 3)

    def test_foreign_natural_weights_rejected(self, grid):
        """Test that natural weights must come from the same spectrum"""
        dec = analytic(grid, 2.0)
        foreign = reweight(analytic(grid, 4.0), WeightScheme.NATURAL, 3)
        beta = CouplingMatrix(np.eye(10), dec.manifest, CouplingOrder.FIRST)
        with pytest.raises(BasisMismatchError, match="Natural weights"):
            coincidence_image(dec, beta, foreign, 3)

    def test_truncation_beyond_weights(self, grid):
        """Test that N may not exceed the weight count"""
        dec = analytic(grid, 2.0)
        beta = CouplingMatrix(np.eye(10), dec.manifest, CouplingOrder.FIRST)
        with pytest.raises(ValueError, match="weight count"):
            coincidence_image(dec, beta, reweight(dec, WeightScheme.NATURAL, 3), 4)

    @pytest.mark.parametrize(
        "product,sign", [(20.0, RegimeSign.MIRROR), (0.05, RegimeSign.DIRECT)]
    )
    def test_point_lands_by_regime(self, product, sign):
        """Test that a point images to -x (mirror) or +x (direct) and orients back"""
        grid = make_grid(64, self_dual_half_extent(64))
        dec = analytic(grid, product, order=24)
        sigma = point_phantom(grid, 2.0, 0.0)
        beta = beta_matrix(sigma, dec.signal_real, 1)
        rank = dec.truncation_rank
        image = coincidence_image(dec, beta, reweight(dec, WeightScheme.NATURAL, rank), rank)

        row, col = np.unravel_index(np.argmax(image.values), image.values.shape)
        expected_col = 26 if sign == RegimeSign.MIRROR else 38
        assert abs(row - 32) <= 1
        assert abs(col - expected_col) <= 1

        resolved = resolve_regime_sign(RegimeSign.AUTO, dec)
        assert resolved == sign
        oriented = orient_to_sample(image.values, resolved)
        row, col = np.unravel_index(np.argmax(oriented), oriented.shape)
        assert abs(row - 32) <= 1
        assert abs(col - 38) <= 1


class TestOrientation:
    """Test regime sign resolution and orientation"""

    def test_mirror_index_map(self):
        """Test that mirror maps index k to (N - k) mod N on both axes"""
        values = np.arange(64, dtype=float).reshape(8, 8)
        mirrored = orient_to_sample(values, RegimeSign.MIRROR)
        for i in range(8):
            for j in range(8):
                assert mirrored[i, j] == values[(8 - i) % 8, (8 - j) % 8]

    def test_mirror_is_involution(self):
        """Test that mirroring twice is the identity"""
        values = np.random.default_rng(1).standard_normal((8, 8))
        twice = orient_to_sample(orient_to_sample(values, RegimeSign.MIRROR), RegimeSign.MIRROR)
        assert np.array_equal(twice, values)

    def test_direct_copies(self):
        """Test that direct returns an equal copy"""
        values = np.ones((4, 4))
        oriented = orient_to_sample(values, RegimeSign.DIRECT)
        assert np.array_equal(oriented, values)
        assert oriented is not values

    def test_auto_rejected(self):
        """Test that auto must be resolved first"""
        with pytest.raises(ValueError, match="Resolve"):
            orient_to_sample(np.ones((4, 4)), RegimeSign.AUTO)

    def test_resolve_regime_sign(self, grid):
        """Test auto resolution by sigma_p L_eff"""
        assert resolve_regime_sign(RegimeSign.AUTO, analytic(grid, 2.0)) == RegimeSign.MIRROR
        assert resolve_regime_sign(RegimeSign.AUTO, analytic(grid, 0.5)) == RegimeSign.DIRECT
        assert resolve_regime_sign(RegimeSign.DIRECT, analytic(grid, 2.0)) == RegimeSign.DIRECT

    def test_auto_without_spec(self, grid):
        """Test that auto needs a source spec"""
        template = amplitude_gaussian(PumpCrystalSpec.balanced(2.0), grid)
        amp = BiphotonAmplitude(
            grid,
            Representation.SEPARABLE_1D,
            kernel_x=template.kernel_x,
            kernel_y=template.kernel_y,
        )
        dec = schmidt_decompose(amp, 4)
        with pytest.raises(ValueError, match="source spec"):
            resolve_regime_sign(RegimeSign.AUTO, dec)


class TestPhase:
    """Test phase recovery and phase correlation"""

    def test_recover_constant_phase(self, grid):
        """Test that a uniform phase 0.7 is recovered where the mode is bright"""
        dec = analytic(grid, 1.0)
        blob = gaussian_blobs(grid, [(0.0, 0.0)], [2.0])
        sigma = ChargeDensity.from_array(grid, blob.values * np.exp(0.7j))
        beta = beta_matrix(sigma, dec.signal_real, 1)
        phase = recover_phase(dec, beta, reweight(dec, WeightScheme.NATURAL, 1), 1)
        bright = np.abs(dec.idler_real.stack[0]) ** 2 > 1e-6 * np.max(
            np.abs(dec.idler_real.stack[0]) ** 2
        )
        assert np.allclose(phase[bright], 0.7, atol=1e-10)

    def test_correlation_identical(self):
        """Test correlation 1 for identical phases"""
        phase = np.random.default_rng(2).uniform(-math.pi, math.pi, (8, 8))
        assert phase_correlation(phase, phase) == pytest.approx(1.0)

    def test_correlation_ignores_wrap(self):
        """Test that a 2 pi offset does not count as an error"""
        phase = np.random.default_rng(3).uniform(-math.pi, math.pi, (8, 8))
        assert phase_correlation(phase + 2 * math.pi, phase) == pytest.approx(1.0)

    def test_correlation_needs_two_pixels(self):
        """Test that a mask selecting one pixel is rejected"""
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        with pytest.raises(ValueError, match="two masked pixels"):
            phase_correlation(np.zeros((4, 4)), np.zeros((4, 4)), mask)

    def test_phase_mask(self, grid):
        """Test the |sigma| > 0.1 mask"""
        sigma = ChargeDensity.from_array(grid, np.where(np.eye(32) > 0, 1.0, 0.05))
        assert np.array_equal(phase_mask(sigma), np.eye(32) > 0)


class TestReferenceImages:
    """Test background subtraction and limiting images"""

    def test_subtract_background(self, grid):
        """Test S = -(raw - reference)"""
        raw = RealImage(grid, np.full((32, 32), 1.0))
        reference = RealImage(grid, np.full((32, 32), 3.0))
        result = subtract_background(raw, reference)
        assert np.all(result.values == 2.0)
        assert result.background_subtracted

    def test_subtract_background_grid_mismatch(self, grid):
        """Test that images must share a grid"""
        other = make_grid(32, 9.0)
        with pytest.raises(BasisMismatchError):
            subtract_background(
                RealImage(grid, np.zeros((32, 32))), RealImage(other, np.zeros((32, 32)))
            )

    def test_ideal_image(self, grid):
        """Test that the ideal image is Re sigma"""
        sigma = object_phantom(grid, radius=3.0)
        assert np.array_equal(ideal_image(sigma).values, sigma.values.real)

    def test_frequency_resolved_zero_frequency(self, grid):
        """Test that omega_bar = 0 gives Re sigma"""
        sigma = object_phantom(grid, radius=3.0)
        image = frequency_resolved_image(sigma, 0.0)
        assert np.allclose(image.values, sigma.values.real)

    def test_frequency_resolved_cancels_radial_phase(self, grid):
        """Test that exp(-i omega_bar r) undoes a phase +omega_bar r"""
        blob = gaussian_blobs(grid, [(0.0, 0.0)], [3.0])
        r = grid.radius(SpaceTag.REAL)
        sigma = ChargeDensity.from_array(grid, blob.values * np.exp(1j * math.pi * r))
        image = frequency_resolved_image(sigma, math.pi)
        assert np.allclose(image.values, np.abs(blob.values))

    def test_frequency_resolved_x_axis(self, grid):
        """Test the phase factor along x"""
        sigma = ChargeDensity.from_array(grid, np.ones((32, 32)))
        image = frequency_resolved_image(sigma, 0.5, PhaseAxis.X)
        x = grid.axis(SpaceTag.REAL)
        assert np.allclose(image.values, np.cos(0.5 * x)[None, :])

    def test_frequency_resolved_negative(self, grid):
        """Test that a negative frequency is rejected"""
        with pytest.raises(ValueError, match="omega_bar"):
            frequency_resolved_image(object_phantom(grid), -1.0)

    def test_non_finite_image(self, grid):
        """Test that images reject non-finite values"""
        values = np.zeros((32, 32))
        values[0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            RealImage(grid, values)


class TestImageMetrics:
    """Test scale-invariant image metrics"""

    @pytest.fixture
    def reference(self, grid):
        """Smooth signed reference image"""
        return RealImage(grid, np.real(object_phantom(grid, radius=3.0).values))

    def test_identical(self, reference):
        """Test nmse 0 and pearson 1 for identical images"""
        metrics = image_metrics(reference, reference)
        assert metrics["nmse"] == pytest.approx(0.0, abs=1e-14)
        assert metrics["pearson"] == pytest.approx(1.0)

    def test_scale_invariant(self, grid, reference):
        """Test that a positive scale does not change nmse"""
        scaled = RealImage(grid, 3.0 * reference.values)
        assert image_metrics(scaled, reference)["nmse"] == pytest.approx(0.0, abs=1e-14)

    def test_anti_correlated(self, grid, reference):
        """Test nmse 1 and pearson -1 for a negated image"""
        metrics = image_metrics(RealImage(grid, -reference.values), reference)
        assert metrics["nmse"] == 1.0
        assert metrics["pearson"] == pytest.approx(-1.0)

    def test_flat_image(self, grid, reference):
        """Test pearson nan for a constant image"""
        metrics = image_metrics(RealImage(grid, np.zeros((32, 32))), reference)
        assert metrics["nmse"] == 1.0
        assert math.isnan(metrics["pearson"])

    def test_flat_reference(self, grid, reference):
        """Test that a zero-variance reference is rejected"""
        with pytest.raises(ValueError, match="zero variance"):
            image_metrics(reference, RealImage(grid, np.ones((32, 32))))
