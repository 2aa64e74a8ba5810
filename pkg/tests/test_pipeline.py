"""
Unit Tests for Pipeline Orchestration

Tests for stage execution, cache keys, upstream checks, the output lock and
the run manifest. Runs use a 32-sample grid and a 32-mode decomposition;
the acceptance runs use the desk-scale 64-sample grid with 256 modes.
"""

from unittest.mock import patch

import numba
import numpy as np
import pytest

from app.models.settings import RunConfig
from app.services.exporters import MANIFEST_NAME, read_csv, read_field
from app.services.grid import SpaceTag, make_grid, self_dual_half_extent
from app.services.imaging import RealImage, image_metrics
from app.services.phantoms import object_phantom, save_phantom
from app.services.pipeline import (
    LOCK_NAME,
    STAGE_KEY_NAME,
    OutputLock,
    SimulationPipeline,
    Stage,
    compare_fields,
    read_manifest,
    resolve_grid,
    run_pipeline,
    run_stages,
)
from app.utils.errors import ArtifactError, ResolutionError, StageError


def make_config(directory, **extra):
    grid = make_grid(32, self_dual_half_extent(32))
    magnitude, phase = save_phantom(
        object_phantom(grid, radius=2.5), directory / "object.pgm", directory / "phase.pgm"
    )
    flat = {
        "pump.sigma_p_L": 2.0,
        "grid.samples_per_axis": 32,
        "basis.rank": 32,
        "matter.magnitude": str(magnitude),
        "matter.phase": str(phase),
        "output.gallery_modes": 2,
    }
    flat.update(extra)
    return RunConfig.from_flat_dict(flat)


def object_config(directory, sigma_p_l, truncations, schemes="natural,flattened"):
    """First-order object run at N=64 with automatic extent and 256 modes"""
    grid = make_grid(64, self_dual_half_extent(64))
    magnitude, phase = save_phantom(
        object_phantom(grid), directory / "object64.pgm", directory / "phase64.pgm"
    )
    return RunConfig.from_flat_dict(
        {
            "pump.sigma_p_L": sigma_p_l,
            "grid.samples_per_axis": 64,
            "basis.rank": 256,
            "matter.magnitude": str(magnitude),
            "matter.phase": str(phase),
            "imaging.orders": "1",
            "imaging.truncations": truncations,
            "imaging.schemes": schemes,
            "output.gallery_modes": 0,
        }
    )


def first_order_metrics(config, out):
    """Image-stage metrics keyed by (scheme, truncation)"""
    run_stages(config, out, [Stage.DECOMPOSE, Stage.COUPLE, Stage.IMAGE])
    rows, _ = read_csv(out / "image" / "metrics.csv")
    return {(row["scheme"], int(row["truncation"])): row for row in rows}


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    """Phantom files shared by the module"""
    return tmp_path_factory.mktemp("inputs")


@pytest.fixture(scope="module")
def config(inputs):
    """Small run configuration"""
    return make_config(inputs)


@pytest.fixture(scope="module")
def full_run(config, tmp_path_factory):
    """Output directory of one complete run"""
    out = tmp_path_factory.mktemp("full")
    run_pipeline(config, out)
    return out


class TestResolveGrid:
    """Test automatic grid sizing"""

    def test_auto_extent(self, config):
        """Test that a balanced source at N=32 gets the self-dual extent"""
        grid = resolve_grid(config)
        assert grid.n == 32
        assert grid.half_extent == pytest.approx(self_dual_half_extent(32))

    def test_explicit_extent(self, inputs):
        """Test that a configured half extent is kept"""
        config = make_config(inputs, **{"grid.half_extent": 9.0})
        assert resolve_grid(config).half_extent == 9.0


@pytest.mark.slow
class TestFullRun:
    """Test a complete run"""

    def test_manifest_lists_artifacts(self, full_run):
        """Test that the manifest covers every file except itself and the lock"""
        listed = {row[0] for row in read_manifest(full_run / MANIFEST_NAME)}
        on_disk = {
            p.relative_to(full_run).as_posix()
            for p in full_run.rglob("*")
            if p.is_file() and p.name != MANIFEST_NAME
        }
        assert listed == on_disk
        assert "resolved_config.txt" in listed
        assert "decompose/spectrum.csv" in listed
        assert "couple/beta1.csv" in listed
        assert "farfield/gamma.csv" in listed
        assert "specresolve/freqres.bin" in listed
        assert not (full_run / LOCK_NAME).exists()

    def test_every_stage_has_key(self, full_run):
        """Test that every stage stored its cache key"""
        for stage in Stage:
            assert (full_run / stage.value / STAGE_KEY_NAME).is_file()

    def test_image_sweep(self, full_run):
        """Test one image per (order, truncation, scheme)"""
        images = sorted(p.name for p in (full_run / "image").glob("image_p*.bin"))
        assert len(images) == 2 * 4 * 2
        assert "image_p1_n20_natural.bin" in images
        assert "image_p2_n1_flattened.bin" in images
        rows, _ = read_csv(full_run / "image" / "metrics.csv")
        assert len(rows) == 16

    def test_spectrum_sums_below_one(self, full_run):
        """Test the persisted spectrum"""
        rows, _ = read_csv(full_run / "decompose" / "spectrum.csv")
        weights = np.array([float(r["lambda"]) for r in rows])
        assert len(rows) == 32
        assert np.all(np.diff(weights) <= 0)
        assert 0.99 < weights.sum() <= 1.0 + 1e-12

    def test_density_metrics(self, full_run):
        """Test unit trace of the initial idler state and a Hermitian first-order change"""
        rows, _ = read_csv(full_run / "couple" / "density_metrics.csv")
        metrics = {r["key"]: float(r["value"]) for r in rows}
        assert metrics["rho0_trace"] == pytest.approx(1.0, abs=1e-8)
        assert metrics["drho1_hermitian"] == 1.0

    def test_compare_fields(self, full_run):
        """Test metrics of an image against itself"""
        ideal = full_run / "couple" / "ideal.bin"
        metrics = compare_fields(ideal, ideal)
        assert metrics["nmse"] == 0.0
        assert metrics["pearson"] == pytest.approx(1.0)

    def test_reproducible(self, config, full_run, tmp_path):
        """Test that a second run writes identical bytes"""
        run_pipeline(config, tmp_path)
        assert read_manifest(tmp_path / MANIFEST_NAME) == read_manifest(full_run / MANIFEST_NAME)

    def test_stage_by_stage(self, config, full_run, tmp_path):
        """Test that running stages one at a time matches a full run"""
        for stage in Stage:
            run_stages(config, tmp_path, [stage])
        assert read_manifest(tmp_path / MANIFEST_NAME) == read_manifest(full_run / MANIFEST_NAME)

    def test_noise_floor(self, config, full_run):
        """Test the seeded noise-floor table of the ideal images"""
        rows, _ = read_csv(full_run / "image" / "noise_floor.csv")
        assert [int(r["order"]) for r in rows] == [1, 2]
        for row in rows:
            assert int(row["seed"]) == config.output.seed
            assert float(row["nmse"]) == pytest.approx(0.01 / 1.01, rel=0.2)

    def test_noise_floor_disabled(self, inputs, tmp_path):
        """Test that a zero noise power writes no noise-floor table"""
        config = make_config(inputs, **{"imaging.noise_power": 0.0, "imaging.orders": "2"})
        run_stages(config, tmp_path, [Stage.DECOMPOSE, Stage.COUPLE, Stage.IMAGE])
        assert (tmp_path / "image" / "metrics.csv").is_file()
        assert not (tmp_path / "image" / "noise_floor.csv").exists()

    def test_product_state_image(self, inputs, tmp_path):
        """Test that an unentangled source images |v_0|^2 at every truncation"""
        config = make_config(
            inputs, **{"pump.sigma_p_L": 1.0, "imaging.orders": "2", "imaging.schemes": "natural"}
        )
        run_stages(config, tmp_path, [Stage.DECOMPOSE, Stage.COUPLE, Stage.IMAGE])
        grid = resolve_grid(config)
        x, y = grid.coordinates(SpaceTag.REAL)
        marginal = RealImage(grid, np.exp(-(x**2 + y**2)))
        for truncation in (1, 20):
            values, _ = read_field(tmp_path / "image" / f"image_p2_n{truncation}_natural.bin")
            metrics = image_metrics(RealImage(grid, np.real(values)), marginal)
            assert metrics["nmse"] < 1e-8

    def test_thread_count_invariant(self, config, full_run, tmp_path):
        """Test that another numeric thread count writes identical bytes"""
        previous = numba.get_num_threads()
        threads = 1 if previous > 1 else min(2, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(threads)
        try:
            run_pipeline(config, tmp_path)
        finally:
            numba.set_num_threads(previous)
        assert read_manifest(tmp_path / MANIFEST_NAME) == read_manifest(full_run / MANIFEST_NAME)


class TestCaching:
    """Test stage cache keys and upstream checks"""

    def test_cache_hit(self, config, tmp_path):
        """Test that a current stage is skipped"""
        first = run_stages(config, tmp_path, [Stage.DECOMPOSE])
        second = run_stages(config, tmp_path, [Stage.DECOMPOSE])
        assert not first[0].skipped
        assert first[0].files
        assert second[0].skipped
        assert second[0].key == first[0].key

    def test_stop_after(self, config, tmp_path):
        """Test that stop_after ends the run"""
        run_pipeline(config, tmp_path, stop_after=Stage.COUPLE)
        assert (tmp_path / "couple" / STAGE_KEY_NAME).is_file()
        assert not (tmp_path / "image").exists()

    def test_key_depends_on_sections(self, inputs, config, tmp_path):
        """Test that only relevant sections change a stage key"""
        base = SimulationPipeline(config, tmp_path)
        gates = SimulationPipeline(make_config(inputs, **{"gates.pump_width": 0.3}), tmp_path)
        for stage in (Stage.DECOMPOSE, Stage.COUPLE, Stage.IMAGE, Stage.SPECRESOLVE):
            assert gates.stage_key(stage) == base.stage_key(stage)
        assert gates.stage_key(Stage.FARFIELD) != base.stage_key(Stage.FARFIELD)

    def test_upstream_key_chains(self, inputs, config, tmp_path):
        """Test that a decompose change invalidates every downstream key"""
        base = SimulationPipeline(config, tmp_path)
        other = SimulationPipeline(make_config(inputs, **{"basis.rank": 16}), tmp_path)
        for stage in Stage:
            assert other.stage_key(stage) != base.stage_key(stage)

    def test_missing_upstream(self, config, tmp_path):
        """Test that a stage without upstream artifacts exits with code 4"""
        with pytest.raises(StageError) as exc_info:
            run_stages(config, tmp_path, [Stage.COUPLE])
        assert exc_info.value.stage == "couple"
        assert exc_info.value.exit_code == 4
        assert "qdiff decompose" in str(exc_info.value)

    def test_stale_upstream(self, inputs, config, tmp_path):
        """Test that artifacts of another configuration are not reused"""
        run_stages(config, tmp_path, [Stage.DECOMPOSE])
        other = make_config(inputs, **{"basis.rank": 16})
        with pytest.raises(StageError) as exc_info:
            run_stages(other, tmp_path, [Stage.COUPLE])
        assert "different configuration" in str(exc_info.value)
        assert exc_info.value.exit_code == 4

    def test_numeric_failure(self, config, tmp_path):
        """Test that a numeric error inside a stage exits with code 3"""
        with patch.object(
            SimulationPipeline, "decompose", side_effect=ResolutionError("too coarse")
        ):
            with pytest.raises(StageError) as exc_info:
                run_stages(config, tmp_path, [Stage.DECOMPOSE])
        assert exc_info.value.exit_code == 3
        assert not (tmp_path / "decompose" / STAGE_KEY_NAME).exists()

    def test_truncation_beyond_rank(self, inputs, tmp_path):
        """Test that truncations above the decomposition rank fail the image stage"""
        config = make_config(inputs, **{"basis.rank": 8, "imaging.truncations": "1,10"})
        run_stages(config, tmp_path, [Stage.DECOMPOSE, Stage.COUPLE])
        with pytest.raises(StageError, match="keeps 8 modes"):
            run_stages(config, tmp_path, [Stage.IMAGE])

    def test_seed_keys_image_stage_only(self, inputs, config, tmp_path):
        """Test that output.seed changes the image key and leaves the physics keys alone"""
        base = SimulationPipeline(config, tmp_path)
        seeded = SimulationPipeline(make_config(inputs, **{"output.seed": 7}), tmp_path)
        assert seeded.stage_key(Stage.DECOMPOSE) == base.stage_key(Stage.DECOMPOSE)
        assert seeded.stage_key(Stage.COUPLE) == base.stage_key(Stage.COUPLE)
        assert seeded.stage_key(Stage.IMAGE) != base.stage_key(Stage.IMAGE)


@pytest.mark.slow
class TestObjectAcceptance:
    """Test first-order imaging of the object phantom at desk scale"""

    def test_flattened_weights_converge(self, inputs, tmp_path):
        """Test that flattened NMSE never grows with N and beats natural weights at N=20"""
        metrics = first_order_metrics(object_config(inputs, 0.07, "1,5,10,20"), tmp_path)
        flattened = [float(metrics[("flattened", n)]["nmse"]) for n in (1, 5, 10, 20)]
        assert all(b <= a for a, b in zip(flattened, flattened[1:]))
        assert flattened[-1] < float(metrics[("natural", 20)]["nmse"])
        assert metrics[("flattened", 20)]["non_increasing"] == "True"

    def test_phase_recovery_tracks_entanglement(self, inputs, tmp_path_factory):
        """Test full-rank phase correlation above 0.9 when strongly entangled, falling toward 1"""
        correlations = []
        for product in (0.05, 0.07, 0.3, 1.0):
            out = tmp_path_factory.mktemp(f"phase_{product}")
            metrics = first_order_metrics(object_config(inputs, product, "256", "natural"), out)
            correlations.append(float(metrics[("natural", 256)]["phase_correlation"]))
        assert correlations[0] > 0.9
        assert all(b < a for a, b in zip(correlations, correlations[1:]))


class TestOutputLock:
    """Test the single-writer lock"""

    def test_acquire_release(self, tmp_path):
        """Test that a second writer cannot acquire a held lock"""
        first = OutputLock(tmp_path)
        second = OutputLock(tmp_path)
        assert first.acquire() is True
        assert second.acquire() is False
        first.release()
        assert second.acquire() is True
        second.release()
        assert not (tmp_path / LOCK_NAME).exists()

    def test_context_manager_conflict(self, tmp_path):
        """Test that a locked directory raises an artifact error"""
        with OutputLock(tmp_path):
            with pytest.raises(ArtifactError, match="is locked by process"):
                with OutputLock(tmp_path):
                    pass

    def test_locked_run(self, config, tmp_path):
        """Test that a run refuses a locked output directory"""
        (tmp_path / LOCK_NAME).write_text("12345\n")
        with pytest.raises(ArtifactError, match="12345"):
            run_pipeline(config, tmp_path)
