"""
Pipeline Orchestration

Runs the simulation as cached stages that exchange serialized artifacts:

- decompose:   Schmidt spectrum, modes, mode gallery
- couple:      charge density, beta^(1), beta^(2), idler density matrices
- image:       coincidence-image sweep over (p, N, scheme) with metrics and
               a seeded noise-floor table
- farfield:    spectral gates, gamma and the far-field image
- specresolve: frequency-resolved single-frequency image

Every stage reads its inputs from the upstream stage's directory, so running
stages one by one gives the same bytes as a full run. A stage is skipped when
its cache key (hash of the config sections it depends on plus the upstream
key) matches the key stored with its artifacts.
"""

import hashlib
import json
import logging
import math
import os
import shutil
import time
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.config import write_resolved_config
from app.models.settings import (
    BasisSource,
    BetaSpace,
    ModeFamily,
    RunConfig,
    WaistPolicy,
    WeightScheme,
)
from app.services.biphoton import (
    PumpCrystalSpec,
    SchmidtDecomposition,
    build_amplitude,
    fundamental_waist,
    fundamental_waist_from,
    schmidt_decompose,
    schmidt_decompose_analytic,
)
from app.services.exporters import (
    MANIFEST_NAME,
    StageWriter,
    read_csv,
    read_field,
    read_matrix,
    read_spectrum,
    sha256_file,
    write_manifest,
)
from app.services.far_field import (
    GateSpec,
    QuadratureSpec,
    far_field_image,
    gamma_matrix,
    omega_nodes,
    spectral_gate_closed_form,
    spectral_gate_functional,
)
from app.services.grid import SpaceTag, TransverseGrid, auto_half_extent, make_grid
from app.services.imaging import (
    RealImage,
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
)
from app.services.matter import (
    ChargeDensity,
    CouplingMatrix,
    CouplingOrder,
    beta_matrix,
    beta_matrix_momentum,
    idler_density_first_order,
    idler_density_initial,
    load_charge_density,
    project_density,
    traced_heatmap,
)
from app.services.modes import ModeSet, build_mode_set
from app.services.phantoms import white_noise
from app.utils.errors import ArtifactError, MissingArtifactError, StageError
from app.utils.logging_config import stage_context

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"
STAGE_KEY_NAME = ".stage_key"
MODES_DIR = "modes"
GALLERY_DIR = "gallery"


class Stage(str, Enum):
    """Pipeline stages in execution order"""

    DECOMPOSE = "decompose"
    COUPLE = "couple"
    IMAGE = "image"
    FARFIELD = "farfield"
    SPECRESOLVE = "specresolve"


UPSTREAM: Dict[Stage, Optional[Stage]] = {
    Stage.DECOMPOSE: None,
    Stage.COUPLE: Stage.DECOMPOSE,
    Stage.IMAGE: Stage.COUPLE,
    Stage.FARFIELD: Stage.COUPLE,
    Stage.SPECRESOLVE: Stage.COUPLE,
}


class OutputLock:
    """
    Single-writer lock on an output directory.

    The lock is a `.lock` file created exclusively and holding the owner's
    pid; a second writer fails to acquire it instead of waiting.
    """

    def __init__(self, directory: Path):
        self.path = directory / LOCK_NAME
        self._held = False

    def acquire(self) -> bool:
        """
        Try to acquire the lock.

        Returns:
            True if lock acquired, False if another writer holds it
        """
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            return False
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        self._held = True
        return True

    def release(self):
        """Release the lock if held."""
        if self._held:
            try:
                self.path.unlink()
            except FileNotFoundError:
                # Removed externally, ignore
                pass
            self._held = False

    def __enter__(self) -> "OutputLock":
        if not self.acquire():
            owner = self.path.read_text().strip() if self.path.exists() else "unknown"
            raise ArtifactError(
                f"Output directory {self.path.parent} is locked by process {owner}; "
                f"remove {self.path} if no run is active"
            )
        return self

    def __exit__(self, exc_type, exc, tb):
        self.release()


class StageResult:
    """Result of one stage execution"""

    def __init__(
        self,
        stage: Stage,
        key: str,
        skipped: bool = False,
        files: Optional[List[Path]] = None,
        seconds: float = 0.0,
    ):
        self.stage = stage
        self.key = key
        self.skipped = skipped
        self.files = files or []
        self.seconds = seconds


def resolve_grid(config: RunConfig) -> TransverseGrid:
    """
    Sampling grid of a run: configured half extent, or the automatic one
    covering five times the largest waist in play.
    """
    n = config.grid.samples_per_axis
    if config.grid.half_extent is not None:
        return make_grid(n, config.grid.half_extent)
    waists = [fundamental_waist(PumpCrystalSpec.from_settings(config.pump))]
    if config.basis.waist_policy == WaistPolicy.FIXED and config.basis.waist is not None:
        waists.append(config.basis.waist)
    return make_grid(n, auto_half_extent(n, waists))


def build_decomposition(config: RunConfig, grid: TransverseGrid) -> SchmidtDecomposition:
    """Schmidt decomposition requested by the basis section."""
    spec = PumpCrystalSpec.from_settings(config.pump)
    if config.basis.source == BasisSource.ANALYTIC:
        return schmidt_decompose_analytic(
            spec, config.basis.family, config.basis.max_total_order, grid, config.tolerance
        )
    amplitude = build_amplitude(spec, grid, config.tolerance)
    return schmidt_decompose(amplitude, min(config.basis.rank, grid.n**2))


def compare_fields(reference_path: Path, image_path: Path) -> Dict[str, float]:
    """
    nmse and pearson of two serialized fields (real parts are compared).

    Raises:
        MissingArtifactError: If a file is missing
        ValueError: If the sizes differ or the reference is flat
    """
    ref, _ = read_field(reference_path)
    img, _ = read_field(image_path)
    if ref.shape != img.shape:
        raise ValueError(f"Field sizes differ: {ref.shape} vs {img.shape}")
    # Metrics are scale-free, so any grid of the right size will do
    grid = make_grid(ref.shape[0], 1.0)
    return image_metrics(RealImage(grid, np.real(img)), RealImage(grid, np.real(ref)))


def _safe_metrics(img: RealImage, reference: RealImage, label: str) -> Dict[str, float]:
    try:
        return image_metrics(img, reference)
    except ValueError as e:
        logger.warning(f"Metrics for {label} skipped: {e}")
        return {"nmse": math.nan, "pearson": math.nan}


def _non_increasing(values: List[float]) -> bool:
    return all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


def _heatmap_image(matrix: np.ndarray) -> np.ndarray:
    """|matrix| with row 0 at the top of the preview."""
    return np.flipud(np.abs(matrix))


class SimulationPipeline:
    """
    Executes the stages of one run configuration into one output directory.

    Handles:
    - Stage cache keys and upstream freshness checks
    - Stage directory cleanup and artifact writing
    - Manifest maintenance after every stage
    """

    def __init__(self, config: RunConfig, out_dir: Path):
        """
        Initialize pipeline.

        Args:
            config: Validated run configuration
            out_dir: Output directory (single writer)
        """
        self.config = config
        self.out_dir = Path(out_dir)
        self.spec = PumpCrystalSpec.from_settings(config.pump)
        self.grid = resolve_grid(config)
        self._keys: Dict[Stage, str] = {}

    # ---- cache keys ----

    def _stage_config(self, stage: Stage) -> Dict[str, Any]:
        cfg = self.config
        if stage == Stage.DECOMPOSE:
            digest = cfg.section_digest("pump", "grid", "basis", "tolerance")
            digest["output"] = {
                "gallery_modes": cfg.output.gallery_modes,
                "export_modes": cfg.output.export_modes,
            }
            return digest
        if stage == Stage.COUPLE:
            return {
                "magnitude_sha256": sha256_file(Path(cfg.matter.magnitude)),
                "phase_sha256": sha256_file(Path(cfg.matter.phase)) if cfg.matter.phase else None,
                "beta_space": cfg.matter.beta_space.value,
            }
        if stage == Stage.IMAGE:
            digest = cfg.section_digest("imaging")
            digest["seed"] = cfg.output.seed
            return digest
        if stage == Stage.FARFIELD:
            digest = cfg.section_digest("gates", "quadrature")
            digest["truncation_far_field"] = cfg.imaging.truncation_far_field
            return digest
        return {
            "omega_bar": cfg.imaging.omega_bar,
            "phase_axis": cfg.imaging.phase_axis.value,
        }

    def stage_key(self, stage: Stage) -> str:
        """Hash of the stage's config sections chained with its upstream key."""
        if stage not in self._keys:
            upstream = UPSTREAM[stage]
            payload = {
                "stage": stage.value,
                "config": self._stage_config(stage),
                "upstream": self.stage_key(upstream) if upstream else None,
            }
            text = json.dumps(payload, sort_keys=True)
            self._keys[stage] = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return self._keys[stage]

    def stage_dir(self, stage: Stage) -> Path:
        return self.out_dir / stage.value

    def _stored_key(self, stage: Stage) -> Optional[str]:
        path = self.stage_dir(stage) / STAGE_KEY_NAME
        return path.read_text().strip() if path.is_file() else None

    def _require_upstream(self, stage: Stage):
        upstream = UPSTREAM[stage]
        if upstream is None:
            return
        stored = self._stored_key(upstream)
        if stored is None:
            raise MissingArtifactError(
                f"Stage '{stage.value}' needs the '{upstream.value}' artifacts in "
                f"{self.stage_dir(upstream)}; run `qdiff {upstream.value}` with this "
                f"configuration first"
            )
        if stored != self.stage_key(upstream):
            raise MissingArtifactError(
                f"The '{upstream.value}' artifacts in {self.stage_dir(upstream)} were made "
                f"with a different configuration; rerun `qdiff {upstream.value}`"
            )

    # ---- artifact loading ----

    def load_decomposition(self) -> SchmidtDecomposition:
        """
        Decomposition of this run: read back from the decompose artifacts, or
        rebuilt from the configuration for analytic bases and runs that do
        not export modes.

        Raises:
            MalformedArtifactError: If mode files disagree with the grid or spectrum
        """
        directory = self.stage_dir(Stage.DECOMPOSE)
        rows, comments = read_csv(directory / "modes.csv")
        manifest = comments[0].removeprefix("basis:").strip() if comments else ""

        if self.config.basis.source == BasisSource.ANALYTIC or not self.config.output.export_modes:
            dec = build_decomposition(self.config, self.grid)
            if dec.manifest != manifest:
                raise MissingArtifactError(
                    f"Rebuilt basis '{dec.manifest}' differs from the recorded basis "
                    f"'{manifest}'; rerun `qdiff decompose`"
                )
            return dec

        weights, labels = read_spectrum(directory / "spectrum.csv")
        stacks: Dict[str, List[np.ndarray]] = {
            "signal_real": [],
            "idler_real": [],
            "signal_momentum": [],
        }
        for row in rows:
            for column, stack in stacks.items():
                values, _ = read_field(directory / row[column])
                if values.shape != (self.grid.n, self.grid.n):
                    raise ArtifactError(
                        f"{row[column]} holds N={values.shape[0]}, configuration has "
                        f"N={self.grid.n}"
                    )
                stack.append(values)

        def mode_set(name: str, space: SpaceTag) -> ModeSet:
            return ModeSet(
                grid=self.grid,
                stack=np.stack(stacks[name]),
                space_tag=space,
                manifest=manifest,
                labels=tuple(labels),
            )

        signal_real = mode_set("signal_real", SpaceTag.REAL)
        idler_real = mode_set("idler_real", SpaceTag.REAL)
        metrics_rows, _ = read_csv(directory / "metrics.csv")
        summary = {row["key"]: float(row["value"]) for row in metrics_rows}
        return SchmidtDecomposition(
            weights,
            mode_set("signal_momentum", SpaceTag.MOMENTUM),
            idler_real.in_space(SpaceTag.MOMENTUM),
            signal_real,
            idler_real,
            discarded_mass=summary.get("discarded_mass", 0.0),
            spec=self.spec,
            tolerances=self.config.tolerance,
        )

    def load_sigma(self) -> ChargeDensity:
        values, tag = read_field(self.stage_dir(Stage.COUPLE) / "sigma.qdcf")
        if tag != SpaceTag.REAL or values.shape != (self.grid.n, self.grid.n):
            raise ArtifactError("sigma.qdcf does not hold a real-space field on this grid")
        return ChargeDensity.from_array(self.grid, values, normalize=False)

    def load_coupling(self, name: str, order: CouplingOrder) -> CouplingMatrix:
        entries, basis = read_matrix(self.stage_dir(Stage.COUPLE) / name)
        return CouplingMatrix(entries, basis, order)

    def _basis_waist(self, dec: SchmidtDecomposition) -> float:
        if self.config.basis.waist_policy == WaistPolicy.FIXED and self.config.basis.waist:
            return self.config.basis.waist
        return fundamental_waist_from(dec)

    # ---- stages ----

    def decompose(self, writer: StageWriter):
        """Schmidt spectrum, metrics, persisted modes and the mode gallery."""
        dec = build_decomposition(self.config, self.grid)
        writer.spectrum("spectrum.csv", dec.weights, dec.labels)

        summary = dec.summary()
        summary["half_extent"] = self.grid.half_extent
        writer.table("metrics.csv", ("key", "value"), sorted(summary.items()))

        # Analytic bases are rebuilt on load, so only sampled modes are persisted
        persist = (
            self.config.output.export_modes and self.config.basis.source == BasisSource.SCHMIDT
        )
        rows = []
        for n in range(dec.truncation_rank):
            names = []
            for prefix, modes in (
                ("signal_real", dec.signal_real),
                ("idler_real", dec.idler_real),
                ("signal_momentum", dec.signal_modes),
            ):
                name = f"{MODES_DIR}/{prefix}_{n:04d}.qdcf" if persist else ""
                if persist:
                    writer.field(name, modes.stack[n], modes.space_tag)
                names.append(name)
            rows.append((n, ":".join(str(i) for i in dec.labels[n]), *names))
        writer.table(
            "modes.csv",
            ("index", "label", "signal_real", "idler_real", "signal_momentum"),
            rows,
            comment=f"basis: {dec.manifest}",
        )

        for n in range(min(self.config.output.gallery_modes, dec.truncation_rank)):
            intensity = np.abs(dec.signal_real.stack[n]) ** 2
            writer.image(f"{GALLERY_DIR}/mode_{n:02d}", intensity, with_field=False)
        logger.info(
            f"Decomposition: rank {dec.truncation_rank}, "
            f"kappa {summary['kappa_svd']:.4g}, lambda_0 {dec.weights[0]:.4g}"
        )

    def couple(self, writer: StageWriter):
        """Charge density, coupling matrices and idler density matrices."""
        dec = self.load_decomposition()
        matter = self.config.matter
        sigma = load_charge_density(matter.magnitude, matter.phase, self.grid)

        writer.field("sigma.qdcf", sigma.values, SpaceTag.REAL)
        writer.image("sigma_magnitude", np.abs(sigma.values), with_field=False)
        writer.image(
            "sigma_phase", np.angle(sigma.values), (-math.pi, math.pi), with_field=False
        )
        writer.image("ideal", ideal_image(sigma).values)
        writer.image("ideal_p2", np.abs(sigma.values) ** 2)

        if matter.beta_space == BetaSpace.MOMENTUM:
            beta1 = beta_matrix_momentum(sigma, dec.signal_real)
        else:
            beta1 = beta_matrix(sigma, dec.signal_real, 1)
        beta2 = beta_matrix(sigma, dec.signal_real, 2)
        writer.matrix("beta1.csv", beta1.entries, beta1.basis_manifest)
        writer.matrix("beta2.csv", beta2.entries, beta2.basis_manifest)
        writer.image("beta1_abs", _heatmap_image(beta1.entries), with_field=False)

        rho0 = idler_density_initial(dec)
        drho1 = idler_density_first_order(dec, beta1)
        writer.matrix("rho0.csv", rho0.entries, rho0.basis_manifest)
        writer.matrix("drho1.csv", drho1.entries, drho1.basis_manifest)

        basis = build_mode_set(
            ModeFamily.HERMITE_GAUSS,
            self.config.basis.max_total_order,
            self._basis_waist(dec),
            self.grid,
            SpaceTag.REAL,
            self.config.tolerance,
        )
        for name, density in (("rho0", rho0), ("drho1", drho1)):
            traced = traced_heatmap(project_density(density, dec.idler_real, basis), basis.labels)
            writer.matrix(f"{name}_traced.csv", traced, basis.manifest)
            writer.image(f"{name}_traced", _heatmap_image(traced), with_field=False)

        diag = np.abs(np.diag(drho1.entries))
        off = np.abs(drho1.entries - np.diag(np.diag(drho1.entries)))
        metrics = {
            "rho0_trace": float(rho0.trace().real),
            "rho0_purity": rho0.purity(),
            "drho1_trace_re": float(drho1.trace().real),
            "drho1_trace_im": float(drho1.trace().imag),
            "drho1_hermitian": float(drho1.is_hermitian()),
            "drho1_max_diagonal": float(diag.max()),
            "drho1_max_off_diagonal": float(off.max()),
            "beta1_hermitian": float(beta1.is_hermitian()),
            "beta2_hermitian": float(beta2.is_hermitian()),
        }
        writer.table("density_metrics.csv", ("key", "value"), sorted(metrics.items()))

    def image(self, writer: StageWriter):
        """Coincidence images for every (p, N, scheme) with fidelity metrics."""
        imaging = self.config.imaging
        dec = self.load_decomposition()
        largest = max(imaging.truncations)
        if largest > dec.truncation_rank:
            raise ValueError(
                f"imaging.truncations asks for N={largest} but the decomposition keeps "
                f"{dec.truncation_rank} modes"
            )
        sigma = self.load_sigma()
        sign = resolve_regime_sign(imaging.regime_sign, dec)
        references = {
            1: ideal_image(sigma),
            2: RealImage(self.grid, np.abs(sigma.values) ** 2),
        }
        mask = phase_mask(sigma)
        reference_phase = np.angle(sigma.values)

        couplings = {
            1: ("beta1.csv", CouplingOrder.FIRST),
            2: ("beta2.csv", CouplingOrder.SECOND),
        }
        rows = []
        for order in sorted(imaging.orders):
            beta = self.load_coupling(*couplings[order])
            for scheme in imaging.schemes:
                group = []
                for truncation in sorted(imaging.truncations):
                    weights = reweight(dec, scheme, truncation, imaging.custom_weights)
                    raw = coincidence_image(dec, beta, weights, truncation)
                    stem = f"image_p{order}_n{truncation}_{scheme.value}"
                    writer.image(stem, raw.values)
                    oriented = RealImage(self.grid, orient_to_sample(raw.values, sign))
                    metrics = _safe_metrics(oriented, references[order], stem)

                    correlation = math.nan
                    if order == 1:
                        phase = recover_phase(dec, beta, weights, truncation)
                        writer.image(
                            f"phase_n{truncation}_{scheme.value}",
                            phase,
                            (-math.pi, math.pi),
                            with_field=False,
                        )
                        if np.count_nonzero(mask) >= 2:
                            correlation = phase_correlation(
                                orient_to_sample(phase, sign), reference_phase, mask
                            )
                    group.append(
                        [
                            order,
                            truncation,
                            scheme.value,
                            metrics["nmse"],
                            metrics["pearson"],
                            correlation,
                        ]
                    )
                flag = _non_increasing([row[3] for row in group])
                rows.extend(row + [flag] for row in group)

        header = (
            "order",
            "truncation",
            "scheme",
            "nmse",
            "pearson",
            "phase_correlation",
            "non_increasing",
        )
        writer.table("metrics.csv", header, rows)
        if imaging.noise_power > 0:
            writer.table(
                "noise_floor.csv",
                ("order", "noise_power", "seed", "nmse", "pearson"),
                self._noise_floor(references),
            )
        logger.info(f"Imaging: {len(rows)} images, detector orientation {sign.value}")

    def _noise_floor(self, references: Dict[int, RealImage]) -> List[List[Any]]:
        """Metrics of each ideal image against itself plus seeded white noise."""
        power = self.config.imaging.noise_power
        seed = self.config.output.seed
        rows = []
        for order in sorted(self.config.imaging.orders):
            reference = references[order]
            noisy = RealImage(
                self.grid, reference.values + white_noise(reference.values, power, seed)
            )
            metrics = _safe_metrics(noisy, reference, f"noise floor p{order}")
            rows.append([order, power, seed, metrics["nmse"], metrics["pearson"]])
        logger.debug(f"Noise floor: relative power {power}, seed {seed}")
        return rows

    def farfield(self, writer: StageWriter):
        """Spectral gate, gamma matrix and far-field image."""
        dec = self.load_decomposition()
        truncation = self.config.imaging.truncation_far_field
        if truncation > dec.truncation_rank:
            raise ValueError(
                f"imaging.truncation_far_field = {truncation} exceeds the decomposition rank "
                f"{dec.truncation_rank}"
            )
        gates = GateSpec.from_settings(self.config.gates)
        quadrature = QuadratureSpec.from_settings(self.config.quadrature)
        tolerances = self.config.tolerance

        nodes, weights = omega_nodes(gates, quadrature, tolerances)
        functional = spectral_gate_functional(gates, nodes, tolerances)
        closed = spectral_gate_closed_form(gates, nodes)
        writer.table(
            "spectral_gate.csv",
            ("omega", "gate_functional", "gate_closed_form", "weight"),
            zip(nodes, functional, closed, weights),
        )

        beta1 = self.load_coupling("beta1.csv", CouplingOrder.FIRST)
        gamma = gamma_matrix(dec, beta1, gates, quadrature, tolerances)
        writer.matrix("gamma.csv", gamma.entries, gamma.basis_manifest)

        far = far_field_image(dec, gamma, truncation)
        writer.image(f"image_farfield_n{truncation}", far.values)

        natural = reweight(dec, WeightScheme.NATURAL, truncation)
        near = coincidence_image(dec, beta1, natural, truncation)
        sign = resolve_regime_sign(self.config.imaging.regime_sign, dec)
        oriented = RealImage(self.grid, orient_to_sample(far.values, sign))
        sigma = self.load_sigma()
        rows = []
        for name, image, reference in (
            ("near_field", far, near),
            ("ideal", oriented, ideal_image(sigma)),
        ):
            metrics = _safe_metrics(image, reference, f"far field vs {name}")
            rows.append((name, truncation, metrics["nmse"], metrics["pearson"]))
        writer.table("metrics.csv", ("reference", "truncation", "nmse", "pearson"), rows)

    def specresolve(self, writer: StageWriter):
        """Frequency-resolved image Re[sigma exp(-i omega_bar r)]."""
        imaging = self.config.imaging
        sigma = self.load_sigma()
        image = frequency_resolved_image(sigma, imaging.omega_bar, imaging.phase_axis)
        writer.image("freqres", image.values)
        metrics = _safe_metrics(image, ideal_image(sigma), "frequency-resolved image")
        writer.table(
            "metrics.csv",
            ("omega_bar", "phase_axis", "nmse", "pearson"),
            [(imaging.omega_bar, imaging.phase_axis.value, metrics["nmse"], metrics["pearson"])],
        )

    # ---- orchestration ----

    def run_stage(self, stage: Stage) -> StageResult:
        """
        Run one stage unless its artifacts are current.

        Args:
            stage: Stage to run

        Returns:
            StageResult with the written files (empty when skipped)

        Raises:
            StageError: Wrapping any error raised inside the stage
        """
        stage = Stage(stage)
        with stage_context(stage=stage.value, samples_per_axis=self.grid.n):
            return self._run_stage(stage)

    def _run_stage(self, stage: Stage) -> StageResult:
        try:
            self._require_upstream(stage)
            key = self.stage_key(stage)
            if self._stored_key(stage) == key:
                logger.info(f"Stage {stage.value}: cache hit, artifacts are current")
                return StageResult(stage, key, skipped=True)

            directory = self.stage_dir(stage)
            if directory.exists():
                shutil.rmtree(directory)
            writer = StageWriter(directory)
            logger.info(f"Stage {stage.value}: started")
            start = time.perf_counter()
            getattr(self, stage.value)(writer)
            # Written last: an interrupted stage never looks current
            writer.text(STAGE_KEY_NAME, key + "\n")
            elapsed = time.perf_counter() - start
            logger.info(
                f"Stage {stage.value}: wrote {len(writer.written)} files in {elapsed:.2f}s"
            )
            return StageResult(stage, key, files=writer.written, seconds=elapsed)
        except StageError:
            raise
        except Exception as e:
            raise StageError(stage.value, e) from e
        finally:
            if self.out_dir.exists():
                write_manifest(self.out_dir, exclude=(LOCK_NAME,))


def run_stages(config: RunConfig, out_dir: Path, stages: List[Stage]) -> List[StageResult]:
    """
    Run the given stages in order under the output lock.

    Returns:
        One StageResult per stage
    """
    out_dir = Path(out_dir)
    with OutputLock(out_dir):
        write_resolved_config(config, out_dir)
        pipeline = SimulationPipeline(config, out_dir)
        results = [pipeline.run_stage(stage) for stage in stages]
        write_manifest(out_dir, exclude=(LOCK_NAME,))
    return results


def run_pipeline(
    config: RunConfig, out_dir: Optional[Path] = None, stop_after: Optional[Stage] = None
) -> Path:
    """
    Run decompose -> couple -> image -> farfield -> specresolve.

    Args:
        config: Validated run configuration
        out_dir: Output directory (defaults to output.directory)
        stop_after: Last stage to run

    Returns:
        Path of manifest.csv listing every artifact with its sha256

    Raises:
        StageError: Carrying the failing stage and the original error
    """
    out_dir = Path(out_dir if out_dir is not None else config.output.directory)
    stages: List[Stage] = []
    for stage in Stage:
        stages.append(stage)
        if stop_after is not None and stage == Stage(stop_after):
            break
    results = run_stages(config, out_dir, stages)
    skipped = sum(result.skipped for result in results)
    manifest = out_dir / MANIFEST_NAME
    logger.info(
        f"Pipeline finished: {len(results)} stages ({skipped} cached), manifest at {manifest}"
    )
    return manifest


def read_manifest(path: Path) -> List[Tuple[str, int, str]]:
    """(path, bytes, sha256) rows of a manifest."""
    rows, _ = read_csv(path)
    return [(row["path"], int(row["bytes"]), row["sha256"]) for row in rows]
