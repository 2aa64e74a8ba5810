"""
Settings Models

Pydantic models for every section of a run configuration, with validation.
A configuration file is flat (`section.key = value`); `RunConfig.from_flat_dict`
groups the dotted keys into the nested section models below.
"""

from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class AmplitudeModel(str, Enum):
    """Biphoton transverse amplitude model"""
    DOUBLE_GAUSSIAN = "double_gaussian"  # sinc replaced by a Gaussian, separable in x/y
    SINC = "sinc"  # exact phase-matching sinc, full kernel only


class GaussianMatching(str, Enum):
    """Rule fixing the Gaussian that stands in for the phase-matching sinc"""
    CLOSED_FORM = "closed_form"  # c_g = 1/4, reproduces the closed-form Schmidt number
    SECOND_MOMENT = "second_moment"  # c_g = 1, same second moment as sinc(L^2 v^2)


class ModeFamily(str, Enum):
    """Transverse mode families"""
    HERMITE_GAUSS = "hermite_gauss"
    LAGUERRE_GAUSS = "laguerre_gauss"


class BasisSource(str, Enum):
    """Where the Schmidt basis comes from"""
    SCHMIDT = "schmidt"  # numerical SVD of the sampled amplitude
    ANALYTIC = "analytic"  # closed-form HG/LG modes (double-Gaussian model only)


class WaistPolicy(str, Enum):
    """How the analysis-basis waist is chosen"""
    SCHMIDT = "schmidt"  # fundamental Schmidt-mode waist of the amplitude
    FIXED = "fixed"  # basis.waist as given


class BetaSpace(str, Enum):
    """Quadrature used for the first-order coupling matrix"""
    REAL = "real"
    MOMENTUM = "momentum"


class WeightScheme(str, Enum):
    """Mode weights used in truncated image sums"""
    NATURAL = "natural"  # w_n = sqrt(lambda_n)
    FLATTENED = "flattened"  # equal weights, energy matched to the truncated spectrum
    CUSTOM = "custom"  # user-supplied weights


class RegimeSign(str, Enum):
    """Detector-to-sample coordinate sign"""
    AUTO = "auto"  # mirror when sigma_p*L > 1, direct otherwise
    MIRROR = "mirror"
    DIRECT = "direct"


class PhaseAxis(str, Enum):
    """Coordinate entering the frequency-resolved phase factor"""
    RADIAL = "radial"
    X = "x"


def _split_list(value: Any) -> Any:
    """Accept comma-separated strings for list-typed keys."""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    """Base for configuration sections: unknown keys are rejected"""

    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class PumpSettings(_Section):
    """Pump and crystal parameters"""

    sigma_p_L: float = Field(
        ...,
        gt=0,
        description="Product of pump momentum width and crystal length parameter",
    )

    sigma_p: Optional[float] = Field(
        default=None,
        gt=0,
        description="Explicit pump momentum width (defaults to the balanced value sqrt(sigma_p_L))",
    )

    L: Optional[float] = Field(
        default=None,
        gt=0,
        description="Explicit crystal parameter, L^2 = l_z lambda_p / 4 pi",
    )

    model: AmplitudeModel = Field(
        default=AmplitudeModel.DOUBLE_GAUSSIAN,
        description="Amplitude model",
    )

    gaussian_match: GaussianMatching = Field(
        default=GaussianMatching.CLOSED_FORM,
        description="Gaussian-matching rule for the double-Gaussian model",
    )

    @model_validator(mode="after")
    def validate_explicit_pair(self) -> "PumpSettings":
        """sigma_p and L come together and must reproduce sigma_p_L"""
        if (self.sigma_p is None) != (self.L is None):
            raise ValueError("pump.sigma_p and pump.L must be given together")
        if self.sigma_p is not None and self.L is not None:
            product = self.sigma_p * self.L
            if abs(product - self.sigma_p_L) > 1e-9 * self.sigma_p_L:
                raise ValueError(
                    f"pump.sigma_p * pump.L = {product} does not match "
                    f"pump.sigma_p_L = {self.sigma_p_L}"
                )
        return self


class GridSettings(_Section):
    """Transverse sampling"""

    samples_per_axis: int = Field(
        default=64,
        ge=8,
        le=1024,
        description="Samples per axis N (even)",
    )

    half_extent: Optional[float] = Field(
        default=None,
        gt=0,
        description="Real-space half extent; auto when omitted",
    )

    @field_validator("samples_per_axis")
    @classmethod
    def validate_even(cls, v: int) -> int:
        """Centered layouts need an even sample count"""
        if v % 2:
            raise ValueError("grid.samples_per_axis must be even")
        return v


class BasisSettings(_Section):
    """Schmidt basis and mode-gallery options"""

    source: BasisSource = Field(default=BasisSource.SCHMIDT)

    family: ModeFamily = Field(
        default=ModeFamily.HERMITE_GAUSS,
        description="Family for the analytic basis and the mode gallery",
    )

    max_total_order: int = Field(
        default=5,
        ge=0,
        le=60,
        description="Highest total mode order for the analytic basis and gallery",
    )

    rank: int = Field(
        default=256,
        ge=1,
        description="Schmidt truncation rank kept by the decomposition",
    )

    waist_policy: WaistPolicy = Field(default=WaistPolicy.SCHMIDT)

    waist: Optional[float] = Field(
        default=None,
        gt=0,
        description="Basis waist when waist_policy = fixed",
    )

    @model_validator(mode="after")
    def validate_waist(self) -> "BasisSettings":
        """A fixed policy needs a waist"""
        if self.waist_policy == WaistPolicy.FIXED and self.waist is None:
            raise ValueError("basis.waist is required when basis.waist_policy = fixed")
        return self


class MatterSettings(_Section):
    """Charge-density inputs"""

    magnitude: str = Field(
        ...,
        min_length=1,
        description="Grayscale PGM (P2/P5) holding |sigma|",
    )

    phase: Optional[str] = Field(
        default=None,
        description="Optional PGM holding the phase, gray levels mapped to [-pi, pi)",
    )

    beta_space: BetaSpace = Field(default=BetaSpace.REAL)


class ImagingSettings(_Section):
    """Coincidence-image sweep"""

    orders: List[int] = Field(default_factory=lambda: [1, 2])

    truncations: List[int] = Field(default_factory=lambda: [1, 5, 10, 20])

    schemes: List[WeightScheme] = Field(
        default_factory=lambda: [WeightScheme.NATURAL, WeightScheme.FLATTENED]
    )

    custom_weights: List[float] = Field(default_factory=list)

    regime_sign: RegimeSign = Field(default=RegimeSign.AUTO)

    phase_axis: PhaseAxis = Field(default=PhaseAxis.RADIAL)

    omega_bar: float = Field(
        default=0.0,
        ge=0,
        description="Signal frequency of the frequency-resolved image (c = 1)",
    )

    truncation_far_field: int = Field(default=20, ge=1)

    noise_power: float = Field(
        default=0.01,
        ge=0,
        description="Relative power of the seeded white noise added to the ideal images "
        "for the noise-floor table (0 disables it)",
    )

    split_lists = field_validator(
        "orders", "truncations", "schemes", "custom_weights", mode="before"
    )(_split_list)

    @field_validator("orders")
    @classmethod
    def validate_orders(cls, v: List[int]) -> List[int]:
        """Only first and second order couplings exist"""
        bad = [p for p in v if p not in (1, 2)]
        if bad or not v:
            raise ValueError(f"imaging.orders must be a non-empty subset of {{1, 2}}, got {v}")
        return v

    @field_validator("truncations")
    @classmethod
    def validate_truncations(cls, v: List[int]) -> List[int]:
        """Truncations are positive"""
        if not v or any(n < 1 for n in v):
            raise ValueError(f"imaging.truncations must be positive integers, got {v}")
        return v

    @model_validator(mode="after")
    def validate_custom(self) -> "ImagingSettings":
        """Custom scheme needs weights covering the largest truncation"""
        if WeightScheme.CUSTOM in self.schemes:
            if len(self.custom_weights) < max(self.truncations):
                raise ValueError(
                    "imaging.custom_weights must have at least max(imaging.truncations) entries"
                )
            if any(w <= 0 for w in self.custom_weights):
                raise ValueError("imaging.custom_weights must be positive")
        return self


class GateSettings(_Section):
    """Spectral gates (angular frequencies with c = 1, widths are FWHM)"""

    signal_center: float = Field(default=1.0, gt=0)
    signal_fwhm: float = Field(default=0.5, gt=0)
    idler_center: float = Field(default=1.0, gt=0)
    idler_fwhm: float = Field(default=0.5, gt=0)
    pump_center: Optional[float] = Field(
        default=None,
        gt=0,
        description="Center of |A|^2; defaults to signal_center + idler_center",
    )
    pump_width: float = Field(default=0.25, gt=0, description="FWHM of |A|^2")


class QuadratureSettings(_Section):
    """Far-field quadrature sample counts"""

    omega_samples: int = Field(default=33, ge=1)
    radial_samples: int = Field(default=48, ge=2)
    azimuthal_samples: int = Field(default=64, ge=4)


class ToleranceSettings(_Section):
    """All numerical tolerances in one place"""

    gram: float = Field(default=1e-6, gt=0, description="Gram-matrix deviation reported as warning")
    gram_fail: float = Field(default=1e-3, gt=0, description="Gram-matrix deviation that fails")
    normalization: float = Field(default=1e-3, gt=0, description="Mode norm deviation that fails")
    weight_sum: float = Field(default=1e-8, gt=0, description="Allowed |sum(lambda) - 1|")
    resolution_factor: float = Field(
        default=1.5, gt=0, description="Max momentum step in units of the narrowest feature"
    )
    span_factor: float = Field(
        default=2.0, gt=0, description="Min momentum half span in units of the widest feature"
    )
    min_gate_samples: int = Field(default=8, ge=1, description="Samples per narrowest FWHM")


class OutputSettings(_Section):
    """Artifact output"""

    directory: str = Field(default="out")
    seed: int = Field(
        default=0, ge=0, lt=2**64, description="Seed of the noise-floor table (never physics)"
    )
    gallery_modes: int = Field(default=6, ge=0, description="Schmidt modes exported as PGM")
    export_modes: bool = Field(default=True, description="Persist mode files of the decomposition")


class RunConfig(BaseModel):
    """
    Complete run configuration combining all sections.

    Sections: pump, grid, basis, matter, imaging, gates, quadrature,
    tolerance, output. Only pump.sigma_p_L and matter.magnitude are required.
    """

    model_config = ConfigDict(extra="forbid")

    pump: PumpSettings
    grid: GridSettings = Field(default_factory=GridSettings)
    basis: BasisSettings = Field(default_factory=BasisSettings)
    matter: MatterSettings
    imaging: ImagingSettings = Field(default_factory=ImagingSettings)
    gates: GateSettings = Field(default_factory=GateSettings)
    quadrature: QuadratureSettings = Field(default_factory=QuadratureSettings)
    tolerance: ToleranceSettings = Field(default_factory=ToleranceSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)

    @model_validator(mode="after")
    def validate_cross_section(self) -> "RunConfig":
        """Rules that span sections"""
        if self.pump.model == AmplitudeModel.SINC:
            if self.basis.source == BasisSource.ANALYTIC:
                raise ValueError("basis.source = analytic requires pump.model = double_gaussian")
            if self.grid.samples_per_axis > 64:
                raise ValueError(
                    "pump.model = sinc needs the full-kernel SVD, limited to "
                    "grid.samples_per_axis <= 64"
                )
        return self

    @classmethod
    def sections(cls) -> Dict[str, type[BaseModel]]:
        """Section name to section model class"""
        return {
            name: field.annotation  # type: ignore[misc]
            for name, field in cls.model_fields.items()
        }

    @classmethod
    def known_keys(cls) -> List[str]:
        """All valid dotted keys, sorted"""
        keys = []
        for section, model in cls.sections().items():
            for name in model.model_fields:
                keys.append(f"{section}.{name}")
        return sorted(keys)

    def to_flat_dict(self) -> Dict[str, Any]:
        """
        Convert nested settings to a flat dotted-key dict.

        Returns:
            Dict with keys like "pump.sigma_p_L", enum values as strings
        """
        flat: Dict[str, Any] = {}
        for section in self.sections():
            for key, value in getattr(self, section).model_dump(mode="json").items():
                flat[f"{section}.{key}"] = value
        return flat

    @classmethod
    def from_flat_dict(cls, flat_dict: Dict[str, Any]) -> "RunConfig":
        """
        Create RunConfig from a flat dotted-key dict.

        Args:
            flat_dict: Dictionary with keys like "pump.sigma_p_L"

        Returns:
            RunConfig with nested structure

        Raises:
            ValueError: If a key has no section prefix or validation fails
        """
        grouped: Dict[str, Dict[str, Any]] = {}
        for key, value in flat_dict.items():
            section, _, name = key.partition(".")
            if not name:
                raise ValueError(f"Key '{key}' has no section prefix")
            grouped.setdefault(section, {})[name] = value
        return cls(**grouped)

    def section_digest(self, *sections: str) -> Dict[str, Any]:
        """
        JSON-ready content of the named sections, used for stage cache keys.

        Args:
            sections: Section names

        Returns:
            Dict mapping section name to its dumped content
        """
        return {name: getattr(self, name).model_dump(mode="json") for name in sections}

    def resolve_paths(self, base_dir: Path) -> "RunConfig":
        """
        Resolve matter paths against base_dir.

        Args:
            base_dir: Directory of the configuration file

        Returns:
            A copy with absolute matter paths
        """
        matter = self.matter.model_copy(
            update={
                "magnitude": str((base_dir / self.matter.magnitude).resolve()),
                "phase": (
                    str((base_dir / self.matter.phase).resolve()) if self.matter.phase else None
                ),
            }
        )
        return self.model_copy(update={"matter": matter})
