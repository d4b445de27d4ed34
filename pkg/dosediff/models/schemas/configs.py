from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from dosediff.core.config import settings
from dosediff.core.errors import ConfigurationError


class EmbeddingMode(str, Enum):
    """How the injected dose enters the conditioning embedding."""

    PAPER = "paper"           # u = t + sin(dose_bq) + cos(dose_bq)
    FRACTION = "fraction"     # u = t, plus an encoded 1000 * count_fraction
    NONE = "none"             # u = t, dose ignored


class ScheduleKind(str, Enum):
    LINEAR = "linear"


class EllipsoidSpec(BaseModel):
    """Ellipsoid in normalised (z, y, x) coordinates; activity adds to what lies beneath."""

    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]
    activity: float
    kind: str = "organ"

    @field_validator("radii")
    @classmethod
    def _positive_radii(cls, v):
        if any(r <= 0 for r in v):
            raise ValueError(f"radii must be positive, got {v}")
        return v


def default_ellipsoids() -> List[EllipsoidSpec]:
    return [
        EllipsoidSpec(center=(0.5, 0.5, 0.5), radii=(0.45, 0.42, 0.36), activity=20.0, kind="body"),
        EllipsoidSpec(center=(0.56, 0.55, 0.36), radii=(0.14, 0.12, 0.10), activity=20.0, kind="organ"),
        EllipsoidSpec(center=(0.36, 0.45, 0.60), radii=(0.08, 0.08, 0.08), activity=60.0, kind="organ"),
        # Low-contrast lesion: 1.5x the surrounding body activity
        EllipsoidSpec(center=(0.62, 0.38, 0.64), radii=(0.06, 0.06, 0.06), activity=10.0, kind="lesion"),
    ]


class PhantomSpec(BaseModel):
    width: int = Field(default_factory=lambda: settings.PHANTOM_WIDTH)
    slices: int = Field(default_factory=lambda: settings.PHANTOM_SLICES)
    ellipsoids: List[EllipsoidSpec] = Field(default_factory=default_ellipsoids)
    background: float = 0.0
    axial_gradient: float = 0.2
    jitter: float = 0.02
    voxel_size_mm: Tuple[float, float, float] = Field(default_factory=lambda: settings.VOXEL_SIZE_MM)
    dose_bq: float = Field(default_factory=lambda: settings.FULL_DOSE_BQ)

    @model_validator(mode="after")
    def _check(self):
        if self.width < 8 or self.slices < 8:
            raise ValueError(f"phantom needs width, slices >= 8, got {self.width}, {self.slices}")
        if abs(self.axial_gradient) >= 2.0:
            raise ValueError("axial_gradient must lie in (-2, 2) to keep activity non-negative")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if self.dose_bq <= 0:
            raise ValueError("dose_bq must be positive")
        return self


class TrainConfig(BaseModel):
    batch_size: int = 8
    steps: int = 500
    lr: float = 1e-4
    lambda_vlb: float = 0.001
    n_slices: int = Field(default_factory=lambda: settings.N_SLICES)
    fractions: List[float] = Field(default_factory=lambda: list(settings.FRACTION_LADDER))
    seed: int = 0
    embedding_mode: EmbeddingMode = EmbeddingMode.PAPER
    base_width: int = 16
    intensity_scale: float = 40.0
    prefetch: int = 2

    @model_validator(mode="after")
    def _check(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lambda_vlb < 0:
            raise ValueError("lambda_vlb must be >= 0")
        if self.n_slices < 1 or self.n_slices % 2 == 0:
            raise ValueError(f"n_slices must be odd and positive, got {self.n_slices}")
        if not self.fractions or any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ValueError(f"fraction ladder must be a non-empty subset of (0, 1], got {self.fractions}")
        if self.intensity_scale <= 0:
            raise ValueError("intensity_scale must be positive")
        return self


class PriorTrainConfig(TrainConfig):
    lambda_vlb: float = 0.0


class SamplerConfig(BaseModel):
    num_steps: int = 25
    ddpm_every: int = 5
    T_prime: int = 500
    eta: float = 0.0
    fix_latents: bool = True
    dual_noise: bool = True
    fix_step_noise: bool = True
    use_prior: bool = True
    seed_a: int = 1
    seed_b: int = 2
    seed_z: int = 3
    threads: int = Field(default_factory=lambda: settings.THREADS)
    embedding_override: Optional[EmbeddingMode] = None

    @model_validator(mode="after")
    def _check(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.num_steps > self.T_prime:
            raise ValueError(f"num_steps ({self.num_steps}) must not exceed T_prime ({self.T_prime})")
        if self.ddpm_every < 1:
            raise ValueError("ddpm_every must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        return self

    def check_schedule(self, T: int) -> None:
        if self.T_prime > T:
            raise ConfigurationError(f"T_prime ({self.T_prime}) exceeds schedule length T ({T})")


# Flat keys whose values are comma-separated lists in a config file
LIST_KEYS = ("fractions", "train.fractions", "variants", "noisy")


class RunConfig(BaseModel):
    """Command-scoped parameters; `to_flat()` reproduces the run from a config file."""

    seed: int = 0
    width: int = Field(default_factory=lambda: settings.PHANTOM_WIDTH)
    slices: int = Field(default_factory=lambda: settings.PHANTOM_SLICES)
    fractions: List[float] = Field(default_factory=lambda: list(settings.FRACTION_LADDER))
    schedule_T: int = Field(default_factory=lambda: settings.SCHEDULE_T)
    beta_start: float = Field(default_factory=lambda: settings.BETA_START)
    beta_end: float = Field(default_factory=lambda: settings.BETA_END)
    prior_sigma_mm: Optional[float] = None
    fraction: Optional[float] = None
    phantoms: int = Field(default=4, ge=1)
    variants: Optional[List[str]] = None
    volume_id: Optional[str] = None
    pgm: bool = False
    train_missing: bool = False
    # role (input, reference, test, prior, model, models, clean) -> path as given
    paths: Dict[str, str] = Field(default_factory=dict)
    noisy: Optional[List[str]] = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {}
        for key, value in self.model_dump(mode="json").items():
            if isinstance(value, dict):
                for sub, sub_value in value.items():
                    if sub_value is not None:
                        flat[f"{key}.{sub}"] = sub_value
            elif value is not None:
                flat[key] = value
        return flat

    @classmethod
    def from_flat(cls, values: Dict[str, Any]) -> "RunConfig":
        nested: Dict[str, Any] = {}
        for key, value in values.items():
            if isinstance(value, str) and key in LIST_KEYS:
                value = [v for v in (p.strip() for p in value.split(",")) if v]
            if "." in key:
                section, sub = key.split(".", 1)
                nested.setdefault(section, {})[sub] = value
            else:
                nested[key] = value
        return build_config(cls, nested)


def build_config(model: type, values: Dict[str, Any]):
    """Validate a config model, translating pydantic errors into ConfigurationError."""
    try:
        return model.model_validate(values)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or model.__name__
        raise ConfigurationError(f"invalid {model.__name__}: {where}: {first.get('msg')}") from e
