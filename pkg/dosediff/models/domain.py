from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from dosediff.core.errors import ArgumentError, ConfigurationError


@dataclass(frozen=True)
class Volume3D:
    """S x W x W activity grid plus acquisition metadata.

    `data` is held at double precision in memory; files store 32-bit floats.
    """

    data: np.ndarray
    voxel_size_mm: Tuple[float, float, float]
    dose_bq: float
    count_fraction: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[1] != data.shape[2]:
            raise ArgumentError(f"volume data must be S x W x W, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ArgumentError(f"volume must be non-empty, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ArgumentError("volume data contains non-finite values")
        if len(self.voxel_size_mm) != 3 or any(v <= 0 for v in self.voxel_size_mm):
            raise ConfigurationError(f"voxel_size_mm must be three positive reals, got {self.voxel_size_mm}")
        if not self.dose_bq > 0:
            raise ConfigurationError(f"dose_bq must be positive, got {self.dose_bq}")
        if not 0.0 < self.count_fraction <= 1.0:
            raise ConfigurationError(f"count_fraction must lie in (0, 1], got {self.count_fraction}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size_mm", tuple(float(v) for v in self.voxel_size_mm))

    @property
    def slices(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return replace(self, data=data)

    def dose(self) -> "DoseContext":
        return DoseContext(dose_bq=self.dose_bq, count_fraction=self.count_fraction)


@dataclass(frozen=True)
class SliceWindow:
    """n neighbouring slices around `center_index`, ascending slice order."""

    center_index: int
    indices: Tuple[int, ...]
    stack: np.ndarray

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def center(self) -> np.ndarray:
        return self.stack[self.n // 2]


@dataclass(frozen=True)
class DoseContext:
    dose_bq: float
    count_fraction: float = 1.0

    def __post_init__(self):
        if not self.dose_bq > 0:
            raise ArgumentError(f"dose_bq must be positive, got {self.dose_bq}")
        if not 0.0 < self.count_fraction <= 1.0:
            raise ArgumentError(f"count_fraction must lie in (0, 1], got {self.count_fraction}")


@dataclass(frozen=True)
class PredictorOutput:
    """Per-pixel noise estimate and variance-interpolation coefficient."""

    eps_map: np.ndarray
    v_map: np.ndarray


@dataclass
class LatentSet:
    eps_a: np.ndarray
    eps_b: np.ndarray
    z_stream: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def draw(
        cls,
        width: int,
        num_substeps: int,
        seed_a: int,
        seed_b: int,
        seed_z: int,
        key: Optional[int] = None,
    ) -> "LatentSet":
        """Standard-normal latents; `key` derives an independent per-slice stream."""

        def stream(seed: int) -> np.random.Generator:
            return np.random.default_rng(seed if key is None else [seed, key])

        eps_a = stream(seed_a).standard_normal((width, width))
        eps_b = stream(seed_b).standard_normal((width, width))
        rng_z = stream(seed_z)
        z_stream = [rng_z.standard_normal((width, width)) for _ in range(num_substeps)]
        return cls(eps_a=eps_a, eps_b=eps_b, z_stream=z_stream)
