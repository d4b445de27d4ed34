from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
import structlog

from dosediff.core.errors import ArgumentError, ConfigurationError
from dosediff.models.domain import SliceWindow, Volume3D
from dosediff.models.schemas.configs import PhantomSpec

logger = structlog.get_logger(__name__)


class PhantomService:
    """Synthetic activity phantoms and count-level degradation."""

    def generate(self, seed: int, spec: Optional[PhantomSpec] = None) -> Volume3D:
        spec = spec or PhantomSpec()
        rng = np.random.default_rng(seed)
        S, W = spec.slices, spec.width

        # Voxel-centre coordinates normalised to [0, 1]
        z = (np.arange(S) + 0.5) / S
        y = (np.arange(W) + 0.5) / W
        x = (np.arange(W) + 0.5) / W
        zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")

        data = np.full((S, W, W), float(spec.background), dtype=np.float64)
        for ellipsoid in spec.ellipsoids:
            center = np.asarray(ellipsoid.center, dtype=np.float64)
            if ellipsoid.kind != "body" and spec.jitter > 0:
                center = center + rng.uniform(-spec.jitter, spec.jitter, size=3)
            rz, ry, rx = ellipsoid.radii
            inside = (
                ((zz - center[0]) / rz) ** 2 + ((yy - center[1]) / ry) ** 2 + ((xx - center[2]) / rx) ** 2
            ) <= 1.0
            data[inside] += ellipsoid.activity

        if np.any(data < 0):
            raise ConfigurationError("phantom spec yields negative activity where ellipsoids overlap")
        if spec.axial_gradient:
            data *= (1.0 + spec.axial_gradient * (z - 0.5))[:, None, None]

        if not any(e.kind == "lesion" for e in spec.ellipsoids):
            logger.warning("phantom_without_lesion", ellipsoids=len(spec.ellipsoids))
        return Volume3D(data=data, voxel_size_mm=spec.voxel_size_mm, dose_bq=spec.dose_bq, count_fraction=1.0)

    def degrade(self, vol: Volume3D, fraction: float, seed: int) -> Volume3D:
        """Poisson thinning in image space; expected activity is preserved."""
        if not 0.0 < fraction <= 1.0:
            raise ArgumentError(f"count fraction must lie in (0, 1], got {fraction}")
        if np.any(vol.data < 0):
            raise ArgumentError("cannot degrade a volume with negative activity")
        rng = np.random.default_rng(seed)
        counts = rng.poisson(fraction * vol.data)
        return Volume3D(
            data=counts / fraction,
            voxel_size_mm=vol.voxel_size_mm,
            dose_bq=fraction * vol.dose_bq,
            count_fraction=fraction,
        )


def extract_window(vol: Volume3D, s: int, n: int) -> SliceWindow:
    """n slices centred on s; out-of-range neighbours replicate the edge slice."""
    if n < 1 or n % 2 == 0:
        raise ConfigurationError(f"window width n must be odd and positive, got {n}")
    if not 0 <= s < vol.slices:
        raise ArgumentError(f"slice index {s} outside [0, {vol.slices})")
    if n > 2 * vol.slices - 1:
        raise ConfigurationError(f"window width {n} exceeds 2S - 1 = {2 * vol.slices - 1}")
    half = (n - 1) // 2
    indices = tuple(int(i) for i in np.clip(np.arange(s - half, s + half + 1), 0, vol.slices - 1))
    return SliceWindow(center_index=s, indices=indices, stack=vol.data[list(indices)])


def normalize_activity(vol: Volume3D) -> Tuple[Volume3D, float]:
    """Divide by the injected dose; multiply by the returned scale to invert."""
    if not vol.dose_bq > 0:
        raise ArgumentError("cannot normalise a volume with zero dose")
    scale = float(vol.dose_bq)
    return vol.with_data(vol.data / scale), scale


def denormalize_activity(vol: Volume3D, scale: float) -> Volume3D:
    return vol.with_data(vol.data * scale)


_service = PhantomService()


def generate_phantom(seed: int, spec: Optional[PhantomSpec] = None) -> Volume3D:
    return _service.generate(seed, spec)


def degrade_counts(vol: Volume3D, fraction: float, seed: int) -> Volume3D:
    return _service.degrade(vol, fraction, seed)
