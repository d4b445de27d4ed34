"""Denoised-prior providers: a dose-conditioned residual denoiser and a Gaussian smoothing fallback."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import structlog
import torch
from scipy.ndimage import gaussian_filter

from dosediff.core.config import settings
from dosediff.core.errors import ArgumentError, ConfigurationError, TrainingError
from dosediff.core.logging import TrainingLogWriter
from dosediff.models.domain import Volume3D
from dosediff.models.schemas.configs import PriorTrainConfig
from dosediff.models.schemas.reports import LossReport
from dosediff.services.predictor_service import ConditionalDenoiser, build_denoiser
from dosediff.services.phantom_service import extract_window
from dosediff.services.training_service import Batch, BatchAssembler, PairedDataset, build_optimizer

logger = structlog.get_logger(__name__)

# The prior network is conditioned on dose only; the step slot is pinned here
PRIOR_STEP = 0


class PriorKind(str, Enum):
    TRAINED = "trained"
    SMOOTHING = "smoothing"


@dataclass
class PriorBackend:
    kind: PriorKind
    model: Optional[ConditionalDenoiser] = None
    intensity_scale: float = 1.0
    sigma_mm: Optional[float] = None

    def __post_init__(self):
        self.kind = PriorKind(self.kind)
        if self.kind is PriorKind.TRAINED:
            if self.model is None:
                raise ConfigurationError("trained prior backend needs a model")
            if self.model.out_channels != 1 or self.model.with_state_channel:
                raise ConfigurationError("prior model must be single-output without a state channel")
        elif self.sigma_mm is not None and not self.sigma_mm > 0:
            raise ConfigurationError(f"smoothing sigma_mm must be positive, got {self.sigma_mm}")

    @classmethod
    def smoothing(cls, sigma_mm: Optional[float] = None) -> "PriorBackend":
        return cls(kind=PriorKind.SMOOTHING, sigma_mm=sigma_mm)


def default_sigma_mm(vol: Volume3D) -> float:
    return 2.0 * max(vol.voxel_size_mm)


def smooth_prior(vol: Volume3D, sigma_mm: Optional[float] = None) -> Volume3D:
    """Separable 3D Gaussian blur with per-axis widths from the voxel size.

    Each voxel is divided by the kernel weight that lands inside the grid before
    spreading, so the total activity is kept exactly at the boundary too.
    """
    sigma_mm = default_sigma_mm(vol) if sigma_mm is None else sigma_mm
    if not sigma_mm > 0:
        raise ConfigurationError(f"sigma_mm must be positive, got {sigma_mm}")
    sigma_vox = tuple(sigma_mm / v for v in vol.voxel_size_mm)
    norm = gaussian_filter(np.ones_like(vol.data), sigma=sigma_vox, mode="constant")
    blurred = gaussian_filter(vol.data / norm, sigma=sigma_vox, mode="constant")
    return vol.with_data(np.maximum(blurred, 0.0))


def prior_residual(model: ConditionalDenoiser, windows: torch.Tensor, dose_bq, count_fraction) -> torch.Tensor:
    """Centre slice plus the network's correction, both in scaled units."""
    t = np.full(windows.shape[0], PRIOR_STEP)
    out = model(windows, t, dose_bq, count_fraction)[:, 0]
    return windows[:, model.n_slices // 2] + out


def _prior_loss(model: ConditionalDenoiser, batch: Batch, intensity_scale: float) -> torch.Tensor:
    dtype = model.unet.out.weight.dtype
    windows = torch.as_tensor(batch.windows / intensity_scale, dtype=dtype)
    target = torch.as_tensor(batch.x0 / intensity_scale, dtype=dtype)
    pred = prior_residual(model, windows, batch.dose_bq, batch.count_fraction)
    return torch.mean((pred - target) ** 2)


def train_denoiser(
    dataset: PairedDataset,
    config: PriorTrainConfig,
    log_path: Optional[Union[str, Path]] = None,
    model: Optional[ConditionalDenoiser] = None,
) -> PriorBackend:
    """Supervised MSE regression from a degraded window to the clean centre slice."""
    model = model or build_denoiser(
        config.seed,
        n_slices=config.n_slices,
        out_channels=1,
        base_width=config.base_width,
        emb_dim=settings.EMBEDDING_DIM,
        mode=config.embedding_mode,
        with_state_channel=False,
    )
    optimizer = build_optimizer(model, config.lr)
    writer = TrainingLogWriter(log_path) if log_path else None

    # T only drives the unused step draw in batch assembly
    assembler = BatchAssembler(dataset, config, T=1)
    reports: List[LossReport] = []
    model.train()
    for step, batch in enumerate(assembler):
        started = time.perf_counter()
        optimizer.zero_grad(set_to_none=True)
        loss = _prior_loss(model, batch, config.intensity_scale)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError("prior training diverged: non-finite loss", step=step)
        loss.backward()
        optimizer.step()
        reports.append(LossReport(loss_simple=value, loss_vlb=0.0, total=value))
        if writer:
            writer.append(step, value, 0.0, value, (time.perf_counter() - started) * 1000.0)
        if step % 50 == 0:
            logger.info("prior_training_step", step=step, loss=value)
    model.eval()
    return PriorBackend(kind=PriorKind.TRAINED, model=model, intensity_scale=config.intensity_scale)


def denoise(backend: PriorBackend, vol: Volume3D) -> Volume3D:
    if backend.kind is PriorKind.SMOOTHING:
        return smooth_prior(vol, backend.sigma_mm)

    model = backend.model
    if vol.slices * 2 - 1 < model.n_slices:
        raise ArgumentError(f"volume of {vol.slices} slices is too short for a {model.n_slices}-slice window")
    stacks = np.stack([extract_window(vol, s, model.n_slices).stack for s in range(vol.slices)])
    dtype = model.unet.out.weight.dtype
    with torch.no_grad():
        pred = prior_residual(
            model,
            torch.as_tensor(stacks / backend.intensity_scale, dtype=dtype),
            np.full(vol.slices, vol.dose_bq),
            np.full(vol.slices, vol.count_fraction),
        )
    data = np.maximum(pred.double().cpu().numpy() * backend.intensity_scale, 0.0)
    return vol.with_data(data)
