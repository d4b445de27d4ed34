from __future__ import annotations

import math
from typing import Optional, Protocol, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from dosediff.core.config import settings
from dosediff.core.errors import ArgumentError, ConfigurationError
from dosediff.engine.schedule import NoiseSchedule, coef
from dosediff.models.domain import DoseContext, PredictorOutput, SliceWindow
from dosediff.models.schemas.configs import EmbeddingMode

MAX_PERIOD = 10_000.0
FRACTION_SCALE = 1000.0


def _as_mode(mode: Union[str, EmbeddingMode]) -> EmbeddingMode:
    try:
        return EmbeddingMode(mode)
    except ValueError as e:
        raise ConfigurationError(f"unknown embedding mode {mode!r}") from e


def encode_scalar(u: Union[float, np.ndarray], dim: int = 64) -> np.ndarray:
    """Multi-frequency sinusoidal encoding, half sin / half cos, float64.

    Frequencies form a geometric ladder from 1 down to 1 / MAX_PERIOD.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(MAX_PERIOD) * np.arange(half, dtype=np.float64) / max(half - 1, 1))
    args = u[:, None] * freqs[None, :]
    enc = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        enc = np.concatenate([enc, np.zeros((enc.shape[0], 1))], axis=-1)
    return enc


def encode_condition(
    t: np.ndarray,
    dose_bq: np.ndarray,
    count_fraction: np.ndarray,
    mode: Union[str, EmbeddingMode],
    dim: int = 64,
) -> np.ndarray:
    """Pre-affine encoding of (t, dose) under the given embedding mode."""
    mode = _as_mode(mode)
    t = np.asarray(t, dtype=np.float64)
    if mode is EmbeddingMode.PAPER:
        dose = np.asarray(dose_bq, dtype=np.float64)
        return encode_scalar(t + np.sin(dose) + np.cos(dose), dim)
    if mode is EmbeddingMode.FRACTION:
        return encode_scalar(t, dim) + encode_scalar(FRACTION_SCALE * np.asarray(count_fraction, dtype=np.float64), dim)
    return encode_scalar(t, dim)


class ConditionEmbedding(nn.Module):
    """Encoded (t, dose) scalar -> affine -> SiLU -> affine."""

    def __init__(self, dim: int = 64, mode: Union[str, EmbeddingMode] = EmbeddingMode.PAPER):
        super().__init__()
        self.dim = dim
        self.mode = _as_mode(mode)
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t, dose_bq, count_fraction, mode: Optional[EmbeddingMode] = None) -> torch.Tensor:
        enc = encode_condition(t, dose_bq, count_fraction, mode or self.mode, self.dim)
        weight = self.net[0].weight
        return self.net(torch.as_tensor(enc, dtype=weight.dtype, device=weight.device))


class ConvBlock(nn.Module):
    def __init__(self, in_c: int, out_c: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_c, out_c, 3, padding=1)
        self.conv2 = nn.Conv2d(out_c, out_c, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_c)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = h + self.emb_proj(emb)[:, :, None, None]
        return F.silu(self.conv2(h))


class TinyUNet(nn.Module):
    """Three-level conv encoder-decoder with per-level embedding injection.

    Widths c, 2c, 4c; the output conv is zero-initialised.
    """

    LEVELS = 3

    def __init__(self, in_channels: int, out_channels: int, base_width: int = 16, emb_dim: int = 64):
        super().__init__()
        c = base_width
        self.enc0 = ConvBlock(in_channels, c, emb_dim)
        self.enc1 = ConvBlock(c, 2 * c, emb_dim)
        self.mid = ConvBlock(2 * c, 4 * c, emb_dim)
        self.dec1 = ConvBlock(4 * c + 2 * c, 2 * c, emb_dim)
        self.dec0 = ConvBlock(2 * c + c, c, emb_dim)
        self.out = nn.Conv2d(c, out_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        # Pad right and bottom to a multiple of the pooling factor, crop back after the head
        factor = 2 ** (self.LEVELS - 1)
        height, width = x.shape[-2:]
        pad_h, pad_w = -height % factor, -width % factor
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        h0 = self.enc0(x, emb)
        h1 = self.enc1(F.avg_pool2d(h0, 2), emb)
        h2 = self.mid(F.avg_pool2d(h1, 2), emb)
        u1 = self.dec1(torch.cat([F.interpolate(h2, scale_factor=2, mode="nearest"), h1], dim=1), emb)
        u0 = self.dec0(torch.cat([F.interpolate(u1, scale_factor=2, mode="nearest"), h0], dim=1), emb)
        return self.out(u0)[..., :height, :width]


class ConditionalDenoiser(nn.Module):
    """Embedding + TinyUNet. Input channels: n window slices then x_t (if any)."""

    def __init__(
        self,
        n_slices: int,
        out_channels: int = 2,
        base_width: int = 16,
        emb_dim: int = 64,
        mode: Union[str, EmbeddingMode] = EmbeddingMode.PAPER,
        with_state_channel: bool = True,
    ):
        super().__init__()
        self.n_slices = n_slices
        self.out_channels = out_channels
        self.base_width = base_width
        self.emb_dim = emb_dim
        self.with_state_channel = with_state_channel
        in_channels = n_slices + (1 if with_state_channel else 0)
        self.embedding = ConditionEmbedding(emb_dim, mode)
        self.unet = TinyUNet(in_channels, out_channels, base_width, emb_dim)

    @property
    def mode(self) -> EmbeddingMode:
        return self.embedding.mode

    def hyperparameters(self) -> dict:
        return {
            "n_slices": self.n_slices,
            "out_channels": self.out_channels,
            "base_width": self.base_width,
            "emb_dim": self.emb_dim,
            "mode": self.mode.value,
            "with_state_channel": self.with_state_channel,
        }

    def forward(self, x, t, dose_bq, count_fraction, mode: Optional[EmbeddingMode] = None) -> torch.Tensor:
        emb = self.embedding(t, dose_bq, count_fraction, mode)
        return self.unet(x, emb)


def build_denoiser(seed: int, **hyperparameters) -> ConditionalDenoiser:
    """Deterministic initialisation that leaves the global torch RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ConditionalDenoiser(**hyperparameters)


def embed_condition(
    t: int,
    dose: DoseContext,
    mode: Union[str, EmbeddingMode],
    embedder: ConditionEmbedding,
    T: Optional[int] = None,
) -> np.ndarray:
    """Embedding vector for one (t, dose) pair under the embedder's learned parameters."""
    T = T or settings.SCHEDULE_T
    if not 1 <= t <= T:
        raise ArgumentError(f"step index must lie in [1, {T}], got {t}")
    with torch.no_grad():
        out = embedder([t], [dose.dose_bq], [dose.count_fraction], _as_mode(mode))
    return out[0].double().cpu().numpy()


class Predictor(Protocol):
    n_slices: int
    intensity_scale: float

    def predict(self, x_t: np.ndarray, window: SliceWindow, t: int, dose: DoseContext) -> PredictorOutput:
        ...


class TinyNetPredictor:
    """Trainable epsilon/variance backend; stateless at inference."""

    def __init__(
        self,
        model: ConditionalDenoiser,
        intensity_scale: float = 1.0,
        embedding_override: Optional[EmbeddingMode] = None,
    ):
        if model.out_channels != 2 or not model.with_state_channel:
            raise ConfigurationError("predictor needs a 2-output denoiser with an x_t input channel")
        self.model = model.eval()
        self.n_slices = model.n_slices
        self.intensity_scale = float(intensity_scale)
        self.embedding_override = embedding_override

    def predict(self, x_t: np.ndarray, window: SliceWindow, t: int, dose: DoseContext) -> PredictorOutput:
        out = self.predict_batch(x_t[None], window.stack[None], [t], [dose])
        return out[0]

    def predict_batch(
        self,
        x_t: np.ndarray,
        stacks: np.ndarray,
        t: Sequence[int],
        doses: Sequence[DoseContext],
    ) -> list:
        if x_t.ndim != 3 or stacks.ndim != 4 or x_t.shape[0] != stacks.shape[0]:
            raise ArgumentError(f"batch shapes disagree: x_t {x_t.shape}, windows {stacks.shape}")
        if x_t.shape[-2:] != stacks.shape[-2:]:
            raise ArgumentError(f"spatial shape mismatch: x_t {x_t.shape[-2:]}, window {stacks.shape[-2:]}")
        if stacks.shape[1] != self.n_slices:
            raise ArgumentError(f"window has {stacks.shape[1]} slices, model expects {self.n_slices}")
        dtype = self.model.unet.out.weight.dtype
        inputs = np.concatenate([stacks / self.intensity_scale, x_t[:, None]], axis=1)
        with torch.no_grad():
            raw = self.model(
                torch.as_tensor(inputs, dtype=dtype),
                np.asarray(t),
                np.asarray([d.dose_bq for d in doses]),
                np.asarray([d.count_fraction for d in doses]),
                self.embedding_override,
            )
        raw = raw.double().cpu().numpy()
        return [PredictorOutput(eps_map=r[0], v_map=r[1]) for r in raw]


def oracle_eps(schedule: NoiseSchedule, x_t: np.ndarray, t: int, mu0: float, s0: float) -> PredictorOutput:
    """Exact E[eps | x_t] when every element of x0 is Normal(mu0, s0^2)."""
    if not s0 > 0:
        raise ArgumentError(f"oracle prior std must be positive, got {s0}")
    schedule.check_step(t)
    ab = coef(schedule.alpha_bar_ext, t, x_t)
    gain = ab ** 0.5 * s0 ** 2 / (ab * s0 ** 2 + 1.0 - ab)
    m = mu0 + gain * (x_t - ab ** 0.5 * mu0)
    eps = (x_t - ab ** 0.5 * m) / (1.0 - ab) ** 0.5
    return PredictorOutput(eps_map=eps, v_map=np.zeros_like(x_t))


class OraclePredictor:
    """Analytic backend for Gaussian data; ignores the conditioning window."""

    def __init__(self, schedule: NoiseSchedule, mu0: float, s0: float, n_slices: int = 1):
        self.schedule = schedule
        self.mu0 = mu0
        self.s0 = s0
        self.n_slices = n_slices
        self.intensity_scale = 1.0

    def predict(self, x_t: np.ndarray, window: SliceWindow, t: int, dose: DoseContext) -> PredictorOutput:
        if window.stack.shape[-2:] != x_t.shape:
            raise ArgumentError(f"spatial shape mismatch: x_t {x_t.shape}, window {window.stack.shape[-2:]}")
        return oracle_eps(self.schedule, x_t, t, self.mu0, self.s0)
