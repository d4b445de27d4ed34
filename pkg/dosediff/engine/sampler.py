"""Reverse-process steps, the hybrid DDIM/DDPM plan, and the slice-wise volume sampler."""
from __future__ import annotations

import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog

from dosediff.core.errors import ArgumentError, DosediffError, SamplingError
from dosediff.engine.schedule import Grid, NoiseSchedule, Step, _as_index_array, as_column, check_shapes, q_sample, xp
from dosediff.models.domain import DoseContext, LatentSet, PredictorOutput, Volume3D
from dosediff.models.schemas.configs import SamplerConfig
from dosediff.services.phantom_service import extract_window
from dosediff.services.predictor_service import Predictor

logger = structlog.get_logger(__name__)

VARIANCE_FLOOR = 1e-20


class StepKind(str, Enum):
    DDIM = "ddim"
    DDPM = "ddpm"


@dataclass(frozen=True)
class SubStep:
    t: int
    t_prev: int
    kind: StepKind

    @property
    def noise_free(self) -> bool:
        return self.t_prev == 0


@dataclass
class SamplerDiagnostics:
    evaluations: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    sqrt_clamps: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def count_evaluation(self, slice_index: int) -> None:
        with self._lock:
            self.evaluations[slice_index] += 1

    def count_clamp(self) -> None:
        with self._lock:
            self.sqrt_clamps += 1


def step_tables(schedule: NoiseSchedule, t: Step, t_prev: Optional[Step] = None) -> Dict[str, np.ndarray]:
    """alpha, alpha_bar, beta and beta_tilde for a possibly strided step t -> t_prev.

    Unit strides read the schedule's own tables; longer strides use the
    respaced alpha = alpha_bar_t / alpha_bar_prev and the betas derived from it.
    """
    t_idx = _as_index_array(t)
    prev_idx = t_idx - 1 if t_prev is None else _as_index_array(t_prev)
    if np.any(prev_idx >= t_idx) or np.any(prev_idx < 0):
        raise ArgumentError(f"reverse step needs t > t_prev >= 0, got t={t_idx}, t_prev={prev_idx}")
    ab = schedule.alpha_bar_ext[t_idx]
    ab_prev = schedule.alpha_bar_ext[prev_idx]
    unit = prev_idx == t_idx - 1
    alpha = np.where(unit, schedule.alpha_ext[t_idx], ab / ab_prev)
    beta = np.where(unit, schedule.beta_ext[t_idx], 1.0 - alpha)
    beta_tilde = np.where(unit, schedule.beta_tilde_ext[t_idx], beta * (1.0 - ab_prev) / (1.0 - ab))
    return {"alpha": alpha, "alpha_bar": ab, "beta": beta, "beta_tilde": beta_tilde}


def mean_from_eps(
    schedule: NoiseSchedule, x_t: Grid, t: Step, eps_hat: Grid, t_prev: Optional[Step] = None
) -> Grid:
    """Parameterised reverse mean mu_theta(x_t, t) from an epsilon estimate."""
    schedule.check_step(t)
    check_shapes(x_t, eps_hat)
    tables = step_tables(schedule, t, t_prev)
    alpha = as_column(tables["alpha"], x_t)
    ab = as_column(tables["alpha_bar"], x_t)
    return (x_t - ((1.0 - alpha) / (1.0 - ab) ** 0.5) * eps_hat) / alpha ** 0.5


def log_variance_from_v(schedule: NoiseSchedule, v: Grid, t: Step, t_prev: Optional[Step] = None) -> Grid:
    """v log beta_t + (1 - v) log beta_tilde_t with beta_tilde floored at VARIANCE_FLOOR."""
    tables = step_tables(schedule, t, t_prev)
    log_beta = as_column(np.log(tables["beta"]), v)
    log_beta_tilde = as_column(np.log(np.maximum(tables["beta_tilde"], VARIANCE_FLOOR)), v)
    return v * log_beta + (1.0 - v) * log_beta_tilde


def sigma_from_v(schedule: NoiseSchedule, v: Grid, t: Step, t_prev: Optional[Step] = None) -> Grid:
    """Learned reverse standard deviation: sigma^2 interpolates beta_t and beta_tilde_t in log space."""
    return xp(v).exp(0.5 * log_variance_from_v(schedule, v, t, t_prev))


def ddpm_step(
    schedule: NoiseSchedule, x_t: Grid, out: PredictorOutput, t: int, t_prev: int, z: Grid
) -> Grid:
    check_shapes(x_t, out.eps_map, z)
    mu = mean_from_eps(schedule, x_t, t, out.eps_map, t_prev)
    if t_prev == 0:
        return mu
    return mu + sigma_from_v(schedule, out.v_map, t, t_prev) * z


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t_prev)
    return eta * ((1.0 - ab_prev) / (1.0 - ab)) ** 0.5 * (1.0 - ab / ab_prev) ** 0.5


def ddim_step(
    schedule: NoiseSchedule,
    x_t: Grid,
    out: PredictorOutput,
    t: int,
    t_prev: int,
    eta: float,
    z: Grid,
    diagnostics: Optional[SamplerDiagnostics] = None,
) -> Grid:
    schedule.check_step(t)
    check_shapes(x_t, out.eps_map, z)
    if not t > t_prev >= 0:
        raise ArgumentError(f"reverse step needs t > t_prev >= 0, got {t}, {t_prev}")
    ab = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t_prev)
    x0_hat = (x_t - (1.0 - ab) ** 0.5 * out.eps_map) / ab ** 0.5
    sigma = 0.0 if t_prev == 0 else ddim_sigma(schedule, t, t_prev, eta)
    direction = 1.0 - ab_prev - sigma ** 2
    if direction < 0:
        if diagnostics is not None:
            diagnostics.count_clamp()
        direction = 0.0
    result = ab_prev ** 0.5 * x0_hat + direction ** 0.5 * out.eps_map
    if sigma > 0:
        result = result + sigma * z
    return result


def plan_substeps(config: SamplerConfig, start: Optional[int] = None) -> List[SubStep]:
    """Descending uniform stride over [1, start]; every ddpm_every-th sub-step is DDPM."""
    start = config.T_prime if start is None else start
    ladder = np.floor(np.linspace(start, 0, config.num_steps + 1) + 0.5).astype(int)
    steps = []
    for i in range(1, config.num_steps + 1):
        kind = StepKind.DDPM if i % config.ddpm_every == 0 else StepKind.DDIM
        steps.append(SubStep(t=int(ladder[i - 1]), t_prev=int(ladder[i]), kind=kind))
    return steps


class VolumeSampler:
    """Slice-wise reverse sampling with fixed latents, dual noise and a denoised-prior start."""

    def __init__(self, schedule: NoiseSchedule, model: Predictor, config: SamplerConfig):
        config.check_schedule(schedule.T)
        self.schedule = schedule
        self.model = model
        self.config = config
        self.diagnostics = SamplerDiagnostics()
        self.start = config.T_prime if config.use_prior else schedule.T
        self.plan = plan_substeps(config, self.start)

    def _latents(self, width: int, slice_index: int, shared: LatentSet) -> LatentSet:
        cfg = self.config
        if cfg.fix_latents and cfg.fix_step_noise:
            return shared
        own = LatentSet.draw(width, len(self.plan), cfg.seed_a, cfg.seed_b, cfg.seed_z, key=slice_index)
        return LatentSet(
            eps_a=shared.eps_a if cfg.fix_latents else own.eps_a,
            eps_b=shared.eps_b if cfg.fix_latents else own.eps_b,
            z_stream=shared.z_stream if cfg.fix_step_noise else own.z_stream,
        )

    def _advance(self, x: np.ndarray, s: int, step: SubStep, window, dose, z) -> np.ndarray:
        out = self.model.predict(x, window, step.t, dose)
        self.diagnostics.count_evaluation(s)
        if step.kind is StepKind.DDPM:
            return ddpm_step(self.schedule, x, out, step.t, step.t_prev, z)
        return ddim_step(self.schedule, x, out, step.t, step.t_prev, self.config.eta, z, self.diagnostics)

    def sample_slice(
        self, noisy: Volume3D, prior: Optional[Volume3D], dose: DoseContext, s: int, shared: LatentSet
    ) -> np.ndarray:
        latents = self._latents(noisy.width, s, shared)
        window = extract_window(noisy, s, self.model.n_slices)
        if self.config.use_prior:
            start = prior.data[s] / self.model.intensity_scale
            x_a = q_sample(self.schedule, start, self.start, latents.eps_a)
            x_b = q_sample(self.schedule, start, self.start, latents.eps_b)
        else:
            x_a, x_b = latents.eps_a.copy(), latents.eps_b.copy()

        for i, step in enumerate(self.plan):
            z = latents.z_stream[i]
            x_next = self._advance(x_a, s, step, window, dose, z)
            if i == 0 and self.config.dual_noise:
                x_next = 0.5 * (x_next + self._advance(x_b, s, step, window, dose, z))
            if not np.all(np.isfinite(x_next)):
                raise SamplingError("non-finite state during reverse sampling", slice_index=s, substep=i)
            x_a = x_next
        return x_a

    def sample_volume(self, noisy: Volume3D, prior: Optional[Volume3D], dose: DoseContext) -> Volume3D:
        if self.config.use_prior:
            if prior is None:
                raise ArgumentError("use_prior is on but no prior volume was given")
            if prior.shape != noisy.shape:
                raise ArgumentError(f"prior shape {prior.shape} differs from noisy shape {noisy.shape}")
        cfg = self.config
        self.diagnostics = SamplerDiagnostics()
        shared = LatentSet.draw(noisy.width, len(self.plan), cfg.seed_a, cfg.seed_b, cfg.seed_z)
        output = np.empty(noisy.shape, dtype=np.float64)

        def work(s: int) -> Tuple[int, np.ndarray]:
            return s, self.sample_slice(noisy, prior, dose, s, shared)

        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                results = list(pool.map(work, range(noisy.slices)))
        else:
            results = [work(s) for s in range(noisy.slices)]
        for s, x in results:
            output[s] = x

        output = np.maximum(output * self.model.intensity_scale, 0.0)
        logger.info(
            "volume_sampled",
            slices=noisy.slices,
            substeps=len(self.plan),
            evaluations_per_slice=self.diagnostics.evaluations.get(0, 0),
            sqrt_clamps=self.diagnostics.sqrt_clamps,
        )
        return Volume3D(
            data=output,
            voxel_size_mm=noisy.voxel_size_mm,
            dose_bq=noisy.dose_bq,
            count_fraction=noisy.count_fraction,
        )


def sample_volume(
    noisy: Volume3D,
    prior: Optional[Volume3D],
    dose: DoseContext,
    config: SamplerConfig,
    model: Predictor,
    schedule: NoiseSchedule,
) -> Volume3D:
    try:
        return VolumeSampler(schedule, model, config).sample_volume(noisy, prior, dose)
    except DosediffError:
        raise
    except ValueError as e:
        raise ArgumentError(str(e)) from e


def sample_full_chain(
    schedule: NoiseSchedule,
    model: Predictor,
    window,
    dose: DoseContext,
    x_start: np.ndarray,
    rng: np.random.Generator,
    start: Optional[int] = None,
) -> np.ndarray:
    """Plain DDPM over every step start..1 with the learned variance (no output clamp)."""
    start = schedule.T if start is None else start
    x = x_start
    for t in range(start, 0, -1):
        out = model.predict(x, window, t, dose)
        z = rng.standard_normal(x.shape)
        x = ddpm_step(schedule, x, out, t, t - 1, z)
    return x
