"""Paired-data sampling, the epsilon + learned-variance objective, and the optimisation loop."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
import torch

from dosediff.core.config import settings
from dosediff.core.errors import ConfigurationError, TrainingError
from dosediff.core.logging import TrainingLogWriter
from dosediff.engine.sampler import log_variance_from_v, mean_from_eps
from dosediff.engine.schedule import NoiseSchedule, as_column, posterior_params, q_sample
from dosediff.models.domain import DoseContext, SliceWindow, Volume3D
from dosediff.models.schemas.configs import PhantomSpec, TrainConfig
from dosediff.models.schemas.reports import LossReport
from dosediff.services.phantom_service import PhantomService, extract_window
from dosediff.services.predictor_service import ConditionalDenoiser, build_denoiser
from dosediff.utils.seeding import stream

logger = structlog.get_logger(__name__)

LOG_EVERY = 50


@dataclass(frozen=True)
class VolumePair:
    clean: Volume3D
    degraded: Dict[float, Volume3D]


@dataclass(frozen=True)
class PairedDataset:
    pairs: Tuple[VolumePair, ...]

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class TrainingExample:
    x0: np.ndarray
    window: SliceWindow
    dose: DoseContext


@dataclass
class Batch:
    """Stacked examples plus their per-example step indices and noise."""

    x0: np.ndarray
    windows: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    dose_bq: np.ndarray
    count_fraction: np.ndarray


def build_dataset(
    seeds: Sequence[int],
    fractions: Sequence[float],
    spec: Optional[PhantomSpec] = None,
    degrade_seed: int = 0,
) -> PairedDataset:
    """One phantom per seed, degraded at every fraction of the ladder."""
    service = PhantomService()
    pairs = []
    for k, seed in enumerate(seeds):
        clean = service.generate(seed, spec)
        degraded = {
            float(f): service.degrade(clean, float(f), seed=degrade_seed * 1_000_003 + k * 1_009 + j)
            for j, f in enumerate(fractions)
        }
        pairs.append(VolumePair(clean=clean, degraded=degraded))
    logger.info("dataset_built", volumes=len(pairs), fractions=list(fractions))
    return PairedDataset(pairs=tuple(pairs))


def dataset_from_volumes(clean: Volume3D, degraded: Sequence[Volume3D]) -> PairedDataset:
    for vol in degraded:
        if vol.shape != clean.shape:
            raise ConfigurationError(f"degraded volume shape {vol.shape} differs from clean {clean.shape}")
    return PairedDataset(pairs=(VolumePair(clean=clean, degraded={v.count_fraction: v for v in degraded}),))


def sample_training_pair(dataset: PairedDataset, rng: np.random.Generator, n_slices: int) -> TrainingExample:
    """Uniform draw of (volume pair, fraction, slice index)."""
    if len(dataset) == 0 or any(not p.degraded for p in dataset.pairs):
        raise ConfigurationError("training dataset is empty")
    pair = dataset.pairs[int(rng.integers(len(dataset)))]
    fractions = sorted(pair.degraded)
    noisy = pair.degraded[fractions[int(rng.integers(len(fractions)))]]
    s = int(rng.integers(pair.clean.slices))
    return TrainingExample(x0=pair.clean.data[s], window=extract_window(noisy, s, n_slices), dose=noisy.dose())


def assemble_batch(dataset: PairedDataset, config: TrainConfig, step: int, T: int) -> Batch:
    """Deterministic per (seed, step) so prefetching never changes what a step sees."""
    rng = stream(config.seed, step)
    examples = [sample_training_pair(dataset, rng, config.n_slices) for _ in range(config.batch_size)]
    t = rng.integers(1, T + 1, size=config.batch_size)
    x0 = np.stack([e.x0 for e in examples])
    eps = rng.standard_normal(x0.shape)
    return Batch(
        x0=x0,
        windows=np.stack([e.window.stack for e in examples]),
        t=t,
        eps=eps,
        dose_bq=np.array([e.dose.dose_bq for e in examples]),
        count_fraction=np.array([e.dose.count_fraction for e in examples]),
    )


class BatchAssembler:
    """Assembles batches ahead of the training loop; yields them in step order."""

    def __init__(self, dataset: PairedDataset, config: TrainConfig, T: int):
        self.dataset = dataset
        self.config = config
        self.T = T

    def __iter__(self) -> Iterator[Batch]:
        return self.batches(0, self.config.steps)

    def batches(self, first: int, count: int) -> Iterator[Batch]:
        workers = max(1, self.config.prefetch)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            window: List = []
            step = first
            while step < first + count or window:
                while step < first + count and len(window) < workers:
                    window.append(pool.submit(assemble_batch, self.dataset, self.config, step, self.T))
                    step += 1
                yield window.pop(0).result()


def variance_kl(
    schedule: NoiseSchedule,
    mu_q: torch.Tensor,
    mu_theta: torch.Tensor,
    log_var_theta: torch.Tensor,
    t: np.ndarray,
) -> torch.Tensor:
    """KL(N(mu_q, beta_tilde_t) || N(mu_theta, sigma^2)), element mean per example, 0 at t = 1."""
    t = np.asarray(t)
    kl = torch.zeros(len(t), dtype=mu_q.dtype, device=mu_q.device)
    keep = np.flatnonzero(t > 1)
    if keep.size == 0:
        return kl
    idx = torch.as_tensor(keep, device=mu_q.device)
    log_var_q = as_column(np.log(schedule.beta_tilde_ext[t[keep]]), mu_q)
    lv = log_var_theta[idx]
    diff2 = (mu_q[idx] - mu_theta[idx]) ** 2
    term = 0.5 * (lv - log_var_q + (torch.exp(log_var_q) + diff2) * torch.exp(-lv) - 1.0)
    return kl.index_put((idx,), term.flatten(1).mean(dim=1))


def loss_terms(
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    batch: Batch,
    intensity_scale: float = 1.0,
    lambda_vlb: float = 0.0,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(loss_simple, loss_vlb, total) as differentiable scalars."""
    dtype = model.unet.out.weight.dtype
    x0 = torch.as_tensor(batch.x0 / intensity_scale, dtype=dtype)
    eps = torch.as_tensor(batch.eps, dtype=dtype)
    windows = torch.as_tensor(batch.windows / intensity_scale, dtype=dtype)
    x_t = q_sample(schedule, x0, batch.t, eps)

    out = model(torch.cat([windows, x_t[:, None]], dim=1), batch.t, batch.dose_bq, batch.count_fraction)
    eps_hat, v = out[:, 0], out[:, 1]
    loss_simple = torch.mean((eps - eps_hat) ** 2)

    # Stop-gradient on the mean: the variance term only trains v
    mu_q, _ = posterior_params(schedule, x0, x_t, batch.t)
    mu_theta = mean_from_eps(schedule, x_t, batch.t, eps_hat).detach()
    loss_vlb = variance_kl(schedule, mu_q, mu_theta, log_variance_from_v(schedule, v, batch.t), batch.t).mean()

    total = loss_simple + lambda_vlb * loss_vlb if lambda_vlb > 0 else loss_simple
    return loss_simple, loss_vlb, total


def _report(loss_simple, loss_vlb, total) -> LossReport:
    return LossReport(loss_simple=float(loss_simple), loss_vlb=float(loss_vlb), total=float(total))


def compute_loss(
    x0: np.ndarray,
    window: SliceWindow,
    dose: DoseContext,
    t: int,
    eps: np.ndarray,
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    intensity_scale: float = 1.0,
    lambda_vlb: float = 0.001,
) -> LossReport:
    schedule.check_step(t)
    batch = Batch(
        x0=x0[None],
        windows=window.stack[None],
        t=np.array([t]),
        eps=eps[None],
        dose_bq=np.array([dose.dose_bq]),
        count_fraction=np.array([dose.count_fraction]),
    )
    with torch.no_grad():
        terms = loss_terms(model, schedule, batch, intensity_scale, lambda_vlb)
    report = _report(*terms)
    if not math.isfinite(report.total):
        raise TrainingError("non-finite loss", step=None, t=t)
    return report


def train_step(
    batch: Batch,
    model: ConditionalDenoiser,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    schedule: NoiseSchedule,
    step: Optional[int] = None,
) -> LossReport:
    """One Adam update; the report holds the pre-update losses."""
    if config.lr < 0 or any(g["lr"] < 0 for g in optimizer.param_groups):
        raise ConfigurationError(f"learning rate must be >= 0, got {config.lr}")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss_simple, loss_vlb, total = loss_terms(model, schedule, batch, config.intensity_scale, config.lambda_vlb)
    report = _report(loss_simple.detach(), loss_vlb.detach(), total.detach())
    if not all(math.isfinite(x) for x in (report.loss_simple, report.loss_vlb, report.total)):
        raise TrainingError(
            "training diverged: non-finite loss",
            step=step,
            loss_simple=report.loss_simple,
            loss_vlb=report.loss_vlb,
            t_min=int(batch.t.min()),
            t_max=int(batch.t.max()),
        )
    total.backward()
    optimizer.step()
    return report


def build_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Optimizer:
    if lr < 0:
        raise ConfigurationError(f"learning rate must be >= 0, got {lr}")
    return torch.optim.Adam(model.parameters(), lr=lr)


class Trainer:
    """Runs train_step over prefetched batches and appends the CSV training log."""

    def __init__(
        self,
        model: ConditionalDenoiser,
        schedule: NoiseSchedule,
        config: TrainConfig,
        log_path: Optional[Union[str, Path]] = None,
    ):
        if model.n_slices != config.n_slices:
            raise ConfigurationError(f"model expects {model.n_slices} slices, config has {config.n_slices}")
        self.model = model
        self.schedule = schedule
        self.config = config
        self.optimizer = build_optimizer(model, config.lr)
        self.log = TrainingLogWriter(log_path) if log_path else None

    def train(self, dataset: PairedDataset) -> List[LossReport]:
        reports = []
        assembler = BatchAssembler(dataset, self.config, self.schedule.T)
        for step, batch in enumerate(assembler):
            started = time.perf_counter()
            report = train_step(batch, self.model, self.optimizer, self.config, self.schedule, step)
            wall_ms = (time.perf_counter() - started) * 1000.0
            reports.append(report)
            if self.log:
                self.log.append(step, report.loss_simple, report.loss_vlb, report.total, wall_ms)
            if step % LOG_EVERY == 0 or step == self.config.steps - 1:
                logger.info("training_step", step=step, loss_simple=report.loss_simple, loss_vlb=report.loss_vlb)
        self.model.eval()
        return reports


def build_predictor_model(config: TrainConfig) -> ConditionalDenoiser:
    return build_denoiser(
        config.seed,
        n_slices=config.n_slices,
        out_channels=2,
        base_width=config.base_width,
        emb_dim=settings.EMBEDDING_DIM,
        mode=config.embedding_mode,
    )
