"""Command-line surface: phantom, degrade, train, train-prior, sample, eval, ablate, export."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import orjson
import structlog

from dosediff.core.config import format_flat_config, load_config_file
from dosediff.core.errors import ArgumentError, ConfigurationError, DosediffError
from dosediff.engine.pipeline import DenoisePipeline, PipelineContext, PipelineStage, StageTimingMiddleware
from dosediff.engine.sampler import VolumeSampler
from dosediff.engine.schedule import NoiseSchedule, build_schedule
from dosediff.infrastructure.checkpoint_store import load_predictor, load_prior, save_checkpoint, save_prior
from dosediff.infrastructure.volume_store import export_pgm, read_volume, volume_paths, write_volume
from dosediff.models.domain import Volume3D
from dosediff.models.schemas.configs import (
    EmbeddingMode,
    PhantomSpec,
    PriorTrainConfig,
    RunConfig,
    SamplerConfig,
    build_config,
)
from dosediff.models.schemas.reports import MetricsRow, RunManifest
from dosediff.services.metrics_service import evaluate, mask_black, write_metrics_csv
from dosediff.services.phantom_service import PhantomService
from dosediff.services.predictor_service import Predictor
from dosediff.services.prior_service import PriorBackend, denoise, train_denoiser
from dosediff.services.training_service import (
    PairedDataset,
    Trainer,
    build_dataset,
    build_predictor_model,
    dataset_from_volumes,
)
from dosediff.utils.seeding import digest_outputs

logger = structlog.get_logger(__name__)

ABLATION_WINDOWS = (1, 9, 21, 31, 41)


class CliArgumentParser(argparse.ArgumentParser):
    """Raises instead of printing usage so errors stay single-line JSON."""

    def error(self, message: str):
        raise ArgumentError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

# flag attribute -> flat config key
FLAG_KEYS: Dict[str, str] = {
    "width": "width",
    "slices": "slices",
    "steps": "sampler.num_steps",
    "ddpm_every": "sampler.ddpm_every",
    "t_prime": "sampler.T_prime",
    "threads": "sampler.threads",
    "n_slices": "train.n_slices",
    "train_steps": "train.steps",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "fraction": "fraction",
    "phantoms": "phantoms",
    "variants": "variants",
    "volume_id": "volume_id",
    "noisy": "noisy",
}

# flags naming files the command reads
PATH_FLAGS = ("input", "reference", "test", "prior", "model", "models", "clean")

# store_true flag -> flat keys it sets
SWITCHES: Dict[str, Dict[str, Any]] = {
    "no_prior": {"sampler.use_prior": False},
    "no_fix_eps": {"sampler.fix_latents": False, "sampler.fix_step_noise": False},
    "single_eps": {"sampler.dual_noise": False},
    "no_dose": {"sampler.embedding_override": EmbeddingMode.NONE.value},
    "pgm": {"pgm": True},
    "train_missing": {"train_missing": True},
}


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then flags; sampler seeds derive from --seed unless the file pins them."""
    values: Dict[str, Any] = load_config_file(args.config) if getattr(args, "config", None) else {}
    values["seed"] = args.seed
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = value
    for attr in PATH_FLAGS:
        value = getattr(args, attr, None)
        if value is not None:
            values[f"paths.{attr}"] = value
    for attr, keys in SWITCHES.items():
        if getattr(args, attr, False):
            values.update(keys)
    for key, derived in zip(("seed_a", "seed_b", "seed_z"), np.random.SeedSequence(args.seed).generate_state(3)):
        values.setdefault(f"sampler.{key}", int(derived))
    values.setdefault("train.seed", args.seed)
    return RunConfig.from_flat(values)


def make_schedule(run: RunConfig) -> NoiseSchedule:
    return build_schedule(T=run.schedule_T, beta_start=run.beta_start, beta_end=run.beta_end)


def phantom_spec(run: RunConfig) -> PhantomSpec:
    return build_config(PhantomSpec, {"width": run.width, "slices": run.slices})


def _input_files(path: str) -> List[Path]:
    p = Path(path)
    if p.is_dir():
        return sorted(p.glob("*.ckpt"))
    if p.is_file():
        return [p]
    return [f for f in volume_paths(p) if f.is_file()]


def input_digests(run: RunConfig) -> Dict[str, str]:
    """role/file name -> digest for every file the run read."""
    named = [(role, path) for role, path in run.paths.items()]
    named += [("noisy", path) for path in run.noisy or []]
    digests: Dict[str, str] = {}
    for role, path in named:
        for name, digest in digest_outputs(_input_files(path)).items():
            digests[f"{role}/{name}"] = digest
    return digests


def write_manifest(out: Path, command: str, run: RunConfig, outputs: Sequence[Path]) -> Path:
    config_path = out / "config.txt"
    config_path.write_text(format_flat_config(run.to_flat()), encoding="utf-8")
    manifest = RunManifest(
        command=command,
        config=run.to_flat(),
        seeds={
            "seed": run.seed,
            "train": run.train.seed,
            "eps_a": run.sampler.seed_a,
            "eps_b": run.sampler.seed_b,
            "z": run.sampler.seed_z,
        },
        inputs=input_digests(run),
        outputs=digest_outputs([*outputs, config_path]),
    )
    path = out / "manifest.json"
    path.write_bytes(orjson.dumps(manifest.model_dump(), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
    return path


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Optional[str], flag: str) -> Path:
    if not path:
        raise ArgumentError(f"{flag} is required")
    p = Path(path)
    if not p.exists() and not Path(str(p) + ".vol.json").exists():
        raise ArgumentError(f"{flag}: no such file {path}")
    return p


def _path(run: RunConfig, role: str) -> Path:
    return _require(run.paths.get(role), f"--{role}")


# ---------------------------------------------------------------------------
# Pipeline assembly
# ---------------------------------------------------------------------------

def build_pipeline(
    schedule: NoiseSchedule,
    predictor: Predictor,
    sampler_config: SamplerConfig,
    prior_backend: Optional[PriorBackend],
    trace: bool = True,
) -> DenoisePipeline:
    pipeline = DenoisePipeline(config=sampler_config.model_dump())

    def prior_node(ctx: PipelineContext) -> PipelineContext:
        if sampler_config.use_prior and ctx.prior is None:
            ctx.prior = denoise(prior_backend, ctx.noisy)
        return ctx

    def sample_node(ctx: PipelineContext) -> PipelineContext:
        sampler = VolumeSampler(schedule, predictor, sampler_config)
        ctx.output = sampler.sample_volume(ctx.noisy, ctx.prior, ctx.dose)
        ctx.metadata["evaluations_per_slice"] = dict(sampler.diagnostics.evaluations)
        ctx.metadata["sqrt_clamps"] = sampler.diagnostics.sqrt_clamps
        return ctx

    def evaluate_node(ctx: PipelineContext) -> PipelineContext:
        if ctx.reference is not None:
            ctx.report = evaluate(ctx.reference, ctx.output)
        return ctx

    if sampler_config.use_prior:
        if prior_backend is None:
            raise ConfigurationError("sampling with use_prior needs a prior backend")
        pipeline.register_node(PipelineStage.PRIOR, prior_node)
    pipeline.register_node(PipelineStage.SAMPLE, sample_node)
    pipeline.register_node(PipelineStage.EVALUATE, evaluate_node)
    pipeline.add_middleware(StageTimingMiddleware(trace=trace))
    return pipeline


def resolve_prior(run: RunConfig) -> PriorBackend:
    if run.paths.get("prior"):
        return load_prior(_path(run, "prior"))
    return PriorBackend.smoothing(run.prior_sigma_mm)


def training_dataset(run: RunConfig) -> PairedDataset:
    if run.paths.get("clean"):
        clean = read_volume(_path(run, "clean"))
        noisy = [read_volume(_require(p, "--noisy")) for p in (run.noisy or [])]
        if not noisy:
            raise ArgumentError("--clean needs at least one --noisy volume")
        return dataset_from_volumes(clean, noisy)
    # Training phantoms use seeds disjoint from the evaluation phantom (--seed itself)
    seeds = [run.seed + 1 + k for k in range(run.phantoms)]
    return build_dataset(seeds, run.fractions, phantom_spec(run), degrade_seed=run.seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_phantom(args: argparse.Namespace) -> int:
    run = resolve_run_config(args)
    out = _out_dir(args)
    vol = PhantomService().generate(run.seed, phantom_spec(run))
    paths = write_volume(vol, out / "phantom")
    write_manifest(out, "phantom", run, paths)
    logger.info("phantom_written", path=str(paths[0]), shape=vol.shape)
    return 0


def cmd_degrade(args: argparse.Namespace) -> int:
    run = resolve_run_config(args)
    if run.fraction is None:
        raise ArgumentError("--fraction is required")
    vol = read_volume(_path(run, "input"))
    noisy = PhantomService().degrade(vol, run.fraction, run.seed)
    out = _out_dir(args)
    paths = write_volume(noisy, out / f"degraded_f{run.fraction:g}")
    write_manifest(out, "degrade", run, paths)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run = resolve_run_config(args)
    out = _out_dir(args)
    dataset = training_dataset(run)
    model = build_predictor_model(run.train)
    Trainer(model, make_schedule(run), run.train, log_path=out / "training_log.csv").train(dataset)
    ckpt = save_checkpoint(
        model, out / f"model_n{run.train.n_slices}.ckpt", kind="predictor", intensity_scale=run.train.intensity_scale
    )
    write_manifest(out, "train", run, [ckpt, out / "training_log.csv"])
    return 0


def cmd_train_prior(args: argparse.Namespace) -> int:
    run = resolve_run_config(args)
    out = _out_dir(args)
    config = build_config(PriorTrainConfig, {**run.train.model_dump(), "lambda_vlb": 0.0})
    backend = train_denoiser(training_dataset(run), config, log_path=out / "prior_training_log.csv")
    ckpt = save_prior(backend, out / "prior.ckpt")
    write_manifest(out, "train-prior", run, [ckpt, out / "prior_training_log.csv"])
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    run = resolve_run_config(args)
    out = _out_dir(args)
    noisy = read_volume(_path(run, "input"))
    predictor = load_predictor(_path(run, "model"), run.sampler.embedding_override)
    reference = read_volume(_path(run, "reference")) if run.paths.get("reference") else None
    prior = resolve_prior(run) if run.sampler.use_prior else None

    ctx = build_pipeline(make_schedule(run), predictor, run.sampler, prior).execute(noisy, reference=reference)
    outputs: List[Path] = list(write_volume(ctx.output, out / "sampled"))
    if ctx.report is not None:
        row = MetricsRow(volume_id="sampled", fraction=noisy.count_fraction, report=ctx.report)
        outputs.append(write_metrics_csv(out / "metrics.csv", [row]))
    if run.pgm:
        window = _masked_window(reference) if reference is not None else None
        outputs.extend(export_pgm(ctx.output, out / "pgm", window))
    write_manifest(out, "sample", run, outputs)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run = resolve_run_config(args)
    out = _out_dir(args)
    ref = read_volume(_path(run, "reference"))
    test = read_volume(_path(run, "test"))
    fraction = run.fraction if run.fraction is not None else test.count_fraction
    volume_id = run.volume_id or Path(run.paths["test"]).name
    row = MetricsRow(volume_id=volume_id, fraction=fraction, report=evaluate(ref, test))
    path = write_metrics_csv(out / "metrics.csv", [row])
    write_manifest(out, "eval", run, [path])
    return 0


def _masked_window(reference: Volume3D) -> tuple:
    masked = reference.data[mask_black(reference)]
    return float(masked.min()), float(masked.max())


def cmd_export(args: argparse.Namespace) -> int:
    run = resolve_run_config(args)
    out = _out_dir(args)
    vol = read_volume(_path(run, "input"))
    window = _masked_window(read_volume(_path(run, "reference"))) if run.paths.get("reference") else None
    paths = export_pgm(vol, out / "pgm", window)
    write_manifest(out, "export", run, paths)
    return 0


def ablation_variants(run: RunConfig) -> Dict[str, Dict[str, Any]]:
    """Variant name -> (sampler overrides, window width)."""
    base = run.train.n_slices
    variants: Dict[str, Dict[str, Any]] = {
        "default": {"sampler": {}, "n": base},
        "no_prior": {"sampler": {"use_prior": False}, "n": base},
        "no_fix_eps": {"sampler": {"fix_latents": False, "fix_step_noise": False}, "n": base},
        "single_eps": {"sampler": {"dual_noise": False}, "n": base},
        "no_dose": {"sampler": {"embedding_override": EmbeddingMode.NONE}, "n": base},
        "ddim_2d5": {
            "sampler": {
                "use_prior": False,
                "fix_latents": False,
                "fix_step_noise": False,
                "dual_noise": False,
                "num_steps": 50,
                "ddpm_every": 51,
            },
            "n": base,
        },
    }
    for n in ABLATION_WINDOWS:
        if n != base:
            variants[f"n_{n}"] = {"sampler": {}, "n": n}
    return variants


def _ablation_model(run: RunConfig, out: Path, n: int, cache: Dict[int, Optional[Path]]) -> Optional[Path]:
    if n in cache:
        return cache[n]
    path = Path(run.paths["models"]) / f"model_n{n}.ckpt"
    if not path.exists():
        if not run.train_missing:
            logger.warning("ablation_model_missing", n=n, path=str(path))
            cache[n] = None
            return None
        config = build_config(type(run.train), {**run.train.model_dump(), "n_slices": n})
        model = build_predictor_model(config)
        Trainer(model, make_schedule(run), config).train(training_dataset(run))
        path = save_checkpoint(model, out / "models" / f"model_n{n}.ckpt", intensity_scale=config.intensity_scale)
    cache[n] = path
    return path


def cmd_ablate(args: argparse.Namespace) -> int:
    run = resolve_run_config(args)
    out = _out_dir(args)
    if not run.paths.get("models"):
        raise ArgumentError("--models is required")
    schedule = make_schedule(run)
    service = PhantomService()
    reference = service.generate(run.seed, phantom_spec(run))
    prior_backend = resolve_prior(run)
    variants = ablation_variants(run)
    if run.variants:
        unknown = set(run.variants) - set(variants)
        if unknown:
            raise ArgumentError(f"unknown ablation variants {sorted(unknown)}")
        variants = {k: v for k, v in variants.items() if k in run.variants}

    rows: List[MetricsRow] = []
    models: Dict[int, Optional[Path]] = {}
    for j, fraction in enumerate(run.fractions):
        noisy = service.degrade(reference, fraction, seed=run.seed * 1_000_003 + 7_919 + j)
        rows.append(MetricsRow(volume_id="input", fraction=fraction, report=evaluate(reference, noisy)))
        prior_volume = denoise(prior_backend, noisy)
        for name, variant in variants.items():
            ckpt = _ablation_model(run, out, variant["n"], models)
            if ckpt is None:
                continue
            sampler_config = build_config(SamplerConfig, {**run.sampler.model_dump(), **variant["sampler"]})
            predictor = load_predictor(ckpt, sampler_config.embedding_override)
            pipeline = build_pipeline(schedule, predictor, sampler_config, prior_backend, trace=False)
            ctx = pipeline.execute(
                noisy, reference=reference, prior=prior_volume if sampler_config.use_prior else None
            )
            rows.append(MetricsRow(volume_id=name, fraction=fraction, report=ctx.report))
            logger.info("ablation_row", variant=name, fraction=fraction, psnr=ctx.report.psnr)

    if len(rows) == len(run.fractions):
        raise ConfigurationError(f"no ablation variant could run: no model checkpoints under {run.paths['models']}")
    path = write_metrics_csv(out / "ablation.csv", rows)
    trained = sorted((out / "models").glob("*.ckpt")) if run.train_missing else []
    write_manifest(out, "ablate", run, [path, *trained])
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, required=True)
    parser.add_argument("--config", default=None)
    parser.add_argument("--out", required=True)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--width", type=int, default=None)
    parser.add_argument("--slices", type=int, default=None)


def _sampling_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--ddpm-every", type=int, default=None)
    parser.add_argument("--t-prime", type=int, default=None)
    parser.add_argument("--no-prior", action="store_true")
    parser.add_argument("--no-fix-eps", action="store_true")
    parser.add_argument("--single-eps", action="store_true")
    parser.add_argument("--no-dose", action="store_true")
    parser.add_argument("--prior", default=None, help="prior checkpoint; Gaussian smoothing when omitted")


def _training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-slices", type=int, default=None, help="window width; for ablate, the base model's")
    parser.add_argument("--train-steps", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--phantoms", type=int, default=None)


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "phantom": cmd_phantom,
    "degrade": cmd_degrade,
    "train": cmd_train,
    "train-prior": cmd_train_prior,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    """File arguments may come from --config (`paths.<flag>`) instead of the command line."""
    parser = CliArgumentParser(prog="dosediff", description="Dose-aware diffusion denoising for 3D PET volumes")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliArgumentParser)

    p = sub.add_parser("phantom", help="generate a synthetic activity phantom")
    _common(p)

    p = sub.add_parser("degrade", help="Poisson-thin a volume to a count fraction")
    _common(p)
    p.add_argument("--input", default=None)
    p.add_argument("--fraction", type=float, default=None)

    for name in ("train", "train-prior"):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on phantoms or given volume pairs")
        _common(p)
        _training_flags(p)
        p.add_argument("--clean", default=None)
        p.add_argument("--noisy", nargs="+", default=None)

    p = sub.add_parser("sample", help="denoise a volume with the slice-wise diffusion sampler")
    _common(p)
    _sampling_flags(p)
    p.add_argument("--input", default=None)
    p.add_argument("--model", default=None, help="predictor checkpoint; it fixes the window width")
    p.add_argument("--reference", default=None)
    p.add_argument("--pgm", action="store_true")

    p = sub.add_parser("eval", help="metrics of a test volume against a reference")
    _common(p)
    p.add_argument("--reference", default=None)
    p.add_argument("--test", default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--volume-id", default=None)

    p = sub.add_parser("ablate", help="sample + evaluate every ablation variant over the fraction ladder")
    _common(p)
    _sampling_flags(p)
    _training_flags(p)
    p.add_argument("--models", default=None, help="directory of model_n<N>.ckpt checkpoints")
    p.add_argument("--variants", nargs="+", default=None)
    p.add_argument("--train-missing", action="store_true")

    p = sub.add_parser("export", help="write per-slice 8-bit graymaps")
    _common(p)
    p.add_argument("--input", default=None)
    p.add_argument("--reference", default=None)
    return parser


def _emit_error(payload: Dict[str, Any]) -> None:
    sys.stderr.write(orjson.dumps(payload).decode() + "\n")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse and dispatch; errors become one JSON line on stderr and a nonzero status."""
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except DosediffError as e:
        _emit_error(e.to_dict())
        return 2
    except FileNotFoundError as e:
        _emit_error({"error": "FileNotFoundError", "message": str(e)})
        return 2
    except Exception as e:
        logger.exception("command_failed")
        _emit_error({"error": type(e).__name__, "message": str(e)})
        return 1
