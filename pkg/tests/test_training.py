import numpy as np
import pytest
import torch
from scipy.stats import chisquare
from torch.func import functional_call

from dosediff.core.errors import ConfigurationError, TrainingError
from dosediff.engine.schedule import build_schedule, posterior_params, q_sample
from dosediff.models.domain import Volume3D
from dosediff.models.schemas.configs import PhantomSpec, TrainConfig
from dosediff.services import training_service
from dosediff.services.predictor_service import build_denoiser
from dosediff.services.training_service import (
    Batch,
    BatchAssembler,
    PairedDataset,
    Trainer,
    assemble_batch,
    build_dataset,
    build_optimizer,
    compute_loss,
    dataset_from_volumes,
    loss_terms,
    sample_training_pair,
    train_step,
    variance_kl,
)
from dosediff.services.phantom_service import degrade_counts, extract_window


def _config(**overrides):
    base = {"batch_size": 4, "steps": 3, "n_slices": 3, "base_width": 4, "fractions": [0.05, 0.5], "seed": 1}
    return TrainConfig(**{**base, **overrides})


def _model(seed=0, n_slices=3, dtype=torch.float32):
    return build_denoiser(seed, n_slices=n_slices, out_channels=2, base_width=4, emb_dim=16).to(dtype)


@pytest.fixture
def dataset(small_spec):
    return build_dataset([1, 2], [0.05, 0.5], small_spec)


class TestPairs:
    def test_singleton_dataset(self):
        clean = Volume3D(data=np.full((1, 8, 8), 3.0), voxel_size_mm=(1, 1, 1), dose_bq=100.0)
        noisy = degrade_counts(clean, 0.5, 0)
        ds = dataset_from_volumes(clean, [noisy])
        example = sample_training_pair(ds, np.random.default_rng(0), 1)
        assert np.array_equal(example.x0, clean.data[0])
        assert np.array_equal(example.window.stack[0], noisy.data[0])

    def test_dose_is_fraction_of_full_dose(self, dataset):
        rng = np.random.default_rng(0)
        for _ in range(20):
            example = sample_training_pair(dataset, rng, 3)
            assert example.dose.dose_bq == pytest.approx(example.dose.count_fraction * 3.7e8)

    def test_slice_indices_uniform(self, dataset):
        rng = np.random.default_rng(3)
        counts = np.zeros(12)
        for _ in range(100_000):
            counts[sample_training_pair(dataset, rng, 1).window.center_index] += 1
        assert chisquare(counts).pvalue > 0.01

    def test_empty_dataset(self):
        with pytest.raises(ConfigurationError):
            sample_training_pair(PairedDataset(pairs=()), np.random.default_rng(0), 1)

    def test_batches_are_reproducible_in_any_order(self, dataset):
        config = _config(steps=6, prefetch=3)
        prefetched = list(BatchAssembler(dataset, config, T=1000))
        direct = [assemble_batch(dataset, config, step, 1000) for step in range(6)]
        for a, b in zip(prefetched, direct):
            assert np.array_equal(a.x0, b.x0)
            assert np.array_equal(a.t, b.t)
            assert np.array_equal(a.eps, b.eps)

    def test_batch_mixes_per_example_doses(self, dataset):
        batch = assemble_batch(dataset, _config(batch_size=64), 0, 1000)
        assert set(np.round(batch.count_fraction, 6)) == {0.05, 0.5}
        assert batch.t.min() >= 1 and batch.t.max() <= 1000


class TestLoss:
    def test_fresh_model_loss_is_noise_energy(self, schedule, phantom):
        rng = np.random.default_rng(0)
        eps = rng.standard_normal((16, 16))
        report = compute_loss(phantom.data[5], extract_window(phantom, 5, 3), phantom.dose(), 300, eps, _model(), schedule)
        assert report.loss_simple == pytest.approx(float(np.mean(eps.astype(np.float32) ** 2)), rel=1e-5)
        assert report.total == pytest.approx(report.loss_simple + 0.001 * report.loss_vlb, rel=1e-6)
        assert report.loss_vlb >= 0.0

    def test_kl_vanishes_for_matching_gaussians(self, schedule):
        rng = np.random.default_rng(0)
        t = np.array([2, 50, 999])
        x0 = torch.as_tensor(rng.standard_normal((3, 4, 4)))
        x_t = q_sample(schedule, x0, t, torch.as_tensor(rng.standard_normal((3, 4, 4))))
        mu_q, _ = posterior_params(schedule, x0, x_t, t)
        log_var = torch.as_tensor(np.log(schedule.beta_tilde_ext[t]))[:, None, None].expand(3, 4, 4)
        kl = variance_kl(schedule, mu_q, mu_q.clone(), log_var, t)
        assert torch.allclose(kl, torch.zeros(3, dtype=kl.dtype), atol=1e-12)

    def test_kl_is_zero_at_first_step(self, schedule):
        mu = torch.ones(2, 3, 3, dtype=torch.float64)
        kl = variance_kl(schedule, mu, mu + 5.0, torch.zeros_like(mu), np.array([1, 1]))
        assert torch.equal(kl, torch.zeros(2, dtype=torch.float64))

    def test_simple_loss_invariant_to_joint_permutation(self):
        rng = np.random.default_rng(0)
        eps, eps_hat = rng.standard_normal(64), rng.standard_normal(64)
        perm = rng.permutation(64)
        assert np.mean((eps - eps_hat) ** 2) == pytest.approx(np.mean((eps[perm] - eps_hat[perm]) ** 2), rel=1e-14)


def _miniature_batch():
    rng = np.random.default_rng(5)
    return Batch(
        x0=rng.uniform(0.0, 2.0, (2, 8, 8)),
        windows=rng.uniform(0.0, 2.0, (2, 1, 8, 8)),
        t=np.array([20, 45]),
        eps=rng.standard_normal((2, 8, 8)),
        dose_bq=np.array([1.0e6, 2.0e7]),
        count_fraction=np.array([0.1, 0.5]),
    )


class _WithParameters:
    """Calls `model` with substitute parameters; `unet` stays visible for the dtype lookup."""

    def __init__(self, model, params):
        self.model, self.params, self.unet = model, params, model.unet

    def __call__(self, *args):
        return functional_call(self.model, self.params, args)


def _unflatten(model, theta):
    params, offset = {}, 0
    for name, p in model.named_parameters():
        params[name] = theta[offset : offset + p.numel()].view_as(p)
        offset += p.numel()
    return params


class TestGradients:
    def test_combined_loss_matches_finite_differences(self, monkeypatch):
        schedule = build_schedule(T=50, beta_start=1e-3, beta_end=0.05)
        model = build_denoiser(2, n_slices=1, out_channels=2, base_width=2, emb_dim=8).double()
        with torch.no_grad():
            gen = torch.Generator().manual_seed(0)
            for p in model.parameters():
                p.copy_(0.2 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
        batch = _miniature_batch()
        flat = torch.cat([p.detach().flatten() for p in model.parameters()]).requires_grad_(True)

        def objective(theta):
            return loss_terms(_WithParameters(model, _unflatten(model, theta)), schedule, batch, 1.0, 0.5)[2]

        recorded = {}
        exact_mean = training_service.mean_from_eps

        def recording_mean(*args):
            recorded["mu"] = exact_mean(*args).detach()
            return recorded["mu"]

        monkeypatch.setattr(training_service, "mean_from_eps", recording_mean)
        (production,) = torch.autograd.grad(objective(flat), flat)

        # The variance term holds the reverse mean fixed; pin it at the base point
        monkeypatch.setattr(training_service, "mean_from_eps", lambda *args: recorded["mu"])
        (pinned,) = torch.autograd.grad(objective(flat), flat)
        assert torch.allclose(production, pinned, rtol=0, atol=1e-14)
        assert torch.autograd.gradcheck(objective, (flat,), eps=1e-6, atol=1e-7, rtol=1e-4)

    def test_variance_term_ignores_the_reverse_mean(self):
        schedule = build_schedule(T=50, beta_start=1e-3, beta_end=0.05)
        model = build_denoiser(2, n_slices=1, out_channels=2, base_width=2, emb_dim=8).double()
        with torch.no_grad():
            model.unet.out.weight.normal_(0.0, 0.1, generator=torch.Generator().manual_seed(1))
        _, loss_vlb, _ = loss_terms(model, schedule, _miniature_batch(), 1.0, 0.5)
        loss_vlb.backward()
        # Only the v channel of the head receives gradient from the variance term
        assert torch.all(model.unet.out.weight.grad[0] == 0)
        assert torch.any(model.unet.out.weight.grad[1] != 0)

    def test_variance_head_idle_without_variance_weight(self, schedule, dataset):
        model = _model()
        config = _config(lambda_vlb=0.0)
        model.zero_grad()
        batch = assemble_batch(dataset, config, 0, schedule.T)
        _, _, total = loss_terms(model, schedule, batch, config.intensity_scale, 0.0)
        total.backward()
        assert torch.all(model.unet.out.weight.grad[1] == 0)
        assert model.unet.out.bias.grad[1] == 0
        assert torch.any(model.unet.out.weight.grad[0] != 0)


class TestTrainStep:
    def test_identical_seeds_identical_trajectories(self, schedule, dataset):
        config = _config()
        a, b = _model(), _model()
        Trainer(a, schedule, config).train(dataset)
        Trainer(b, schedule, config).train(dataset)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_zero_learning_rate_leaves_parameters(self, schedule, dataset):
        model = _model()
        before = [p.detach().clone() for p in model.parameters()]
        reports = Trainer(model, schedule, _config(lr=0.0)).train(dataset)
        assert len(reports) == 3
        for p, q in zip(model.parameters(), before):
            assert torch.equal(p, q)

    def test_negative_learning_rate(self, schedule):
        with pytest.raises(ConfigurationError):
            build_optimizer(_model(), -1e-3)

    def test_window_width_must_match_model(self, schedule):
        with pytest.raises(ConfigurationError):
            Trainer(_model(n_slices=5), schedule, _config())

    def test_non_finite_loss(self, schedule, dataset):
        model = _model()
        with torch.no_grad():
            model.unet.out.bias.fill_(float("nan"))
        config = _config()
        batch = assemble_batch(dataset, config, 0, schedule.T)
        with pytest.raises(TrainingError) as info:
            train_step(batch, model, build_optimizer(model, config.lr), config, schedule, step=7)
        assert info.value.details["step"] == 7

    def test_training_log_written(self, schedule, dataset, tmp_path):
        path = tmp_path / "log.csv"
        Trainer(_model(), schedule, _config(), log_path=path).train(dataset)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,loss_simple,loss_vlb,total,wall_ms"
        assert len(lines) == 4

    @pytest.mark.slow
    def test_smoke_training_halves_the_loss(self, schedule, small_spec):
        data = build_dataset([1], [0.1, 0.5], small_spec)
        config = _config(steps=500, lr=2e-3, batch_size=8, fractions=[0.1, 0.5])
        reports = Trainer(_model(), schedule, config).train(data)
        first = np.mean([r.loss_simple for r in reports[:20]])
        last = np.mean([r.loss_simple for r in reports[-20:]])
        assert last <= 0.5 * first

    def test_width_not_divisible_by_four(self, schedule):
        dataset = build_dataset([1], [0.25], PhantomSpec(width=10, slices=8))
        model = _model()
        reports = Trainer(model, schedule, _config(fractions=[0.25])).train(dataset)
        assert len(reports) == 3
        assert all(np.isfinite(r.total) for r in reports)
