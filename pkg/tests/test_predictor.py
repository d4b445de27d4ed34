import math

import numpy as np
import pytest
import torch

from dosediff.core.errors import ArgumentError, ConfigurationError
from dosediff.models.domain import DoseContext, SliceWindow
from dosediff.models.schemas.configs import EmbeddingMode
from dosediff.services.phantom_service import extract_window
from dosediff.services.predictor_service import (
    ConditionEmbedding,
    TinyNetPredictor,
    build_denoiser,
    embed_condition,
    encode_condition,
    encode_scalar,
    oracle_eps,
)

LADDER_DOSES = [f * 3.7e8 for f in (0.01, 0.02, 0.05, 0.10, 0.25, 0.50)]


class TestEmbedding:
    def test_encoding_layout(self):
        enc = encode_scalar(0.0, 64)
        assert enc.shape == (1, 64)
        assert np.all(enc[0, :32] == 0.0)
        assert np.all(enc[0, 32:] == 1.0)

    def test_deterministic(self):
        embedder = ConditionEmbedding(64)
        dose = DoseContext(dose_bq=3.7e6, count_fraction=0.01)
        a = embed_condition(10, dose, "paper", embedder)
        b = embed_condition(10, dose, "paper", embedder)
        assert a.shape == (64,)
        assert np.array_equal(a, b)

    def test_paper_mode_at_whole_turn_dose(self):
        # sin(2 pi k) = 0 and cos(2 pi k) = 1: the encoded scalar is t + 1
        dose = 2.0 * math.pi * 3
        enc = encode_condition(np.array([10.0]), np.array([dose]), np.array([1.0]), "paper")
        assert np.allclose(enc, encode_scalar(11.0), atol=1e-12)

    def test_ladder_doses_distinct_before_affine(self):
        encs = [encode_condition(np.array([100]), np.array([d]), np.array([1.0]), "paper") for d in LADDER_DOSES]
        for i in range(len(encs)):
            for j in range(i + 1, len(encs)):
                assert not np.allclose(encs[i], encs[j])

    def test_fraction_mode_adds_second_encoding(self):
        enc = encode_condition(np.array([5]), np.array([1.0]), np.array([0.25]), "fraction")
        assert np.allclose(enc, encode_scalar(5.0) + encode_scalar(250.0))

    def test_none_mode_ignores_dose(self):
        a = encode_condition(np.array([5]), np.array([1e6]), np.array([0.1]), "none")
        b = encode_condition(np.array([5]), np.array([2e8]), np.array([0.5]), "none")
        assert np.array_equal(a, b)

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            encode_condition(np.array([1]), np.array([1.0]), np.array([1.0]), "cosine")

    def test_step_out_of_range(self):
        with pytest.raises(ArgumentError):
            embed_condition(0, DoseContext(dose_bq=1.0), "paper", ConditionEmbedding(64), T=1000)


@pytest.fixture
def fresh_predictor():
    model = build_denoiser(0, n_slices=3, out_channels=2, base_width=4, emb_dim=16)
    return TinyNetPredictor(model, intensity_scale=40.0)


class TestTinyNet:
    def test_zero_initialised_head_outputs_zero(self, fresh_predictor, phantom):
        window = extract_window(phantom, 4, 3)
        out = fresh_predictor.predict(np.ones((16, 16)), window, 10, phantom.dose())
        assert out.eps_map.shape == (16, 16)
        assert np.all(out.eps_map == 0.0)
        assert np.all(out.v_map == 0.0)

    def test_build_is_seeded_and_leaves_global_rng(self):
        torch.manual_seed(123)
        expected = torch.rand(1)
        torch.manual_seed(123)
        a = build_denoiser(5, n_slices=3, base_width=4, emb_dim=16)
        after = torch.rand(1)
        b = build_denoiser(5, n_slices=3, base_width=4, emb_dim=16)
        assert torch.equal(expected, after)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_pure_and_batch_order_independent(self, random_net, phantom):
        predictor = TinyNetPredictor(random_net, intensity_scale=40.0)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 16, 16))
        stacks = np.stack([extract_window(phantom, s, 3).stack for s in (2, 5, 8)])
        doses = [phantom.dose()] * 3
        first = predictor.predict_batch(x, stacks, [5, 50, 500], doses)
        again = predictor.predict_batch(x, stacks, [5, 50, 500], doses)
        perm = [2, 0, 1]
        permuted = predictor.predict_batch(x[perm], stacks[perm], [500, 5, 50], doses)
        for k in range(3):
            assert np.array_equal(first[k].eps_map, again[k].eps_map)
        for new, old in enumerate(perm):
            assert np.allclose(permuted[new].eps_map, first[old].eps_map, atol=1e-6)
            assert np.allclose(permuted[new].v_map, first[old].v_map, atol=1e-6)

    def test_spatial_mismatch(self, fresh_predictor, phantom):
        with pytest.raises(ArgumentError):
            fresh_predictor.predict(np.ones((8, 8)), extract_window(phantom, 0, 3), 10, phantom.dose())

    def test_window_width_mismatch(self, fresh_predictor, phantom):
        with pytest.raises(ArgumentError):
            fresh_predictor.predict(np.ones((16, 16)), extract_window(phantom, 4, 5), 10, phantom.dose())

    @pytest.mark.parametrize("width", [8, 10, 18])
    def test_any_width_is_accepted(self, width):
        model = build_denoiser(0, n_slices=1, base_width=4, emb_dim=16)
        predictor = TinyNetPredictor(model)
        window = SliceWindow(center_index=0, indices=(0,), stack=np.ones((1, width, width)))
        out = predictor.predict(np.ones((width, width)), window, 3, DoseContext(dose_bq=1.0))
        assert out.eps_map.shape == (width, width)
        assert out.v_map.shape == (width, width)

    def test_denoiser_output_matches_input_size(self):
        model = build_denoiser(0, n_slices=1, out_channels=2, base_width=4, emb_dim=16)
        with torch.no_grad():
            model.unet.out.weight.normal_(0.0, 0.1, generator=torch.Generator().manual_seed(4))
        x = torch.rand(1, 2, 10, 10, generator=torch.Generator().manual_seed(5))
        out = model(x, np.array([3]), np.array([1.0]), np.array([1.0]))
        assert out.shape == (1, 2, 10, 10)
        assert torch.isfinite(out).all()

    def test_predictor_requires_two_heads(self):
        with pytest.raises(ConfigurationError):
            TinyNetPredictor(build_denoiser(0, n_slices=1, out_channels=1, base_width=4, emb_dim=16))

    def test_embedding_override_changes_output(self, random_net, phantom):
        window = extract_window(phantom, 4, 3)
        x = np.random.default_rng(0).standard_normal((16, 16))
        plain = TinyNetPredictor(random_net).predict(x, window, 10, phantom.dose())
        blind = TinyNetPredictor(random_net, embedding_override=EmbeddingMode.NONE).predict(x, window, 10, phantom.dose())
        assert not np.allclose(plain.eps_map, blind.eps_map)


class TestOracle:
    def test_hand_value(self, tiny_schedule):
        # alpha_bar_2 = 0.72
        out = oracle_eps(tiny_schedule, np.array([1.0]), 2, mu0=0.0, s0=1.0)
        assert out.eps_map[0] == pytest.approx(0.529150, abs=1e-6)
        assert out.v_map[0] == 0.0

    def test_symmetric_point_is_zero(self, schedule):
        ab = schedule.alpha_bar[299]
        out = oracle_eps(schedule, np.array([np.sqrt(ab) * 3.0]), 300, mu0=3.0, s0=0.5)
        assert out.eps_map[0] == pytest.approx(0.0, abs=1e-12)

    def test_point_mass_limit(self, schedule):
        ab = schedule.alpha_bar[99]
        x = np.array([0.7, -2.0])
        out = oracle_eps(schedule, x, 100, mu0=1.5, s0=1e-9)
        assert np.allclose(out.eps_map, (x - np.sqrt(ab) * 1.5) / np.sqrt(1 - ab), atol=1e-9)

    def test_matches_monte_carlo_regression(self, schedule):
        rng = np.random.default_rng(0)
        t, mu0, s0 = 400, 2.0, 0.7
        ab = schedule.alpha_bar[t - 1]
        x0 = mu0 + s0 * rng.standard_normal(1_000_000)
        eps = rng.standard_normal(x0.size)
        x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
        slope, intercept = np.polyfit(x_t, eps, 1)
        pred = oracle_eps(schedule, np.array([0.0, 1.0]), t, mu0, s0).eps_map
        assert intercept == pytest.approx(pred[0], abs=5e-3)
        assert slope == pytest.approx(pred[1] - pred[0], abs=5e-3)

    def test_non_positive_std(self, schedule):
        with pytest.raises(ArgumentError):
            oracle_eps(schedule, np.zeros(2), 5, 0.0, 0.0)
