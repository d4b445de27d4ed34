import numpy as np
import pytest

from dosediff.core.config import settings
from dosediff.engine.schedule import build_schedule
from dosediff.models.domain import Volume3D
from dosediff.models.schemas.configs import PhantomSpec
from dosediff.services.phantom_service import PhantomService
from dosediff.services.predictor_service import OraclePredictor, build_denoiser


@pytest.fixture(autouse=True)
def _log_dir(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "LOG_DIR", str(tmp_path / "logs"))


@pytest.fixture
def schedule():
    return build_schedule(T=1000, beta_start=1e-4, beta_end=0.02)


@pytest.fixture
def tiny_schedule():
    # beta = (0.1, 0.2): alpha_bar = (0.9, 0.72), beta_tilde_2 = 0.0714286
    return build_schedule(T=2, beta_start=0.1, beta_end=0.2)


@pytest.fixture
def small_spec():
    return PhantomSpec(width=16, slices=12)


@pytest.fixture
def phantom(small_spec):
    return PhantomService().generate(7, small_spec)


def constant_volume(value: float, slices: int = 4, width: int = 8, dose_bq: float = 1.0) -> Volume3D:
    return Volume3D(data=np.full((slices, width, width), value), voxel_size_mm=(2.0, 1.0, 1.0), dose_bq=dose_bq)


@pytest.fixture
def oracle(schedule):
    return OraclePredictor(schedule, mu0=5.0, s0=1.0, n_slices=1)


@pytest.fixture
def random_net():
    """Small predictor with every parameter randomised, including the zero-initialised head."""
    import torch

    model = build_denoiser(3, n_slices=3, out_channels=2, base_width=4, emb_dim=16)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(11)
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(0.1 * torch.randn_like(p))
    return model.eval()
