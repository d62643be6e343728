import numpy as np
import pytest
import torch

from rigface_lab import synthgen
from rigface_lab.diffusion import ModelConfig, UNetConfig

MICRO_UNET = dict(in_channels=48, base_channels=8, channel_multipliers=(1, 2), attention_levels=(1,),
                  time_embed_dim=16, expr_dim=8, heads=2, context_dim=8, norm_groups=4)


@pytest.fixture
def micro_unet():
    return UNetConfig(**MICRO_UNET)


@pytest.fixture
def micro_config():
    def make(**kw):
        kw.setdefault("unet", UNetConfig(**MICRO_UNET))
        return ModelConfig(**kw)
    return make


@pytest.fixture(scope="session")
def small_pairs():
    return [synthgen.generate_pair(3, i, (32, 32)) for i in range(4)]


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    synthgen.build_dataset(5, 4, (32, 32), root)
    return root


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def rand_batch(cfg: UNetConfig, b=2, size=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    c = cfg.in_channels
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64).to(dtype)  # noqa: E731
    return {"target": r(b, c, size, size), "id": r(b, c, size, size), "cond": r(b, 2 * c, size, size),
            "psi": r(b, cfg.expr_dim), "pose": r(b, 3), "light": r(b, 9)}


def rng(seed=0):
    return np.random.default_rng(seed)
