import numpy as np
import pytest
import torch

from fgl.datagen import build_dataset
from fgl.domain import ToyConfig


@pytest.fixture(scope="session")
def micro8(tmp_path_factory):
    """8 forged images (medium masks), the overfit micro-set."""
    return build_dataset(tmp_path_factory.mktemp("micro8"), 8, 0, seed=7)


@pytest.fixture(scope="session")
def balanced16(tmp_path_factory):
    """8 forged + 8 authentic images for the detection overfit run."""
    return build_dataset(tmp_path_factory.mktemp("bal16"), 8, 8, seed=11)


@pytest.fixture(scope="session")
def tiny4(tmp_path_factory):
    return build_dataset(tmp_path_factory.mktemp("tiny4"), 2, 2, seed=3)


@pytest.fixture
def cfg64():
    return ToyConfig(precision="float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def overfit_run(micro8, tmp_path_factory):
    """200 full-batch steps on the micro-set (the overfit sanity run)."""
    import time

    from fgl.flexpert import train_flexpert

    ckpt = tmp_path_factory.mktemp("overfit") / "flexpert.fgl"
    t0 = time.perf_counter()
    res = train_flexpert(micro8, ToyConfig(), 200, checkpoint_out=ckpt)
    res.extra["seconds"] = time.perf_counter() - t0
    return res
