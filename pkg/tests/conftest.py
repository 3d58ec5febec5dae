import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from modalrep import DiffusionConfig, UNetConfig, unet


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture
def small_cfg() -> UNetConfig:
    """Tiny U-Net for fast unit tests."""
    return UNetConfig(image_size=8, base_channels=8, norm_groups=4, heads=2,
                      ctx_dim=16, time_dim=16, adapter_hidden=4)


@pytest.fixture
def small_diffusion() -> DiffusionConfig:
    return DiffusionConfig(timesteps=50, image_size=8)


@pytest.fixture
def small_base(small_cfg):
    model = unet.build_base_model(small_cfg, seed=11, zero_out=False)
    unet.set_model_trainable(model, False)
    return model


# ---------------------------------------------------------------------------
# Shared full-scale pipeline (pretrain -> dual train -> baseline train -> fuse)
# used by the acceptance suite; built once per session through the CLI so the
# artifacts on disk exercise the real command surface.


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    from modalrep import cli

    root = tmp_path_factory.mktemp("pipeline")
    paths = {
        "base": str(root / "base.ckpt"),
        "dual": str(root / "dual.ckpt"),
        "fused": str(root / "fused.ckpt"),
        "controlnet": str(root / "cn.ckpt"),
    }
    assert cli.main(["pretrain", "--steps", "2000", "--seed", "0",
                     "--out", paths["base"]]) == 0
    assert cli.main(["train-rep", "--base", paths["base"], "--w", "0.1",
                     "--steps", "3000", "--seed", "1", "--out", paths["dual"]]) == 0
    assert cli.main(["train-controlnet", "--base", paths["base"], "--steps", "500",
                     "--seed", "2", "--out", paths["controlnet"]]) == 0
    assert cli.main(["fuse", "--in", paths["dual"], "--alpha", "1.0",
                     "--beta", "1.0", "--out", paths["fused"]]) == 0
    return paths
