import numpy as np
import pytest
import torch

from alignseg.config import TrainConfig


def make_mini_cfg(seed: int = 0) -> TrainConfig:
    """Miniature model for gradient checks and fast unit tests:
    32x32 inputs, 2 classes, 8-dim shared embedding space."""
    cfg = TrainConfig()
    cfg.seed = seed
    cfg.data.num_classes = 2
    cfg.augment.crop = 32
    cfg.encoder.width = 16
    cfg.encoder.patch_size = 16
    cfg.model.low_channels = 12
    cfg.model.high_channels = 16
    cfg.model.low_reduced_channels = 6
    cfg.model.aspp_channels = 8
    cfg.model.decoder_channels = 8
    cfg.model.norm_groups = 4
    cfg.align.embed_dim = 8
    cfg.align.class_names = ["stroma", "gland"]
    cfg.text_encoder.vocab_size = 32
    cfg.text_encoder.token_dim = 8
    cfg.text_encoder.text_dim = 12
    cfg.text_encoder.seq_len = 12
    cfg.optim.batch_labeled = 1
    cfg.optim.batch_unlabeled = 1
    cfg.optim.total_steps = 100
    return cfg


def _desk_base(seed: int) -> TrainConfig:
    """Shared desk-scale settings for the synthetic 64x64 gland set."""
    cfg = TrainConfig()
    cfg.seed = seed
    cfg.augment.crop = 64
    cfg.augment.scale_min = 0.75
    cfg.augment.scale_max = 1.5
    cfg.augment.blur_sigma_max = 0.8
    cfg.augment.color_jitter_strength = 0.2
    cfg.encoder.width = 256
    cfg.model.high_channels = 512
    cfg.model.low_channels = 128
    cfg.model.low_reduced_channels = 32
    cfg.model.aspp_channels = 128
    cfg.model.decoder_channels = 128
    cfg.align.embed_dim = 64
    cfg.text_encoder.token_dim = 32
    cfg.text_encoder.text_dim = 64
    return cfg


def make_overfit_cfg(seed: int = 0) -> TrainConfig:
    """Fully supervised overfit run: fine patches and a hot lr fit the 40
    training images quickly."""
    cfg = _desk_base(seed)
    cfg.encoder.patch_size = 4
    cfg.optim.lr0 = 0.08
    cfg.optim.total_steps = 300
    return cfg


def make_direction_cfg(seed: int = 0) -> TrainConfig:
    """Semi-supervised comparison runs. The lr is hot enough that pseudo-label
    drift is a live failure mode, which is where the alignment branches earn
    their keep; the comparison readout happens at step 300 of the 400-step
    schedule, while training is still in that regime (see the acceptance test)."""
    cfg = _desk_base(seed)
    cfg.encoder.patch_size = 4
    cfg.optim.lr0 = 0.06
    cfg.optim.total_steps = 400
    return cfg

DIRECTION_READOUT_STEP = 300


@pytest.fixture
def mini_cfg() -> TrainConfig:
    return make_mini_cfg()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
