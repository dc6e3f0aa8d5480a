"""Shared fixtures: seeded procedural samples and tiny network configs."""

import numpy as np
import pytest
import torch

from vmatte.compositor import generate_sample, sample_trimaps
from vmatte.config import EncoderConfig, ExperimentConfig, MattingNetConfig, SynthConfig, TrimapNetConfig

# Flat overrides that shrink every network and the training recipe to seconds on a CPU
TINY_OVERRIDES = [
    "synth.frames=5",
    "synth.size=32",
    "matting.encoder.widths=8,16",
    "matting.encoder.strides=2,2",
    "matting.encoder.blocks=1,1",
    "matting.encoder.stem_width=8",
    "matting.decoder_widths=16,8",
    "matting.n=1",
    "matting.gc_kernel=3",
    "trimap.encoder.widths=8,16",
    "trimap.encoder.strides=2,2",
    "trimap.encoder.blocks=1,1",
    "trimap.encoder.stem_width=8",
    "trimap.decoder_widths=16,8",
    "trimap.key_channels=8",
    "train.epochs=2",
    "train.steps_per_epoch=2",
    "train.batch_size=1",
    "train.n=1",
    "train.targets=2",
    "train.crop_size=32",
    "train.crop_scales=24,32",
    "train.trimap_kernel_range=2,3",
    "train.trimap_iteration_range=1,2",
    "train.num_clips=1",
    "train.clip_length=5",
    "train.frame_size=32",
    "train.log_every=1",
]


def tiny_encoder() -> EncoderConfig:
    return EncoderConfig(widths=(8, 16), strides=(2, 2), blocks=(1, 1), stem_width=8, stem_stride=1)


def tiny_matting(n: int = 1, **kwargs) -> MattingNetConfig:
    return MattingNetConfig(encoder=tiny_encoder(), decoder_widths=(16, 8), n=n, gc_kernel=3, **kwargs)


def tiny_trimap() -> TrimapNetConfig:
    return TrimapNetConfig(encoder=tiny_encoder(), decoder_widths=(16, 8), key_channels=8)


def tiny_experiment(net: str = "matting", extra=()) -> ExperimentConfig:
    values = {}
    for item in [*TINY_OVERRIDES, *extra]:
        key, value = item.split("=", 1)
        values[key] = value
    values["train.net"] = net
    if net == "trimap":
        values["train.n"] = "0"
    return ExperimentConfig.from_flat(values).validate()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def synth_config():
    return SynthConfig(frames=5, size=32)


@pytest.fixture
def sample(synth_config):
    return generate_sample(0, synth_config, seed=7)


@pytest.fixture
def trimaps(sample):
    return sample_trimaps(sample, 2, 2)
