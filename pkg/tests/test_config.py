"""Presets, the flat config grammar and validation."""

from pathlib import Path

import pytest

from vmatte.config import (EncoderConfig, ExperimentConfig, MattingNetConfig, TrainConfig, TrimapNetConfig,
                           env_default, load_config, write_config)
from vmatte.errors import ConfigError


class TestPresets:

    @pytest.mark.parametrize("preset", ["toy", "paper"])
    @pytest.mark.parametrize("net", ["matting", "trimap"])
    def test_presets_validate(self, preset, net):
        ExperimentConfig.from_preset(preset, net).validate()

    def test_paper_geometry(self):
        assert EncoderConfig.matting("paper").total_stride == 32
        assert EncoderConfig.trimap("paper").total_stride == 16
        assert len(MattingNetConfig.preset("paper").decoder_widths) == 5
        assert len(TrimapNetConfig.preset("paper").decoder_widths) == 4

    def test_paper_schedules(self):
        matting = TrainConfig.preset_for("paper", "matting")
        assert (matting.lr_init, matting.hold_epochs, matting.decay_rate, matting.epochs) == (5e-5, 20, 0.98, 100)
        trimap = TrainConfig.preset_for("paper", "trimap")
        assert (trimap.lr_init, trimap.lr_final, trimap.decay, trimap.epochs, trimap.batch_size) == \
            (1e-3, 1e-4, "linear", 75, 4)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_preset("huge")


class TestLoadConfig:

    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("# comment\ntrain.epochs = 3\ntrain.crop_scales = 64,96\nmatting.use_tff = false\n")
        config = load_config(path, ["train.epochs=4"])
        assert config.train.epochs == 4
        assert config.train.crop_scales == (64, 96)
        assert config.matting.use_tff is False

    def test_nested_section(self):
        config = load_config(overrides=["matting.encoder.widths=8,16", "matting.encoder.strides=2,2",
                                        "matting.encoder.blocks=1,1", "matting.decoder_widths=16,8"])
        assert config.matting.encoder.widths == (8, 16)

    def test_round_trip(self, tmp_path):
        config = ExperimentConfig.from_preset("paper")
        path = write_config(config, tmp_path / "snap.cfg")
        assert load_config(path).to_flat() == config.to_flat()

    @pytest.mark.parametrize("override", [
        "train.nonsense=1",
        "nowhere.epochs=1",
        "train.epochs=many",
        "train.trimap_kernel_range=1,2,3",
        "train.lr_init=0",
        "train.n=-1",
        "matting.fusion=flow",
        "matting.decoder_widths=8",
        "metrics.mask=everything",
        "noequals",
    ])
    def test_invalid_values(self, override):
        with pytest.raises(ConfigError):
            load_config(overrides=[override])

    def test_window_mismatch(self):
        with pytest.raises(ConfigError):
            load_config(overrides=["train.n=1"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")

    def test_clip_shorter_than_window(self):
        with pytest.raises(ConfigError):
            load_config(overrides=["train.n=5", "matting.n=5", "train.clip_length=9"])

    def test_env_default(self, monkeypatch):
        monkeypatch.setenv("VMATTE_DEVICE", "cuda:1")
        assert env_default("DEVICE") == "cuda:1"
        assert env_default("UNSET_KEY", "x") == "x"

    @pytest.mark.parametrize("name,preset", [("toy.cfg", "toy"), ("paper.cfg", "paper")])
    def test_shipped_configs(self, name, preset):
        path = Path(__file__).resolve().parent.parent / "configs" / name
        config = load_config(path, net="matting")
        assert config.train.preset == preset
        assert config.matting.n == config.train.n
