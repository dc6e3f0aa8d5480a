"""
Configuration for synthesis, networks, training and evaluation
Dataclass sections with toy/paper presets, read from flat `key = value` files
"""

import dataclasses
import logging
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from dotenv import dotenv_values

from .errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "VMATTE_"
PRESETS = ("toy", "paper")
FUSIONS = ("stfam", "naive", "cross-attention")


def env_default(name: str, default: Optional[str] = None) -> Optional[str]:
    """Read a VMATTE_-prefixed environment value"""
    return os.environ.get(f"{ENV_PREFIX}{name}", default)


@dataclass
class SynthConfig:
    """Synthetic clip generation.

    Affine parameter ranges are knobs. Velocity caps bound the per-frame
    change of each parameter.
    """

    frames: int = 24
    size: int = 160
    max_frames: int = 150
    max_side: int = 1920
    translation_cap: float = 2.0
    rotation_cap: float = 0.02
    scale_cap: float = 0.01
    scale_min: float = 0.85
    scale_max: float = 1.15
    init_shift: float = 8.0
    keyframe_every: int = 6
    blob_sigma: float = 12.0
    edge_sigma: float = 2.5
    bg_pan: float = 1.5
    trimap_kernel: int = 2
    trimap_iterations: int = 3
    quantize: bool = True
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if not 1 <= self.frames <= self.max_frames:
            raise ConfigError(f"synth.frames must be in [1, {self.max_frames}], got {self.frames}")
        if not 8 <= self.size <= self.max_side:
            raise ConfigError(f"synth.size must be in [8, {self.max_side}], got {self.size}")
        if min(self.translation_cap, self.rotation_cap, self.scale_cap) < 0:
            raise ConfigError("velocity caps must be non-negative")
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError("need 0 < scale_min <= scale_max")
        if self.keyframe_every < 1:
            raise ConfigError("synth.keyframe_every must be >= 1")
        if self.trimap_kernel < 1 or self.trimap_iterations < 0:
            raise ConfigError("synth trimap kernel must be >= 1 and iterations >= 0")
        return self


@dataclass
class EncoderConfig:
    """Residual encoder geometry; one pyramid level per stage"""

    preset: str = "toy"
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    strides: Tuple[int, ...] = (2, 2, 2, 2)
    blocks: Tuple[int, ...] = (1, 1, 1, 1)
    bottleneck: bool = False
    stem_width: int = 16
    stem_stride: int = 1

    @property
    def total_stride(self) -> int:
        return self.stem_stride * math.prod(self.strides)

    @property
    def stage_strides(self) -> Tuple[int, ...]:
        """Cumulative output stride of every stage"""
        out, acc = [], self.stem_stride
        for s in self.strides:
            acc *= s
            out.append(acc)
        return tuple(out)

    def validate(self) -> "EncoderConfig":
        if len(self.widths) < 2:
            raise ConfigError("encoder needs at least 2 stages")
        if not len(self.widths) == len(self.strides) == len(self.blocks):
            raise ConfigError("encoder widths, strides and blocks must have equal length")
        for s in (self.stem_stride, *self.strides):
            if s not in (1, 2):
                raise ConfigError(f"encoder strides must be 1 or 2, got {s}")
        if any(b < 1 for b in self.blocks) or any(w < 1 for w in self.widths):
            raise ConfigError("encoder blocks and widths must be positive")
        return self

    @classmethod
    def matting(cls, preset: str) -> "EncoderConfig":
        if preset == "toy":
            return cls()
        if preset == "paper":
            # ResNet-50 geometry, no pretrained weights
            return cls(preset="paper", widths=(256, 512, 1024, 2048), strides=(2, 2, 2, 2),
                       blocks=(3, 4, 6, 3), bottleneck=True, stem_width=64, stem_stride=2)
        raise ConfigError(f"unknown preset {preset!r}, expected one of {PRESETS}")

    @classmethod
    def trimap(cls, preset: str) -> "EncoderConfig":
        if preset == "toy":
            return cls()
        if preset == "paper":
            # ResNet-34 blocks, last stage kept at stride 1 for an output stride of 16
            return cls(preset="paper", widths=(64, 128, 256, 512), strides=(2, 2, 2, 1),
                       blocks=(3, 4, 6, 3), bottleneck=False, stem_width=64, stem_stride=2)
        raise ConfigError(f"unknown preset {preset!r}, expected one of {PRESETS}")


@dataclass
class MattingNetConfig:
    """Encoder-decoder matting network with fusion in the skip connections"""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    # one width per x2 upsampling step, coarsest step first
    decoder_widths: Tuple[int, ...] = (64, 32, 16, 16)
    n: int = 2
    fusion: str = "stfam"
    use_tfa: bool = True
    use_tff: bool = True
    spatial_attention: str = "feature"
    gc_kernel: int = 7
    deform_kernel: int = 3

    def validate(self) -> "MattingNetConfig":
        self.encoder.validate()
        steps = int(round(math.log2(self.encoder.total_stride)))
        if 2 ** steps != self.encoder.total_stride:
            raise ConfigError("total encoder stride must be a power of two")
        if len(self.decoder_widths) != steps:
            raise ConfigError(f"decoder_widths needs {steps} entries (one per x2 step), "
                              f"got {len(self.decoder_widths)}")
        if self.n < 0:
            raise ConfigError("n must be >= 0")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}, expected one of {FUSIONS}")
        if self.spatial_attention not in ("feature", "parameter"):
            raise ConfigError("spatial_attention must be 'feature' or 'parameter'")
        if self.gc_kernel < 1 or self.gc_kernel % 2 == 0:
            raise ConfigError("gc_kernel must be a positive odd integer")
        if self.deform_kernel not in (1, 3, 5):
            raise ConfigError("deform_kernel must be 1, 3 or 5")
        return self

    @classmethod
    def preset(cls, name: str) -> "MattingNetConfig":
        if name == "toy":
            return cls()
        if name == "paper":
            return cls(encoder=EncoderConfig.matting("paper"), decoder_widths=(256, 128, 64, 32, 32))
        raise ConfigError(f"unknown preset {name!r}, expected one of {PRESETS}")


@dataclass
class TrimapNetConfig:
    """Trimap propagation network: dual encoders, correlation layer, decoder"""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_widths: Tuple[int, ...] = (64, 32, 16, 16)
    key_channels: int = 64

    def validate(self) -> "TrimapNetConfig":
        self.encoder.validate()
        steps = int(round(math.log2(self.encoder.total_stride)))
        if 2 ** steps != self.encoder.total_stride:
            raise ConfigError("total encoder stride must be a power of two")
        if len(self.decoder_widths) != steps:
            raise ConfigError(f"trimap decoder_widths needs {steps} entries, got {len(self.decoder_widths)}")
        if self.key_channels < 1:
            raise ConfigError("key_channels must be >= 1")
        return self

    @classmethod
    def preset(cls, name: str) -> "TrimapNetConfig":
        if name == "toy":
            return cls()
        if name == "paper":
            return cls(encoder=EncoderConfig.trimap("paper"), decoder_widths=(256, 128, 64, 32),
                       key_channels=128)
        raise ConfigError(f"unknown preset {name!r}, expected one of {PRESETS}")


@dataclass
class TrainConfig:
    """Training recipe. The paper preset uses full-size schedules (linear decay
    for trimap propagation, hold then exponential decay for matting);
    toy preset is sized to run on a laptop CPU in minutes.
    """

    preset: str = "toy"
    net: str = "matting"
    epochs: int = 15
    steps_per_epoch: int = 100
    batch_size: int = 1
    lr_init: float = 1e-3
    lr_final: float = 1e-4
    decay: str = "hold-exp"
    hold_epochs: int = 5
    decay_rate: float = 0.98
    n: int = 2
    # consecutive target frames per cube; the temporal loss needs at least 2
    targets: int = 2
    crop_size: int = 96
    crop_scales: Tuple[int, ...] = (96, 144, 192)
    trimap_kernel_range: Tuple[int, int] = (2, 5)
    trimap_iteration_range: Tuple[int, int] = (5, 15)
    num_clips: int = 5
    clip_length: int = 9
    frame_size: int = 160
    w_alpha: float = 1.0
    w_comp: float = 1.0
    w_grad: float = 1.0
    w_kl: float = 1.0
    w_temporal: float = 1.0
    flip_prob: float = 0.5
    jitter: float = 0.1
    log_every: int = 25
    workers: int = 0
    seed: int = 0

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def validate(self) -> "TrainConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}, expected one of {PRESETS}")
        if self.net not in ("matting", "trimap"):
            raise ConfigError(f"train.net must be 'matting' or 'trimap', got {self.net!r}")
        if self.lr_init <= 0 or self.lr_final <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, steps_per_epoch and batch_size must be >= 1")
        if self.decay not in ("linear", "hold-exp"):
            raise ConfigError(f"unknown decay policy {self.decay!r}")
        if not 0 < self.decay_rate <= 1:
            raise ConfigError("decay_rate must be in (0, 1]")
        if self.hold_epochs < 0:
            raise ConfigError("hold_epochs must be >= 0")
        if self.n < 0 or self.targets < 1:
            raise ConfigError("n must be >= 0 and targets >= 1")
        if not self.crop_scales or min(self.crop_scales) < 8 or self.crop_size < 8:
            raise ConfigError("crop sizes must be non-empty and >= 8")
        for name in ("trimap_kernel_range", "trimap_iteration_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} must be a non-empty range, got {(lo, hi)}")
        if self.trimap_kernel_range[0] < 1:
            raise ConfigError("trimap kernels must be >= 1")
        if self.num_clips < 1:
            raise ConfigError("num_clips must be >= 1")
        if self.net == "matting" and self.clip_length < 2 * self.n + 1:
            raise ConfigError(f"clip_length {self.clip_length} is shorter than the window 2n+1={2 * self.n + 1}")
        if self.net == "trimap" and self.clip_length < 2:
            raise ConfigError("trimap training samples two frames per clip, clip_length must be >= 2")
        if not 0 <= self.flip_prob <= 1 or self.jitter < 0:
            raise ConfigError("flip_prob must be in [0, 1] and jitter >= 0")
        if min(self.w_alpha, self.w_comp, self.w_grad, self.w_kl, self.w_temporal) < 0:
            raise ConfigError("loss weights must be >= 0")
        return self

    @classmethod
    def preset_for(cls, preset: str, net: str) -> "TrainConfig":
        if preset == "toy" and net == "matting":
            return cls()
        if preset == "toy" and net == "trimap":
            return cls(net="trimap", epochs=5, steps_per_epoch=100, batch_size=4, decay="linear",
                       lr_init=1e-3, lr_final=1e-4, crop_size=96, crop_scales=(96,), n=0)
        if preset == "paper" and net == "matting":
            return cls(preset="paper", epochs=100, steps_per_epoch=1000, batch_size=1, lr_init=5e-5,
                       lr_final=5e-5, decay="hold-exp", hold_epochs=20, decay_rate=0.98, n=2,
                       crop_size=320, crop_scales=(320, 480, 640), clip_length=24, frame_size=720)
        if preset == "paper" and net == "trimap":
            return cls(preset="paper", net="trimap", epochs=75, steps_per_epoch=1000, batch_size=4,
                       lr_init=1e-3, lr_final=1e-4, decay="linear", n=0, crop_size=320,
                       crop_scales=(320,), clip_length=24, frame_size=720)
        raise ConfigError(f"unknown preset/net combination {preset!r}/{net!r}")


@dataclass
class MetricConfig:
    """Reporting conventions of the evaluation metrics.

    The temporal metrics have no reference implementation; the per-pair
    averaging, |mask| inside the root and the x100 / x1000 scales are our
    conventions.
    """

    sad_scale: float = 1e-3
    mse_scale: float = 1.0
    grad_scale: float = 1e-3
    conn_scale: float = 1e-3
    dtssd_scale: float = 100.0
    messddt_scale: float = 1000.0
    grad_sigma: float = 1.4
    conn_step: float = 0.1
    mask: str = "unknown"

    def validate(self) -> "MetricConfig":
        if self.mask not in ("unknown", "full"):
            raise ConfigError("metrics.mask must be 'unknown' or 'full'")
        if self.grad_sigma <= 0 or not 0 < self.conn_step < 1:
            raise ConfigError("grad_sigma must be > 0 and conn_step in (0, 1)")
        return self


@dataclass
class ExperimentConfig:
    """All configuration sections of one experiment"""

    preset: str = "toy"
    synth: SynthConfig = field(default_factory=SynthConfig)
    matting: MattingNetConfig = field(default_factory=MattingNetConfig)
    trimap: TrimapNetConfig = field(default_factory=TrimapNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    @classmethod
    def from_preset(cls, preset: str, net: str = "matting") -> "ExperimentConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}, expected one of {PRESETS}")
        return cls(
            preset=preset,
            matting=MattingNetConfig.preset(preset),
            trimap=TrimapNetConfig.preset(preset),
            train=TrainConfig.preset_for(preset, net),
        )

    def validate(self) -> "ExperimentConfig":
        self.synth.validate()
        self.matting.validate()
        self.trimap.validate()
        self.train.validate()
        self.metrics.validate()
        if self.train.net == "matting" and self.train.n != self.matting.n:
            raise ConfigError(f"train.n={self.train.n} differs from matting.n={self.matting.n}")
        return self

    def to_flat(self) -> Dict[str, str]:
        """Dotted-key snapshot, the same grammar the config files use"""
        flat = {"preset": self.preset}
        for section in ("synth", "matting", "trimap", "train", "metrics"):
            _flatten(getattr(self, section), section, flat)
        return flat

    @classmethod
    def from_flat(cls, values: Dict[str, Optional[str]]) -> "ExperimentConfig":
        values = dict(values)
        preset = values.pop("preset", None) or "toy"
        net = values.get("train.net") or "matting"
        config = cls.from_preset(preset, net)
        for key, raw in values.items():
            if raw is None:
                raise ConfigError(f"config key {key!r} has no value")
            _assign(config, key, raw)
        return config


def _flatten(obj: Any, prefix: str, out: Dict[str, str]) -> None:
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}.{f.name}"
        if dataclasses.is_dataclass(value):
            _flatten(value, key, out)
        elif isinstance(value, tuple):
            out[key] = ",".join(str(v) for v in value)
        else:
            out[key] = str(value)


def _assign(root: Any, key: str, raw: str) -> None:
    parts = key.split(".")
    target = root
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or not hasattr(target, part):
            raise ConfigError(f"unknown config section in key {key!r}")
        target = getattr(target, part)
    name = parts[-1]
    hints = typing.get_type_hints(type(target))
    if name not in hints or not dataclasses.is_dataclass(target):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(raw, hints[name], key))


def _coerce(raw: str, hint: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if hint is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint in (int, float, str):
            return hint(raw)
        origin = typing.get_origin(hint)
        if origin is tuple:
            args = typing.get_args(hint)
            items = [item.strip() for item in raw.split(",") if item.strip()]
            item_type = args[0]
            values = tuple(item_type(item) for item in items)
            if Ellipsis not in args and len(values) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return values
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
    raise ConfigError(f"config key {key!r} cannot be set from a file")


def load_config(path: Optional[Path] = None, overrides: Iterable[str] = (),
                preset: Optional[str] = None, net: Optional[str] = None) -> ExperimentConfig:
    """
    Load an experiment configuration

    Args:
        path: Config file in the flat `key = value` grammar (dotted keys select sections)
        overrides: Extra `key=value` strings applied after the file
        preset: Preset used when the file does not name one
        net: Network the training section is for ("matting" or "trimap")

    Returns:
        Validated ExperimentConfig
    """
    values: Dict[str, Optional[str]] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(dotenv_values(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = raw.strip()
    if preset is not None:
        values.setdefault("preset", preset)
    if net is not None:
        values["train.net"] = net
    config = ExperimentConfig.from_flat(values)
    logger.debug("loaded config with %d explicit keys", len(values))
    return config.validate()


def write_config(config: ExperimentConfig, path: Path) -> Path:
    """Write the flat snapshot back in the `key = value` grammar"""
    path = Path(path)
    lines = [f"{key} = {value}" for key, value in sorted(config.to_flat().items())]
    path.write_text("\n".join(lines) + "\n")
    return path
