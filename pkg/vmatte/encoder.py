"""
Residual encoder
Configurable ResNet-style pyramid encoder shared by the matting and trimap networks
"""

from typing import Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .config import EncoderConfig


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                                          nn.BatchNorm2d(out_channels))

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)

    def geometry(self) -> List[Tuple[int, int, int]]:
        return [(3, self.conv1.stride[0], 1), (3, 1, 1)]


class Bottleneck(nn.Module):
    """1x1 -> 3x3 (strided) -> 1x1 with 4x channel expansion"""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        mid = max(out_channels // 4, 1)
        self.conv1 = nn.Conv2d(in_channels, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                                          nn.BatchNorm2d(out_channels))

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)

    def geometry(self) -> List[Tuple[int, int, int]]:
        return [(1, 1, 0), (3, self.conv2.stride[0], 1), (1, 1, 0)]


class ResidualEncoder(nn.Module):
    """
    Pyramid encoder returning the output of every stage, coarsest last

    Args:
        in_channels: Input channels (3 for images, 4 for image + trimap)
        config: Stage geometry
        zero_channels: Input channels whose stem weights start at zero
    """

    def __init__(self, in_channels: int, config: EncoderConfig, zero_channels: Sequence[int] = ()):
        super().__init__()
        self.config = config
        stem_kernel = 7 if config.stem_stride == 2 else 3
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, config.stem_width, stem_kernel, config.stem_stride, stem_kernel // 2, bias=False),
            nn.BatchNorm2d(config.stem_width),
            nn.ReLU(inplace=True),
        )
        block = Bottleneck if config.bottleneck else BasicBlock
        stages, channels = [], config.stem_width
        for width, stride, count in zip(config.widths, config.strides, config.blocks):
            layers = [block(channels, width, stride)]
            layers += [block(width, width, 1) for _ in range(count - 1)]
            stages.append(nn.Sequential(*layers))
            channels = width
        self.stages = nn.ModuleList(stages)
        self._init_weights(zero_channels)

    def _init_weights(self, zero_channels: Sequence[int]):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        with torch.no_grad():
            for c in zero_channels:
                self.stem[0].weight[:, c].zero_()

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(self.config.widths)

    @property
    def strides(self) -> Tuple[int, ...]:
        return self.config.stage_strides

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = self.stem(x)
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features

    def geometry(self, stage: int = -1) -> Iterator[Tuple[int, int, int]]:
        """(kernel, stride, padding) of the longest path up to a stage"""
        stem = self.stem[0]
        yield stem.kernel_size[0], stem.stride[0], stem.padding[0]
        last = len(self.stages) - 1 if stage < 0 else stage
        for stage_module in self.stages[:last + 1]:
            for block in stage_module:
                yield from block.geometry()

    def receptive_window(self, index: int, stage: int = -1) -> Tuple[float, float]:
        """Inclusive input coordinate range seen by output position `index` along one axis"""
        jump, size, start = 1, 1, 0.0
        for kernel, stride, padding in self.geometry(stage):
            start += ((kernel - 1) / 2.0 - padding) * jump
            size += (kernel - 1) * jump
            jump *= stride
        center = start + index * jump
        half = (size - 1) / 2.0
        return center - half, center + half


def pad_to_multiple(x: torch.Tensor, multiple: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Replicate-pad the last two dims up to a multiple; returns the original (H, W)"""
    height, width = x.shape[-2:]
    pad_h, pad_w = (-height) % multiple, (-width) % multiple
    if pad_h or pad_w:
        lead = x.shape[:-3]
        flat = x.reshape(-1, *x.shape[-3:])
        flat = torch.nn.functional.pad(flat, (0, pad_w, 0, pad_h), mode="replicate")
        x = flat.reshape(*lead, *flat.shape[-3:])
    return x, (height, width)


def trimap_channel(trimap: torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Class map {0, 1, 2} of shape (..., H, W) -> (..., 1, H, W) input channel in {0, 0.5, 1}"""
    return (trimap.to(dtype) / 2.0).unsqueeze(-3)


def skip_plan(config: EncoderConfig) -> List[Optional[int]]:
    """
    Encoder stage feeding each x2 decoder step, coarsest step first

    A step whose output stride matches no stage above the deepest one gets None.
    """
    total = config.total_stride
    strides = config.stage_strides[:-1]
    plan = []
    scale = total
    while scale > 1:
        scale //= 2
        matches = [i for i, s in enumerate(strides) if s == scale]
        plan.append(matches[-1] if matches else None)
    return plan
