"""
Interchangeable temporal fusion modules for the decoder skip connections
"""

import logging
from typing import Optional

import torch
import torch.nn as nn

from .config import FUSIONS, MattingNetConfig
from .errors import ConfigError
from .stfam import STFAM, check_stack
from .trimap_prop import CorrelationLayer

logger = logging.getLogger(__name__)


class NaiveFusion(nn.Module):
    """Channel concatenation followed by three 3x3 convolutions"""

    def __init__(self, channels: int, out_channels: int, n: int):
        super().__init__()
        self.n = n
        self.channels = channels
        self.convs = nn.Sequential(
            nn.Conv2d(channels * (2 * n + 1), out_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
        )

    def identity_init_(self) -> "NaiveFusion":
        """Pass the target frame through unchanged (for non-negative features)"""
        first, second, third = self.convs[0], self.convs[2], self.convs[4]
        if first.out_channels != self.channels:
            raise ConfigError("identity init needs equal input and output channels")
        with torch.no_grad():
            first.weight.zero_()
            for c in range(self.channels):
                first.weight[c, self.n * self.channels + c, 1, 1] = 1.0
            nn.init.dirac_(second.weight)
            nn.init.dirac_(third.weight)
            for conv in (first, second, third):
                conv.bias.zero_()
        return self

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        check_stack(stack, 2 * self.n + 1)
        return self.convs(stack.flatten(1, 2))


class CrossAttentionFusion(nn.Module):
    """
    Matches every neighbour to the target with a correlation layer and adds
    the mean neighbour read-out to the target feature
    """

    def __init__(self, channels: int, out_channels: int, n: int, key_channels: Optional[int] = None):
        super().__init__()
        self.n = n
        self.correlation = CorrelationLayer(channels, key_channels)
        self.out = nn.Conv2d(channels, out_channels, 1)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        check_stack(stack, 2 * self.n + 1)
        target = stack[:, self.n]
        fused = target
        neighbours = [i for i in range(stack.shape[1]) if i != self.n]
        if neighbours:
            reads = [self.correlation.attend(target, stack[:, i], stack[:, i])[0] for i in neighbours]
            fused = target + torch.stack(reads).mean(dim=0)
        return self.out(fused)


def fusion_variant(name: str, channels: int, out_channels: int, n: int,
                   config: Optional[MattingNetConfig] = None) -> nn.Module:
    """
    Fusion module for one skip connection

    Args:
        name: "stfam", "naive" or "cross-attention"
        channels: Channels per frame of the incoming stack
        out_channels: Channels the decoder expects at this level
        n: Neighbour frames on each side
        config: Supplies the ST-FAM switches and kernel sizes

    Returns:
        Module mapping (B, 2n+1, C, h, w) to (B, out_channels, h, w)
    """
    config = config or MattingNetConfig()
    if name == "stfam":
        return STFAM(channels, out_channels, n, use_tfa=config.use_tfa, use_tff=config.use_tff,
                     deform_kernel=config.deform_kernel, gc_kernel=config.gc_kernel,
                     spatial_attention=config.spatial_attention)
    if name == "naive":
        return NaiveFusion(channels, out_channels, n)
    if name == "cross-attention":
        return CrossAttentionFusion(channels, out_channels, n, key_channels=max(channels // 2, 1))
    raise ConfigError(f"unknown fusion {name!r}, expected one of {FUSIONS}")
