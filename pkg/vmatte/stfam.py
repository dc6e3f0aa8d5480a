"""
Spatio-temporal feature aggregation
Deformable alignment of neighbour features to the target frame followed by
attention-weighted fusion; one instance sits in every decoder skip connection
"""

import logging
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import DeformConv2d, deform_conv2d

from .errors import InvalidInputError

logger = logging.getLogger(__name__)


def check_stack(stack: torch.Tensor, frames: Optional[int] = None) -> int:
    """Validate a (B, 2n+1, C, h, w) feature stack and return n"""
    if stack.dim() != 5:
        raise InvalidInputError(f"feature stack must be (B, T, C, h, w), got {tuple(stack.shape)}")
    length = stack.shape[1]
    if length % 2 == 0:
        raise InvalidInputError(f"feature stack length must be odd, got {length}")
    if frames is not None and length != frames:
        raise InvalidInputError(f"expected a stack of {frames} frames, got {length}")
    return length // 2


def _check_offsets(offsets: torch.Tensor) -> None:
    if not torch.isfinite(offsets).all():
        raise InvalidInputError("deformable offsets contain NaN or Inf")


def deform_conv(feature: torch.Tensor, offsets: torch.Tensor, weight: torch.Tensor,
                bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Deformable convolution F*(p) = sum_k w_k F(p + p_k + dp_k)

    Samples bilinearly at fractional positions with zeros outside the map.

    Args:
        feature: (B, C, H, W) or (C, H, W)
        offsets: (B, 2*k*k, H, W); per kernel location an interleaved (dy, dx) pair
        weight: (C', C, k, k) with odd k
        bias: Optional (C',)

    Returns:
        (B, C', H, W), or (C', H, W) for an unbatched feature
    """
    unbatched = feature.dim() == 3
    if unbatched:
        feature, offsets = feature[None], offsets[None]
    kernel = weight.shape[-1]
    if weight.shape[-2] != kernel or kernel % 2 == 0:
        raise InvalidInputError(f"deform_conv needs a square odd kernel, got {tuple(weight.shape[-2:])}")
    if offsets.shape[1] != 2 * kernel * kernel or offsets.shape[-2:] != feature.shape[-2:]:
        raise InvalidInputError(f"offsets {tuple(offsets.shape)} do not fit feature {tuple(feature.shape)} "
                                f"and kernel {kernel}")
    _check_offsets(offsets)
    out = deform_conv2d(feature, offsets, weight, bias, padding=kernel // 2)
    return out[0] if unbatched else out


class DeformableConv(DeformConv2d):
    """Same-size deformable convolution that rejects non-finite offsets"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3):
        super().__init__(in_channels, out_channels, kernel, padding=kernel // 2)

    def forward(self, feature: torch.Tensor, offsets: torch.Tensor, mask: Optional[torch.Tensor] = None):
        _check_offsets(offsets)
        return super().forward(feature, offsets, mask)


class TemporalAlignment(nn.Module):
    """
    Aligns every frame of a stack to the target with offsets predicted from
    concat(F_t, F_{t+dt}); each dt owns an offset head, the deformable
    weights are shared
    """

    def __init__(self, channels: int, n: int, kernel: int = 3):
        super().__init__()
        self.n = n
        self.kernel = kernel
        self.offset_heads = nn.ModuleList([
            nn.Sequential(
                nn.Conv2d(2 * channels, channels, 3, padding=1),
                nn.LeakyReLU(0.1, inplace=True),
                nn.Conv2d(channels, 2 * kernel * kernel, 3, padding=1),
            )
            for _ in range(2 * n + 1)
        ])
        self.deform = DeformableConv(channels, channels, kernel)
        self.reset_offsets()

    def reset_offsets(self) -> None:
        """Zero the last layer of every offset head so alignment starts as identity"""
        for head in self.offset_heads:
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)

    def offsets(self, stack: torch.Tensor) -> List[torch.Tensor]:
        check_stack(stack, 2 * self.n + 1)
        target = stack[:, self.n]
        return [head(torch.cat([target, stack[:, i]], dim=1)) for i, head in enumerate(self.offset_heads)]

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        offsets = self.offsets(stack)
        return torch.stack([self.deform(stack[:, i], off) for i, off in enumerate(offsets)], dim=1)


class GlobalConv(nn.Module):
    """Large-kernel convolution as two summed separable branches"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 7):
        super().__init__()
        pad = kernel // 2
        self.vertical_first = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, (kernel, 1), padding=(pad, 0)),
            nn.Conv2d(out_channels, out_channels, (1, kernel), padding=(0, pad)),
        )
        self.horizontal_first = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, (1, kernel), padding=(0, pad)),
            nn.Conv2d(out_channels, out_channels, (kernel, 1), padding=(pad, 0)),
        )

    def forward(self, x):
        return self.vertical_first(x) + self.horizontal_first(x)


class TemporalFusion(nn.Module):
    """
    Fuses an aligned stack: channel attention (GAP + FC), spatial attention,
    1x1 channel reduction, then a global convolution

    Args:
        channels: Channels per frame
        frames: Stack length 2n+1
        out_channels: Channels of the fused output
        gc_kernel: Global convolution kernel size
        spatial: "feature" computes the spatial map from the input,
            "parameter" learns a free map resized to the input
        parameter_size: Side of the learnable map in "parameter" mode
    """

    def __init__(self, channels: int, frames: int, out_channels: int, gc_kernel: int = 7,
                 spatial: str = "feature", parameter_size: int = 16):
        super().__init__()
        width = channels * frames
        self.frames = frames
        self.spatial_mode = spatial
        self.fc = nn.Linear(width, width)
        if spatial == "feature":
            self.spatial = nn.Conv2d(width, 1, 3, padding=1)
        elif spatial == "parameter":
            self.spatial_map = nn.Parameter(torch.zeros(1, 1, parameter_size, parameter_size))
        else:
            raise InvalidInputError(f"unknown spatial attention mode {spatial!r}")
        self.reduce = nn.Conv2d(width, out_channels, 1)
        self.global_conv = GlobalConv(out_channels, out_channels, gc_kernel)

    def channel_attention(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc(x.mean(dim=(2, 3))))[..., None, None]

    def spatial_attention(self, x: torch.Tensor) -> torch.Tensor:
        if self.spatial_mode == "feature":
            return torch.sigmoid(self.spatial(x))
        logits = F.interpolate(self.spatial_map, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(logits).expand(x.shape[0], -1, -1, -1)

    def project(self, x: torch.Tensor) -> torch.Tensor:
        return self.global_conv(self.reduce(x))

    def forward(self, aligned: torch.Tensor) -> torch.Tensor:
        check_stack(aligned, self.frames)
        x = aligned.flatten(1, 2)
        x = x * self.channel_attention(x)
        x = x * self.spatial_attention(x)
        return self.project(x)


class ConcatFusion(nn.Module):
    """Channel concatenation + 1x1 convolution"""

    def __init__(self, channels: int, frames: int, out_channels: int):
        super().__init__()
        self.frames = frames
        self.reduce = nn.Conv2d(channels * frames, out_channels, 1)

    def forward(self, aligned: torch.Tensor) -> torch.Tensor:
        check_stack(aligned, self.frames)
        return self.reduce(aligned.flatten(1, 2))


class STFAM(nn.Module):
    """
    Alignment then fusion of a (B, 2n+1, C, h, w) stack into one skip feature

    With use_tfa off the stack passes through unaligned; with use_tff off the
    fusion is concatenation + 1x1 convolution.
    """

    def __init__(self, channels: int, out_channels: int, n: int, use_tfa: bool = True, use_tff: bool = True,
                 deform_kernel: int = 3, gc_kernel: int = 7, spatial_attention: str = "feature"):
        super().__init__()
        self.n = n
        frames = 2 * n + 1
        self.align = TemporalAlignment(channels, n, deform_kernel) if use_tfa else None
        if use_tff:
            self.fuse = TemporalFusion(channels, frames, out_channels, gc_kernel, spatial_attention)
        else:
            self.fuse = ConcatFusion(channels, frames, out_channels)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        check_stack(stack, 2 * self.n + 1)
        aligned = stack if self.align is None else self.align(stack)
        return self.fuse(aligned)
