"""
Video matting network
Per-frame pyramid encoder over image + trimap, sub-pixel decoder whose skip
connections fuse the 2n+1 frame window, sigmoid alpha head
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import DeformConv2d

from .compositor import window_indices
from .config import MattingNetConfig
from .encoder import ResidualEncoder, pad_to_multiple, skip_plan, trimap_channel
from .errors import InvalidInputError
from .fusion import fusion_variant
from .stfam import TemporalAlignment
from .types import AlphaClip, Clip, Trimap

logger = logging.getLogger(__name__)


class SubPixelUp(nn.Module):
    """x2 upsampling: 3x3 conv to 4x channels, then depth-to-space"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels * 4, 3, padding=1, padding_mode="replicate")
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x):
        return self.shuffle(self.conv(x))


class MattingNet(nn.Module):
    """
    Encoder-decoder alpha predictor for the centre frame of a 2n+1 window

    Args:
        config: Network configuration; defaults to the toy preset
    """

    def __init__(self, config: Optional[MattingNetConfig] = None):
        super().__init__()
        self.config = (config or MattingNetConfig()).validate()
        encoder = self.config.encoder
        self.n = self.config.n
        self.stride = encoder.total_stride
        self.encoder = ResidualEncoder(4, encoder, zero_channels=(3,))
        self.plan = skip_plan(encoder)

        ups, convs, fusions = [], [], {}
        prev = encoder.widths[-1]
        for step, (width, skip) in enumerate(zip(self.config.decoder_widths, self.plan)):
            ups.append(SubPixelUp(prev, width))
            if skip is not None:
                fusions[str(step)] = fusion_variant(self.config.fusion, encoder.widths[skip], width,
                                                    self.n, self.config)
            convs.append(nn.Conv2d(width, width, 3, padding=1))
            prev = width
        self.ups = nn.ModuleList(ups)
        self.convs = nn.ModuleList(convs)
        self.fusions = nn.ModuleDict(fusions)
        self.head = nn.Conv2d(prev, 1, 3, padding=1)
        self._init_decoder()

    def _init_decoder(self) -> None:
        for part in (self.ups, self.convs, self.fusions, self.head):
            for m in part.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    nn.init.xavier_uniform_(m.weight)
                    if m.bias is not None:
                        nn.init.zeros_(m.bias)
                elif isinstance(m, DeformConv2d):
                    nn.init.xavier_uniform_(m.weight)
                    nn.init.zeros_(m.bias)
        for m in self.fusions.modules():
            if isinstance(m, TemporalAlignment):
                m.reset_offsets()

    def skip_contract(self) -> List[Dict[str, int]]:
        """Per fused decoder step: encoder stage, channels in/out and stride"""
        encoder = self.config.encoder
        return [
            {"step": step, "stage": skip, "in_channels": encoder.widths[skip],
             "out_channels": self.config.decoder_widths[step], "stride": encoder.stage_strides[skip]}
            for step, skip in enumerate(self.plan) if skip is not None
        ]

    def encode(self, frames: torch.Tensor, trimaps: torch.Tensor) -> List[torch.Tensor]:
        """
        Pyramid of every stage for a batch of frames

        Args:
            frames: (N, 3, H, W)
            trimaps: (N, H, W) class map in {0, 1, 2}
        """
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise InvalidInputError(f"frames must be (N, 3, H, W), got {tuple(frames.shape)}")
        if trimaps.shape != (frames.shape[0], *frames.shape[-2:]):
            raise InvalidInputError(f"trimaps {tuple(trimaps.shape)} do not match frames {tuple(frames.shape)}")
        x = torch.cat([frames, trimap_channel(trimaps, frames.dtype)], dim=1)
        return self.encoder(x)

    def decode(self, pyramids: Sequence[torch.Tensor], n: Optional[int] = None) -> torch.Tensor:
        """
        Alpha (B, 1, H, W) of the centre frame

        Args:
            pyramids: One (B, 2n+1, C, h, w) stack per encoder stage
            n: Window half-width, must match the network
        """
        n = self.n if n is None else n
        if n != self.n:
            raise InvalidInputError(f"network was built for n={self.n}, got n={n}")
        if len(pyramids) != len(self.encoder.stages):
            raise InvalidInputError(f"expected {len(self.encoder.stages)} pyramid levels, got {len(pyramids)}")
        lead = pyramids[0].shape[:2]
        if lead[1] != 2 * n + 1 or any(p.dim() != 5 or p.shape[:2] != lead for p in pyramids):
            raise InvalidInputError(f"pyramid stacks must share shape (B, {2 * n + 1}, ...)")

        x = pyramids[-1][:, n]
        for step, (up, conv, skip) in enumerate(zip(self.ups, self.convs, self.plan)):
            x = F.relu(up(x))
            if skip is not None:
                stack = pyramids[skip]
                if stack.shape[-2:] != x.shape[-2:]:
                    raise InvalidInputError(f"level {skip} is {tuple(stack.shape[-2:])}, decoder expects "
                                            f"{tuple(x.shape[-2:])}")
                x = x + self.fusions[str(step)](stack)
            x = F.relu(conv(x))
        return torch.sigmoid(self.head(x))

    def forward(self, frames: torch.Tensor, trimaps: torch.Tensor) -> torch.Tensor:
        """
        Alpha of every window centre in a run of consecutive frames

        Args:
            frames: (B, 2n+K, 3, H, W), K >= 1
            trimaps: (B, 2n+K, H, W)

        Returns:
            (B, K, H, W); K = 1 is the single target frame of a 2n+1 window
        """
        if frames.dim() != 5 or trimaps.dim() != 4 or frames.shape[:2] != trimaps.shape[:2]:
            raise InvalidInputError(f"frames {tuple(frames.shape)} and trimaps {tuple(trimaps.shape)} "
                                    "must be (B, T, 3, H, W) and (B, T, H, W)")
        batch, length = frames.shape[:2]
        window = 2 * self.n + 1
        if length < window:
            raise InvalidInputError(f"need at least {window} frames, got {length}")
        frames, (height, width) = pad_to_multiple(frames, self.stride)
        trimaps, _ = pad_to_multiple(trimaps.unsqueeze(2).to(frames.dtype), self.stride)
        features = self.encode(frames.flatten(0, 1), trimaps.flatten(0, 2))
        pyramids = [f.reshape(batch, length, *f.shape[1:]) for f in features]
        alphas = [self.decode([p[:, k:k + window] for p in pyramids])[:, 0]
                  for k in range(length - window + 1)]
        return torch.stack(alphas, dim=1)[..., :height, :width]


def _frame_inputs(frame: np.ndarray, trimap: Trimap, stride: int, device: torch.device):
    image = torch.from_numpy(np.ascontiguousarray(frame.transpose(2, 0, 1)))[None].to(device)
    classes = torch.from_numpy(trimap.map.astype(np.float32))[None, None].to(device)
    image, _ = pad_to_multiple(image, stride)
    classes, _ = pad_to_multiple(classes, stride)
    return image, classes[:, 0]


@torch.no_grad()
def predict_clip(net: MattingNet, clip: Clip, trimaps: Sequence[Trimap], n: Optional[int] = None,
                 device: str = "cpu") -> AlphaClip:
    """
    Slide the 2n+1 window over a clip, replicating the end frames

    Each frame is encoded once on its own, so a prediction only depends on
    the frames of its window.

    Args:
        net: Matting network
        clip: Frames to matte
        trimaps: One trimap per frame
        n: Window half-width, defaults to the network's
        device: Torch device

    Returns:
        AlphaClip with one matte per frame
    """
    n = net.n if n is None else n
    if n != net.n:
        raise InvalidInputError(f"network was built for n={net.n}, got n={n}")
    if len(trimaps) != len(clip):
        raise InvalidInputError(f"need one trimap per frame, got {len(trimaps)} for {len(clip)} frames")
    for t, trimap in enumerate(trimaps):
        if trimap.shape != tuple(clip.size):
            raise InvalidInputError(f"trimap {t} is {trimap.shape}, frames are {tuple(clip.size)}")
    device = torch.device(device)
    net = net.to(device).eval()
    length = len(clip)
    height, width = clip.size
    cache: Dict[int, List[torch.Tensor]] = {}
    alphas = np.zeros((length, height, width), np.float32)
    for t in range(length):
        indices = window_indices(t, n, length)
        for i in indices:
            if i not in cache:
                image, classes = _frame_inputs(clip.frames[i], trimaps[i], net.stride, device)
                cache[i] = net.encode(image, classes)
        pyramids = [torch.stack([cache[i][level] for i in indices], dim=1)
                    for level in range(len(cache[indices[0]]))]
        alpha = net.decode(pyramids, n)[0, 0, :height, :width]
        alphas[t] = alpha.cpu().numpy()
        for stale in [i for i in cache if i < t - n]:
            del cache[stale]
    return AlphaClip(np.clip(alphas, 0.0, 1.0))
