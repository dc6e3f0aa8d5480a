"""
Trimap propagation
Carries a user trimap from a reference frame to other frames of the clip
through dual encoders and an attention correlation layer
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrimapNetConfig
from .encoder import ResidualEncoder, pad_to_multiple, skip_plan, trimap_channel
from .errors import InvalidInputError
from .types import Clip, Trimap

logger = logging.getLogger(__name__)

SETTINGS = ("full", "N-frame", "1-trimap")


class CorrelationLayer(nn.Module):
    """
    Attention read-out of a memory feature at the locations a target matches

    S = rowsoftmax(Q(F_t) K(F_r)^T / sqrt(c)); output = F_t + S V(M_r)

    Args:
        channels: Channels c of the target and reference features
        key_channels: Width of the query/key projections, defaults to c
        memory_channels: Channels of the memory feature, defaults to c
    """

    def __init__(self, channels: int, key_channels: Optional[int] = None, memory_channels: Optional[int] = None):
        super().__init__()
        key_channels = key_channels or channels
        memory_channels = memory_channels or channels
        self.channels = channels
        self.query = nn.Conv2d(channels, key_channels, 1)
        self.key = nn.Conv2d(channels, key_channels, 1)
        self.value = nn.Conv2d(memory_channels, channels, 1)
        self.scale = 1.0 / math.sqrt(channels)

    def _check(self, target: torch.Tensor, reference: torch.Tensor, memory: torch.Tensor) -> None:
        if target.dim() != 4 or reference.dim() != 4 or memory.dim() != 4:
            raise InvalidInputError("correlation inputs must be (B, C, h, w)")
        if target.shape[:2] != reference.shape[:2]:
            raise InvalidInputError(f"target {tuple(target.shape)} and reference {tuple(reference.shape)} differ")
        if memory.shape[0] != reference.shape[0] or memory.shape[-2:] != reference.shape[-2:]:
            raise InvalidInputError("memory must share batch and spatial size with the reference")

    def similarity(self, target: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (B, h_t*w_t, h_r*w_r) matrix"""
        q = self.query(target).flatten(2).transpose(1, 2)
        k = self.key(reference).flatten(2)
        return torch.softmax(torch.bmm(q, k) * self.scale, dim=-1)

    def attend(self, target: torch.Tensor, reference: torch.Tensor,
               memory: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Residual read-out S V(M_r) shaped like the target, and S"""
        self._check(target, reference, memory)
        sim = self.similarity(target, reference)
        values = self.value(memory).flatten(2).transpose(1, 2)
        read = torch.bmm(sim, values).transpose(1, 2).reshape(target.shape)
        return read, sim

    def forward(self, target: torch.Tensor, reference: torch.Tensor,
                memory: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        read, sim = self.attend(target, reference, memory)
        return target + read, sim


@dataclass
class ReferenceFeatures:
    """Deepest reference feature F_r and its trimap-carrying memory M_r"""

    feature: torch.Tensor
    memory: torch.Tensor


class TrimapPropagationNet(nn.Module):
    """
    Reference (RGB + trimap) and target (RGB) encoders of the same structure,
    a correlation layer on their deepest features and a U-Net style decoder
    ending in a 3-class classification head
    """

    def __init__(self, config: Optional[TrimapNetConfig] = None):
        super().__init__()
        self.config = (config or TrimapNetConfig()).validate()
        encoder = self.config.encoder
        self.stride = encoder.total_stride
        self.reference_encoder = ResidualEncoder(4, encoder)
        self.target_encoder = ResidualEncoder(3, encoder)
        channels = encoder.widths[-1]
        self.memory_head = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True))
        self.correlation = CorrelationLayer(channels, self.config.key_channels)
        self.plan = skip_plan(encoder)
        steps, prev = [], channels
        for width, skip in zip(self.config.decoder_widths, self.plan):
            in_channels = prev + (encoder.widths[skip] if skip is not None else 0)
            steps.append(nn.Sequential(nn.Conv2d(in_channels, width, 3, padding=1, bias=False),
                                       nn.BatchNorm2d(width), nn.ReLU(inplace=True)))
            prev = width
        self.decoder = nn.ModuleList(steps)
        self.head = nn.Conv2d(prev, 3, 1)

    @staticmethod
    def _check_pair(image: torch.Tensor, trimap: Optional[torch.Tensor] = None) -> None:
        if image.dim() != 4 or image.shape[1] != 3:
            raise InvalidInputError(f"images must be (B, 3, H, W), got {tuple(image.shape)}")
        if trimap is not None and (trimap.shape[0] != image.shape[0] or trimap.shape[-2:] != image.shape[-2:]):
            raise InvalidInputError(f"trimap {tuple(trimap.shape)} does not match image {tuple(image.shape)}")

    def encode_pair(self, image: torch.Tensor, trimap: torch.Tensor) -> ReferenceFeatures:
        """Reference feature and memory from an image (B, 3, H, W) and its class map (B, H, W)"""
        self._check_pair(image, trimap)
        x = torch.cat([image, trimap_channel(trimap, image.dtype)], dim=1)
        feature = self.reference_encoder(x)[-1]
        return ReferenceFeatures(feature, self.memory_head(feature))

    def encode_target(self, image: torch.Tensor) -> List[torch.Tensor]:
        """Target pyramid; the last entry is F_t"""
        self._check_pair(image)
        return self.target_encoder(image)

    def correlate(self, target: torch.Tensor, reference: ReferenceFeatures) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.correlation(target, reference.feature, reference.memory)

    def decode(self, enhanced: torch.Tensor, pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
        x = enhanced
        for step, skip in zip(self.decoder, self.plan):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            if skip is not None:
                x = torch.cat([x, pyramid[skip]], dim=1)
            x = step(x)
        return self.head(x)

    def forward(self, reference_image: torch.Tensor, reference_trimap: torch.Tensor,
                target_image: torch.Tensor) -> torch.Tensor:
        """Class logits (B, 3, H, W) of the target frame"""
        self._check_pair(reference_image, reference_trimap)
        self._check_pair(target_image)
        if target_image.shape != reference_image.shape:
            raise InvalidInputError("reference and target frames must have the same size")
        reference_image, size = pad_to_multiple(reference_image, self.stride)
        target_image, _ = pad_to_multiple(target_image, self.stride)
        reference_trimap, _ = pad_to_multiple(reference_trimap.unsqueeze(1).float(), self.stride)
        reference = self.encode_pair(reference_image, reference_trimap.squeeze(1).round().long())
        logits = self.propagate_features(reference, target_image)
        return logits[..., :size[0], :size[1]]

    propagate = forward

    def propagate_features(self, reference: ReferenceFeatures, target_image: torch.Tensor) -> torch.Tensor:
        """Logits for a padded target frame given cached reference features"""
        pyramid = self.encode_target(target_image)
        enhanced, _ = self.correlate(pyramid[-1], reference)
        return self.decode(enhanced, pyramid)


def pick_reference(t: int, labeled: Iterable[int]) -> int:
    """Nearest labeled frame in time; ties go to the earlier frame"""
    labeled = sorted(set(int(r) for r in labeled))
    if not labeled:
        raise InvalidInputError("no labeled frame to propagate from")
    return min(labeled, key=lambda r: (abs(t - r), r))


def labeled_frames(setting: str, length: int, every: Optional[int] = None) -> Set[int]:
    """
    Frames that carry a user trimap under a supply setting

    Args:
        setting: "full", "1-trimap", "N-frame" (with `every`) or e.g. "20-frame"
        length: Clip length
        every: Spacing of labeled frames for the N-frame setting

    Returns:
        Set of frame indices, always containing frame 0
    """
    if length < 1:
        raise InvalidInputError("clip length must be >= 1")
    if setting == "full":
        return set(range(length))
    if setting == "1-trimap":
        return {0}
    match = re.fullmatch(r"(\d+|N)-frame", setting)
    if match is None:
        raise InvalidInputError(f"unknown trimap setting {setting!r}, expected one of {SETTINGS}")
    if match.group(1) != "N":
        every = int(match.group(1))
    if every is None or every < 1:
        raise InvalidInputError("N-frame setting needs a spacing >= 1")
    return set(range(0, length, every))


def _frame_tensor(frame: np.ndarray, device: torch.device) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frame.transpose(2, 0, 1)))[None].to(device)


@torch.no_grad()
def propagate_clip(net: TrimapPropagationNet, clip: Clip, labeled: Dict[int, Trimap],
                   device: str = "cpu") -> List[Trimap]:
    """
    One trimap per frame; labeled frames are copied through and every other
    frame propagates directly from its nearest labeled frame

    Args:
        net: Trained propagation network
        clip: Frames of the clip
        labeled: User trimaps keyed by frame index
        device: Torch device

    Returns:
        List of Trimap, one per frame
    """
    if not labeled:
        raise InvalidInputError("no labeled frame to propagate from")
    length = len(clip)
    for t, trimap in labeled.items():
        if not 0 <= t < length:
            raise InvalidInputError(f"labeled frame {t} outside clip of length {length}")
        if trimap.shape != tuple(clip.size):
            raise InvalidInputError(f"trimap of frame {t} is {trimap.shape}, frames are {tuple(clip.size)}")
    device = torch.device(device)
    net = net.to(device).eval()
    height, width = clip.size
    cache: Dict[int, ReferenceFeatures] = {}
    out = []
    for t in range(length):
        if t in labeled:
            out.append(Trimap(labeled[t].map.copy()))
            continue
        r = pick_reference(t, labeled)
        if r not in cache:
            image, _ = pad_to_multiple(_frame_tensor(clip.frames[r], device), net.stride)
            trimap = torch.from_numpy(labeled[r].map.astype(np.float32))[None, None].to(device)
            trimap, _ = pad_to_multiple(trimap, net.stride)
            cache[r] = net.encode_pair(image, trimap[:, 0].long())
        target, _ = pad_to_multiple(_frame_tensor(clip.frames[t], device), net.stride)
        logits = net.propagate_features(cache[r], target)[..., :height, :width]
        out.append(Trimap(logits.argmax(dim=1)[0].cpu().numpy().astype(np.uint8)))
        logger.debug("propagated frame %d from reference %d", t, r)
    return out
