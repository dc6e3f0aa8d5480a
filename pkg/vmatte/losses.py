"""
Training losses of the matting and trimap networks
Alpha, composition, gradient-weighted, KL-divergence and temporal coherence
terms over (B, T, H, W) alpha sequences
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .errors import InvalidInputError
from .types import UNKNOWN, TrainingCube

logger = logging.getLogger(__name__)

KL_EPS = 1e-8
TERMS = ("alpha", "comp", "grad", "kl", "temporal")

_SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))


@dataclass
class LossBatch:
    """
    Aligned prediction and groundtruth sequences

    pred, gt, mask: (B, T, H, W); fg, bg, composite: (B, T, 3, H, W).
    mask marks the transition (unknown) pixels.
    """

    pred: torch.Tensor
    gt: torch.Tensor
    fg: torch.Tensor
    bg: torch.Tensor
    composite: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        shape = tuple(self.pred.shape)
        if len(shape) != 4:
            raise InvalidInputError(f"pred must be (B, T, H, W), got {shape}")
        if tuple(self.gt.shape) != shape or tuple(self.mask.shape) != shape:
            raise InvalidInputError("pred, gt and mask shapes differ")
        colour = shape[:2] + (3,) + shape[2:]
        for name in ("fg", "bg", "composite"):
            if tuple(getattr(self, name).shape) != colour:
                raise InvalidInputError(f"{name} must be {colour}, got {tuple(getattr(self, name).shape)}")
        self.mask = self.mask.bool()

    @classmethod
    def from_cubes(cls, pred: torch.Tensor, cubes: Sequence[TrainingCube]) -> "LossBatch":
        """Batch the target frames of training cubes under a (B, targets, H, W) prediction"""

        def stack(name: str, colour: bool) -> torch.Tensor:
            arrays = [getattr(c, name)[c.target_slice] for c in cubes]
            data = torch.from_numpy(np.stack(arrays))
            if colour:
                data = data.permute(0, 1, 4, 2, 3)
            return data.to(device=pred.device, dtype=pred.dtype)

        mask = torch.from_numpy(np.stack([c.trimap[c.target_slice] == UNKNOWN for c in cubes]))
        return cls(pred=pred, gt=stack("alpha", False), fg=stack("fg", True), bg=stack("bg", True),
                   composite=stack("composite", True), mask=mask.to(pred.device))


class KLTerm(NamedTuple):
    value: torch.Tensor
    degenerate: bool


@dataclass
class LossWeights:
    alpha: float = 1.0
    comp: float = 1.0
    grad: float = 1.0
    kl: float = 1.0
    temporal: float = 1.0

    @classmethod
    def from_config(cls, config: TrainConfig) -> "LossWeights":
        return cls(config.w_alpha, config.w_comp, config.w_grad, config.w_kl, config.w_temporal)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: Dict[str, torch.Tensor] = field(default_factory=dict)
    kl_degenerate: bool = False

    def as_floats(self) -> Dict[str, float]:
        out = {name: float(value.detach()) for name, value in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def alpha_loss(batch: LossBatch) -> torch.Tensor:
    """Squared error where the groundtruth is 0 or 1, absolute error in the transition"""
    diff = batch.pred - batch.gt
    opaque = (batch.gt == 0) | (batch.gt == 1)
    return torch.where(opaque, diff * diff, diff.abs())


def composition_loss(batch: LossBatch) -> torch.Tensor:
    """Colour-averaged L1 reconstruction error of the composite, transition pixels only"""
    a = batch.pred.unsqueeze(2)
    recon = torch.clamp(a * batch.fg + (1 - a) * batch.bg, 0.0, 1.0)
    error = (recon - batch.composite).abs().mean(dim=2)
    return error * batch.mask.to(error.dtype)


def sobel(alpha: torch.Tensor):
    """Horizontal and vertical 3x3 Sobel responses of (B, T, H, W) maps, replicate padding"""
    kx = torch.tensor(_SOBEL_X, dtype=alpha.dtype, device=alpha.device)
    weight = torch.stack([kx, kx.t()]).unsqueeze(1)
    flat = alpha.reshape(-1, 1, *alpha.shape[-2:])
    grads = F.conv2d(F.pad(flat, (1, 1, 1, 1), mode="replicate"), weight)
    gx = grads[:, 0].reshape(alpha.shape)
    gy = grads[:, 1].reshape(alpha.shape)
    return gx, gy


def gradient_loss(batch: LossBatch) -> torch.Tensor:
    """|G(pred) - G(gt)|_1 used as a per-pixel weight of the alpha loss"""
    px, py = sobel(batch.pred)
    gx, gy = sobel(batch.gt)
    return ((px - gx).abs() + (py - gy).abs()) * alpha_loss(batch)


def kl_loss(batch: LossBatch, eps: float = KL_EPS) -> KLTerm:
    """
    KL(pred || gt) of the sum-normalized maps, per frame, averaged over frames

    Frames whose groundtruth has no mass contribute 0 and set the degenerate flag.
    """
    pred = batch.pred.flatten(2)
    gt = batch.gt.flatten(2)
    gt_mass = gt.sum(dim=-1)
    p = pred / (pred.sum(dim=-1, keepdim=True) + eps)
    q = gt / (gt_mass.unsqueeze(-1) + eps)
    per_frame = (p * (torch.log(p + eps) - torch.log(q + eps))).sum(dim=-1)
    empty = gt_mass <= 0
    per_frame = torch.where(empty, torch.zeros_like(per_frame), per_frame)
    return KLTerm(per_frame.mean(), bool(empty.any()))


def temporal_loss(batch: LossBatch) -> torch.Tensor:
    """Squared mismatch of forward temporal differences, (B, T-1, H, W); zeros for one frame"""
    if batch.pred.shape[1] < 2:
        return torch.zeros_like(batch.pred[:, :1])
    d_pred = batch.pred[:, 1:] - batch.pred[:, :-1]
    d_gt = batch.gt[:, 1:] - batch.gt[:, :-1]
    return (d_pred - d_gt) ** 2


def total_loss(batch: LossBatch, weights: Optional[LossWeights] = None) -> LossBreakdown:
    """
    Weighted sum of the mean of every term

    Args:
        batch: Aligned sequences
        weights: Per-term weights, all 1 by default

    Returns:
        LossBreakdown with the scalar total and each unweighted term
    """
    weights = weights or LossWeights()
    kl = kl_loss(batch)
    if kl.degenerate:
        logger.debug("KL term skipped frames without groundtruth mass")
    terms = {
        "alpha": alpha_loss(batch).mean(),
        "comp": composition_loss(batch).mean(),
        "grad": gradient_loss(batch).mean(),
        "kl": kl.value,
        "temporal": temporal_loss(batch).mean(),
    }
    total = sum(getattr(weights, name) * terms[name] for name in TERMS)
    return LossBreakdown(total=total, terms=terms, kl_degenerate=kl.degenerate)


def trimap_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel 3-class cross-entropy of (B, 3, H, W) logits against a (B, H, W) class map"""
    return F.cross_entropy(logits, target.long())
