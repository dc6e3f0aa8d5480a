"""
Training and evaluation loops
Adam training of the trimap propagation and matting networks with seeded data,
per-epoch learning-rate schedules, CSV logs, checkpoints and resume
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .compositor import sample_trimaps
from .config import ExperimentConfig, MetricConfig, TrainConfig
from .dataset import MattingCubes, TrimapPairs, collate_cubes
from .errors import DivergenceError, InvalidInputError
from .losses import LossBatch, LossWeights, total_loss, trimap_loss
from .matting_net import MattingNet, predict_clip
from .metrics import MetricReport, aggregate, evaluation_mask, evaluate_sequence
from .trimap_prop import TrimapPropagationNet
from .types import AlphaClip, Clip, CompositeSample, MotionField, Trimap

logger = logging.getLogger(__name__)

StepFn = Callable[[torch.nn.Module, Any, torch.device], Tuple[torch.Tensor, Dict[str, float]]]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: torch.nn.Module
    history: pd.DataFrame
    path: Optional[Path] = None


class EvalClip(NamedTuple):
    """One evaluation clip: frames, groundtruth alpha, trimaps fed to the net, optional motion"""

    clip: Clip
    alpha: AlphaClip
    trimaps: Sequence[Trimap]
    motion: Optional[MotionField] = None
    gt_trimaps: Optional[Sequence[Trimap]] = None


def lr_at(epoch: int, config: TrainConfig) -> float:
    """
    Learning rate of an epoch

    linear: lr_init at epoch 0 down to lr_final at the last epoch.
    hold-exp: lr_init for hold_epochs epochs, then multiplied by decay_rate
    once per further epoch.
    """
    if epoch < 0:
        raise InvalidInputError(f"epoch must be >= 0, got {epoch}")
    if config.decay == "linear":
        if config.epochs <= 1:
            return config.lr_init
        frac = min(epoch, config.epochs - 1) / (config.epochs - 1)
        return config.lr_init + (config.lr_final - config.lr_init) * frac
    if epoch < config.hold_epochs:
        return config.lr_init
    return config.lr_init * config.decay_rate ** (epoch - config.hold_epochs + 1)


def _matting_step(weights: LossWeights) -> StepFn:
    def step(model, batch, device):
        frames, trimaps, cubes = batch
        pred = model(frames.to(device), trimaps.to(device))
        breakdown = total_loss(LossBatch.from_cubes(pred, cubes), weights)
        terms = breakdown.as_floats()
        terms["kl_degenerate"] = float(breakdown.kl_degenerate)
        return breakdown.total, terms
    return step


def _trimap_step(model, batch, device):
    logits = model(batch["reference"].to(device), batch["reference_trimap"].to(device),
                   batch["target"].to(device))
    loss = trimap_loss(logits, batch["target_trimap"].to(device))
    return loss, {"ce": float(loss.detach()), "total": float(loss.detach())}


def _fit(kind: str, model: torch.nn.Module, dataset, config: ExperimentConfig, step_fn: StepFn,
         out_dir: Optional[Path], resume: Optional[Path], device: str,
         collate: Optional[Callable] = None) -> TrainResult:
    train = config.train
    device = torch.device(device)
    model = model.to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr_at(0, train))
    start_epoch, step = 0, 0
    if resume is not None:
        ckpt = load_checkpoint(resume, kind)
        ckpt.restore_model(model)
        ckpt.restore_optimizer(optimizer)
        ckpt.restore_rng()
        start_epoch, step = ckpt.epoch, ckpt.step
        logger.info("resuming %s training at epoch %d, step %d", kind, start_epoch, step)

    path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{kind}.vmck"
    rows: List[Dict[str, float]] = []
    checkpoint = None
    for epoch in range(start_epoch, train.epochs):
        lr = lr_at(epoch, train)
        for group in optimizer.param_groups:
            group["lr"] = lr
        dataset.set_epoch(epoch)
        loader = DataLoader(dataset, batch_size=train.batch_size, shuffle=False, num_workers=train.workers,
                            collate_fn=collate)
        model.train()
        for batch in tqdm(loader, desc=f"{kind} epoch {epoch + 1}/{train.epochs}", leave=False):
            loss, terms = step_fn(model, batch, device)
            if not torch.isfinite(loss):
                raise DivergenceError(step, terms)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            rows.append({"step": step, "epoch": epoch, "lr": lr, **terms})
            if step % train.log_every == 0:
                logger.info("%s step %d epoch %d lr %.2e loss %.5f", kind, step, epoch, lr, terms["total"])
        checkpoint = Checkpoint.capture(kind, model, optimizer, epoch=epoch + 1, step=step,
                                        config=config.to_flat())
        if path is not None:
            save_checkpoint(path, checkpoint)
    if checkpoint is None:
        checkpoint = Checkpoint.capture(kind, model, optimizer, epoch=start_epoch, step=step,
                                        config=config.to_flat())

    history = pd.DataFrame(rows)
    if out_dir is not None:
        log_path = out_dir / f"{kind}_log.csv"
        if resume is not None and log_path.is_file():
            history = pd.concat([pd.read_csv(log_path), history], ignore_index=True)
        history.to_csv(log_path, index=False)
    model.eval()
    return TrainResult(checkpoint=checkpoint, model=model, history=history, path=path)


def train_trimap(config: ExperimentConfig, samples: Sequence[CompositeSample], out_dir: Optional[Path] = None,
                 resume: Optional[Path] = None, device: str = "cpu") -> TrainResult:
    """
    Train the trimap propagation network with per-pixel cross-entropy

    Args:
        config: Validated experiment configuration (train.net == "trimap")
        samples: Training clips
        out_dir: Where the checkpoint and CSV log go; nothing is written without it
        resume: Checkpoint to continue from
        device: Torch device

    Returns:
        TrainResult with the final checkpoint, trained model and per-step history
    """
    config.validate()
    if not samples:
        raise InvalidInputError("training needs at least one clip")
    torch.manual_seed(config.train.seed)
    model = TrimapPropagationNet(config.trimap)
    dataset = TrimapPairs(samples, config.train)
    return _fit("trimap", model, dataset, config, _trimap_step, out_dir, resume, device)


def train_matting(config: ExperimentConfig, samples: Sequence[CompositeSample], out_dir: Optional[Path] = None,
                  resume: Optional[Path] = None, device: str = "cpu") -> TrainResult:
    """Train the matting network on seeded cubes with the combined loss; see train_trimap"""
    config.validate()
    if not samples:
        raise InvalidInputError("training needs at least one clip")
    torch.manual_seed(config.train.seed)
    model = MattingNet(config.matting)
    dataset = MattingCubes(samples, config.train)
    step = _matting_step(LossWeights.from_config(config.train))
    return _fit("matting", model, dataset, config, step, out_dir, resume, device, collate=collate_cubes)


def load_model(path: Path, kind: str) -> Tuple[torch.nn.Module, ExperimentConfig]:
    """Rebuild a network from the config snapshot inside its checkpoint"""
    ckpt = load_checkpoint(path, kind)
    config = ExperimentConfig.from_flat(ckpt.config)
    model = MattingNet(config.matting) if kind == "matting" else TrimapPropagationNet(config.trimap)
    ckpt.restore_model(model)
    return model.eval(), config


def evaluate_model(net: MattingNet, clips: Sequence[EvalClip], n: Optional[int] = None,
                   metric_config: Optional[MetricConfig] = None,
                   device: str = "cpu") -> Tuple[List[MetricReport], Dict[str, Optional[float]], List[AlphaClip]]:
    """
    Predict every clip and score it

    The evaluation mask comes from gt_trimaps when given, otherwise from the
    trimaps fed to the network.

    Returns:
        Per-clip reports, their aggregate and the predictions
    """
    metric_config = metric_config or MetricConfig()
    reports, predictions = [], []
    for item in clips:
        pred = predict_clip(net, item.clip, item.trimaps, n, device)
        mask_trimaps = item.gt_trimaps if item.gt_trimaps is not None else item.trimaps
        mask = evaluation_mask(mask_trimaps, item.alpha.frames.shape, metric_config.mask)
        reports.append(evaluate_sequence(pred, item.alpha, mask, item.motion, metric_config))
        predictions.append(pred)
    return reports, aggregate(reports), predictions


def eval_clips(samples: Sequence[CompositeSample], kernel: int, iterations: int,
               trimaps: Optional[Sequence[Sequence[Trimap]]] = None) -> List[EvalClip]:
    """Evaluation clips from composite samples with groundtruth trimaps from their alpha"""
    out = []
    for i, sample in enumerate(samples):
        gt_trimaps = sample_trimaps(sample, kernel, iterations)
        fed = gt_trimaps if trimaps is None else trimaps[i]
        out.append(EvalClip(sample.composite, sample.alpha, fed, sample.motion, gt_trimaps))
    return out


def seed_median(values: Sequence[float]) -> float:
    """Median over seeds"""
    return float(np.median(np.asarray(values, dtype=np.float64)))
