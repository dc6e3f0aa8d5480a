"""
Matting evaluation metrics
SAD, MSE, Grad and Conn per frame plus the dtSSD and MESSDdt temporal metrics,
all restricted to an evaluation mask (the groundtruth unknown region by default)
"""

import functools
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .config import MetricConfig
from .errors import InvalidInputError
from .types import AlphaClip, MotionField, Trimap

logger = logging.getLogger(__name__)


@dataclass
class MetricReport:
    """Metric values of one clip with the counts used to normalize them"""

    sad: float
    mse: float
    grad: float
    conn: float
    dtssd: Optional[float]
    messddt: Optional[float]
    pixels: int
    frames: int

    def to_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def _prepare(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray]) -> Tuple[np.ndarray, ...]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if pred.shape != gt.shape or pred.ndim != 3:
        raise InvalidInputError(f"pred {pred.shape} and gt {gt.shape} must be equal (T, H, W) arrays")
    mask = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != pred.shape:
        raise InvalidInputError(f"mask {mask.shape} does not match alpha {pred.shape}")
    if not mask.any():
        raise InvalidInputError("evaluation mask is empty")
    return pred, gt, mask


def sad(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None, scale: float = 1e-3) -> float:
    """Sum of absolute differences over the mask, scaled, averaged over frames"""
    pred, gt, mask = _prepare(pred, gt, mask)
    per_frame = (np.abs(pred - gt) * mask).sum(axis=(1, 2)) * scale
    return float(per_frame.mean())


def per_frame_sad(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None,
                  scale: float = 1e-3) -> np.ndarray:
    pred, gt, mask = _prepare(pred, gt, mask)
    return (np.abs(pred - gt) * mask).sum(axis=(1, 2)) * scale


def mse(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None, scale: float = 1.0) -> float:
    """Mean squared error over the masked pixels of each frame, averaged over frames with a mask"""
    pred, gt, mask = _prepare(pred, gt, mask)
    counts = mask.sum(axis=(1, 2))
    sums = (((pred - gt) ** 2) * mask).sum(axis=(1, 2))
    valid = counts > 0
    return float((sums[valid] / counts[valid]).mean() * scale)


def _gaussian(x, sigma):
    return np.exp(-x ** 2 / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))


def _dgaussian(x, sigma):
    return -x * _gaussian(x, sigma) / sigma ** 2


@functools.lru_cache(maxsize=8)
def gauss_filter(sigma: float, epsilon: float = 1e-2) -> Tuple[np.ndarray, np.ndarray]:
    """First-order Gaussian-derivative filters (x, y), unit Frobenius norm"""
    half = np.ceil(sigma * np.sqrt(-2 * np.log(np.sqrt(2 * np.pi) * sigma * epsilon)))
    offsets = np.arange(-half, half + 1)
    filter_x = np.outer(_gaussian(offsets, sigma), _dgaussian(offsets, sigma))
    filter_x /= np.sqrt((filter_x ** 2).sum())
    return filter_x, filter_x.T.copy()


def gauss_gradient(image: np.ndarray, sigma: float = 1.4) -> Tuple[np.ndarray, np.ndarray]:
    filter_x, filter_y = gauss_filter(float(sigma))
    image = np.asarray(image, dtype=np.float64)
    gx = cv2.filter2D(image, -1, filter_x, borderType=cv2.BORDER_REPLICATE)
    gy = cv2.filter2D(image, -1, filter_y, borderType=cv2.BORDER_REPLICATE)
    return gx, gy


def grad_err(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None, sigma: float = 1.4,
             scale: float = 1e-3) -> float:
    """Masked sum of |grad(pred) - grad(gt)|^2 with Gaussian-derivative gradients, averaged over frames"""
    pred, gt, mask = _prepare(pred, gt, mask)
    per_frame = []
    for p, g, m in zip(pred, gt, mask):
        px, py = gauss_gradient(p, sigma)
        gx, gy = gauss_gradient(g, sigma)
        per_frame.append((((px - gx) ** 2 + (py - gy) ** 2) * m).sum() * scale)
    return float(np.mean(per_frame))


def _largest_component(binary: np.ndarray) -> np.ndarray:
    count, labels, stats, _ = cv2.connectedComponentsWithStats(binary.astype(np.uint8), connectivity=4)
    if count <= 1:
        return np.zeros(binary.shape, bool)
    largest = int(np.argmax(stats[1:, cv2.CC_STAT_AREA])) + 1
    return labels == largest


def _round_down_map(pred: np.ndarray, gt: np.ndarray, step: float) -> np.ndarray:
    levels = int(round(1.0 / step))
    thresholds = np.arange(0, levels) / float(levels)
    round_down = -np.ones(gt.shape)
    for i in range(1, len(thresholds)):
        omega = _largest_component((gt >= thresholds[i]) & (pred >= thresholds[i]))
        fresh = (round_down == -1) & ~omega
        round_down[fresh] = thresholds[i - 1]
    round_down[round_down == -1] = 1.0
    return round_down


def conn_err(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None, step: float = 0.1,
             scale: float = 1e-3) -> float:
    """
    Connectivity error, averaged over frames

    Outside the mask the prediction is replaced by the groundtruth, so the
    largest jointly connected component only depends on masked predictions.
    """
    pred, gt, mask = _prepare(pred, gt, mask)
    per_frame = []
    for p, g, m in zip(pred, gt, mask):
        p = np.where(m, p, g)
        round_down = _round_down_map(p, g, step)
        gt_diff = g - round_down
        pred_diff = p - round_down
        gt_phi = 1 - gt_diff * (gt_diff >= 0.15)
        pred_phi = 1 - pred_diff * (pred_diff >= 0.15)
        per_frame.append((np.abs(gt_phi - pred_phi) * m).sum() * scale)
    return float(np.mean(per_frame))


def dtssd(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None, scale: float = 100.0) -> float:
    """
    Root of the mean squared temporal-derivative mismatch per frame pair,
    averaged over pairs; the mask of the earlier frame selects pixels
    """
    pred, gt, mask = _prepare(pred, gt, mask)
    if len(pred) < 2:
        raise InvalidInputError("dtSSD needs at least 2 frames")
    diff = np.diff(pred, axis=0) - np.diff(gt, axis=0)
    values = []
    for d, m in zip(diff, mask[:-1]):
        count = m.sum()
        if count:
            values.append(np.sqrt((d ** 2 * m).sum() / count))
    if not values:
        raise InvalidInputError("evaluation mask is empty on every frame pair")
    return float(np.mean(values) * scale)


def _bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    height, width = image.shape
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = xs - x0
    wy = ys - y0
    top = image[y0, x0] * (1 - wx) + image[y0, x1] * wx
    bottom = image[y1, x0] * (1 - wx) + image[y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def messddt(pred: np.ndarray, gt: np.ndarray, motion: Optional[MotionField],
            mask: Optional[np.ndarray] = None, scale: float = 1000.0) -> float:
    """
    Mean |e_t(p) - e_{t+1}(p + v_p)| over masked pixels and frame pairs, where
    e is the squared alpha error and v the groundtruth motion; the advected
    error is read by bilinear lookup and pixels advected off-frame are skipped
    """
    pred, gt, mask = _prepare(pred, gt, mask)
    if motion is None:
        raise InvalidInputError("MESSDdt needs a motion field")
    vectors = motion.vectors if isinstance(motion, MotionField) else np.asarray(motion)
    if vectors.shape != (len(pred) - 1,) + pred.shape[1:] + (2,):
        raise InvalidInputError(f"motion {vectors.shape} does not match {len(pred) - 1} frame pairs of "
                                f"{pred.shape[1:]}")
    height, width = pred.shape[1:]
    total, count = 0.0, 0
    for t in range(len(pred) - 1):
        ys, xs = np.nonzero(mask[t])
        qx = xs + vectors[t, ys, xs, 0].astype(np.float64)
        qy = ys + vectors[t, ys, xs, 1].astype(np.float64)
        inside = (qx >= 0) & (qx <= width - 1) & (qy >= 0) & (qy <= height - 1)
        if not inside.any():
            continue
        ys, xs, qx, qy = ys[inside], xs[inside], qx[inside], qy[inside]
        now = (pred[t, ys, xs] - gt[t, ys, xs]) ** 2
        advected = (_bilinear(pred[t + 1], qx, qy) - _bilinear(gt[t + 1], qx, qy)) ** 2
        total += np.abs(now - advected).sum()
        count += len(ys)
    if count == 0:
        raise InvalidInputError("every masked pixel leaves the frame under the motion field")
    return float(total / count * scale)


def evaluation_mask(trimaps: Sequence[Trimap], shape: Tuple[int, ...], mode: str = "unknown") -> np.ndarray:
    """Unknown region of the groundtruth trimaps, or every pixel in "full" mode"""
    if mode == "full":
        return np.ones(shape, bool)
    if mode != "unknown":
        raise InvalidInputError(f"unknown mask mode {mode!r}")
    if len(trimaps) != shape[0]:
        raise InvalidInputError(f"need one trimap per frame, got {len(trimaps)} for {shape[0]}")
    return np.stack([t.unknown for t in trimaps])


def evaluate_sequence(pred: AlphaClip, gt: AlphaClip, mask: np.ndarray, motion: Optional[MotionField] = None,
                      config: Optional[MetricConfig] = None) -> MetricReport:
    """
    Every metric of one predicted clip

    Args:
        pred: Predicted alpha
        gt: Groundtruth alpha
        mask: (T, H, W) evaluation mask
        motion: Groundtruth motion; MESSDdt is omitted without it
        config: Scales and filter parameters

    Returns:
        MetricReport; temporal metrics are None for single-frame clips
    """
    config = config or MetricConfig()
    if len(pred) != len(gt):
        raise InvalidInputError(f"prediction has {len(pred)} frames, groundtruth {len(gt)}")
    p, g = pred.frames, gt.frames
    temporal = len(p) >= 2
    report = MetricReport(
        sad=sad(p, g, mask, config.sad_scale),
        mse=mse(p, g, mask, config.mse_scale),
        grad=grad_err(p, g, mask, config.grad_sigma, config.grad_scale),
        conn=conn_err(p, g, mask, config.conn_step, config.conn_scale),
        dtssd=dtssd(p, g, mask, config.dtssd_scale) if temporal else None,
        messddt=messddt(p, g, motion, mask, config.messddt_scale) if temporal and motion is not None else None,
        pixels=int(np.asarray(mask).sum()),
        frames=len(p),
    )
    logger.debug("evaluated %d frames: SAD %.4f, dtSSD %s", report.frames, report.sad, report.dtssd)
    return report


def aggregate(reports: Sequence[MetricReport]) -> Dict[str, Optional[float]]:
    """Mean of every metric over clips; a metric missing in any clip stays None"""
    if not reports:
        raise InvalidInputError("no reports to aggregate")
    out: Dict[str, Optional[float]] = {}
    for name in ("sad", "mse", "grad", "conn", "dtssd", "messddt"):
        values: List[Optional[float]] = [getattr(r, name) for r in reports]
        out[name] = None if any(v is None for v in values) else float(np.mean(values))
    out["clips"] = len(reports)
    return out
