"""
Evaluation reports
JSON metric reports, per-frame SAD tables and their line plots
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .errors import InvalidInputError
from .metrics import MetricReport, per_frame_sad
from .types import AlphaClip

logger = logging.getLogger(__name__)


def report_to_json(per_clip: Sequence[MetricReport], aggregate: Dict[str, Any],
                   names: Optional[Sequence[str]] = None, path: Optional[Path] = None) -> Dict[str, Any]:
    """Per-clip and aggregate metrics as a JSON-ready dict, written to `path` when given"""
    names = list(names) if names is not None else [f"clip_{i:05d}" for i in range(len(per_clip))]
    if len(names) != len(per_clip):
        raise InvalidInputError(f"{len(names)} names for {len(per_clip)} reports")
    report = {
        "clips": [{"name": name, **r.to_dict()} for name, r in zip(names, per_clip)],
        "aggregate": dict(aggregate),
    }
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2))
    return report


def per_frame_sad_csv(predictions: Sequence[AlphaClip], groundtruth: Sequence[AlphaClip],
                      masks: Sequence[np.ndarray], names: Sequence[str], path: Optional[Path] = None,
                      scale: float = 1e-3) -> pd.DataFrame:
    """
    Long table of (clip, frame, sad); frames without masked pixels score 0

    Args:
        predictions: Predicted alpha per clip
        groundtruth: Groundtruth alpha per clip
        masks: (T, H, W) evaluation masks per clip
        names: Clip names
        path: CSV destination
        scale: SAD reporting scale

    Returns:
        The table written to `path`
    """
    if not len(predictions) == len(groundtruth) == len(masks) == len(names):
        raise InvalidInputError("predictions, groundtruth, masks and names must have equal length")
    rows = []
    for name, pred, gt, mask in zip(names, predictions, groundtruth, masks):
        values = per_frame_sad(pred.frames, gt.frames, mask, scale)
        rows.extend({"clip": name, "frame": t, "sad": float(v)} for t, v in enumerate(values))
    table = pd.DataFrame(rows, columns=["clip", "frame", "sad"])
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False)
    return table


def plot_per_frame_sad(csv_path: Path, output_path: Path) -> Path:
    """One SAD-over-time line per clip"""
    table = pd.read_csv(csv_path)
    if table.empty:
        raise InvalidInputError(f"{csv_path} has no rows to plot")

    fig, ax = plt.subplots(figsize=(10, 5))
    for name, group in table.groupby("clip", sort=True):
        ax.plot(group["frame"], group["sad"], linewidth=1.5, label=str(name))
    ax.set_xlabel('Frame')
    ax.set_ylabel('SAD')
    ax.set_title('Per-frame SAD')
    ax.grid(True, alpha=0.3)
    if table["clip"].nunique() <= 10:
        ax.legend()

    plt.tight_layout()
    plt.savefig(output_path, dpi=150, bbox_inches='tight')
    plt.close(fig)
    logger.info("per-frame SAD plot saved to %s", output_path)
    return Path(output_path)
