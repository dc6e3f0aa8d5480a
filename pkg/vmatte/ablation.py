"""
Ablation harness
Trains and evaluates each variant of a study on the toy set and tabulates the
median metrics over seeds
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import pandas as pd

from .compositor import generate_sample
from .config import ExperimentConfig
from .dataset import training_clips
from .errors import ConfigError
from .trainer import EvalClip, eval_clips, evaluate_model, seed_median, train_matting, train_trimap
from .trimap_prop import labeled_frames, propagate_clip
from .types import CompositeSample

logger = logging.getLogger(__name__)

METRICS = ("sad", "mse", "grad", "conn", "dtssd", "messddt")
HELD_OUT_OFFSET = 100_000

# variant name -> flat config overrides
STUDIES: Dict[str, Dict[str, Dict[str, str]]] = {
    "tfa_tff": {
        "basic": {"matting.use_tfa": "false", "matting.use_tff": "false"},
        "+TFA": {"matting.use_tfa": "true", "matting.use_tff": "false"},
        "+TFA+TFF": {"matting.use_tfa": "true", "matting.use_tff": "true"},
    },
    "window": {f"n={n}": {"matting.n": str(n), "train.n": str(n)} for n in range(1, 5)},
    "fusion": {
        "naive-fusion": {"matting.fusion": "naive"},
        "cross-attention-fusion": {"matting.fusion": "cross-attention"},
        "ST-FAM": {"matting.fusion": "stfam"},
    },
}
# variant name -> trimap supply setting
TRIMAP_SETTINGS = {"full-trimap": "full", "20-frame": "20-frame", "40-frame": "40-frame", "1-trimap": "1-trimap"}
STUDY_NAMES = tuple(STUDIES) + ("trimap",)


def study_variants(study: str) -> List[str]:
    if study == "trimap":
        return list(TRIMAP_SETTINGS)
    if study not in STUDIES:
        raise ConfigError(f"unknown ablation study {study!r}, expected one of {STUDY_NAMES}")
    return list(STUDIES[study])


def held_out_samples(config: ExperimentConfig, count: int) -> List[CompositeSample]:
    """Evaluation clips whose indices never occur in training"""
    return [generate_sample(HELD_OUT_OFFSET + i, config.synth, config.synth.seed) for i in range(count)]


def variant_config(config: ExperimentConfig, overrides: Dict[str, str], seed: int) -> ExperimentConfig:
    values = {**config.to_flat(), **overrides, "train.seed": str(seed)}
    # clips must hold the widest window of the study
    window = 2 * int(values["train.n"]) + int(values["train.targets"])
    values["train.clip_length"] = str(max(int(values["train.clip_length"]), window))
    return ExperimentConfig.from_flat(values).validate()


def trimap_config(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Propagation-network config sharing the matting config's synthesis and network sections"""
    values = {k: v for k, v in config.to_flat().items() if not k.startswith("train.")}
    values.update({"train.net": "trimap", "train.seed": str(seed)})
    return ExperimentConfig.from_flat(values).validate()


def _row(variant: str, runs: Sequence[Dict[str, Optional[float]]]) -> Dict[str, object]:
    row: Dict[str, object] = {"variant": variant, "seeds": len(runs)}
    for name in METRICS:
        values = [r[name] for r in runs if r[name] is not None]
        row[name] = seed_median(values) if values else None
    return row


def _model_study(study: str, variants: Sequence[str], config: ExperimentConfig, seeds: Sequence[int],
                 clips: List[EvalClip], device: str) -> List[Dict[str, object]]:
    rows = []
    for variant in variants:
        runs = []
        for seed in seeds:
            cfg = variant_config(config, STUDIES[study][variant], seed)
            result = train_matting(cfg, training_clips(cfg.train, cfg.synth), device=device)
            _, summary, _ = evaluate_model(result.model, clips, metric_config=cfg.metrics, device=device)
            logger.info("%s %s seed %d: SAD %.4f dtSSD %s", study, variant, seed, summary["sad"], summary["dtssd"])
            runs.append(summary)
        rows.append(_row(variant, runs))
    return rows


def _trimap_study(variants: Sequence[str], config: ExperimentConfig, seeds: Sequence[int],
                  samples: List[CompositeSample], device: str) -> List[Dict[str, object]]:
    runs: Dict[str, List[Dict[str, Optional[float]]]] = {v: [] for v in variants}
    kernel, iterations = config.synth.trimap_kernel, config.synth.trimap_iterations
    gt_clips = eval_clips(samples, kernel, iterations)
    for seed in seeds:
        cfg = variant_config(config, {}, seed)
        matting = train_matting(cfg, training_clips(cfg.train, cfg.synth), device=device).model
        tcfg = trimap_config(cfg, seed)
        propagator = train_trimap(tcfg, training_clips(tcfg.train, tcfg.synth), device=device).model
        for variant in variants:
            fed = []
            for item in gt_clips:
                labeled = {t: item.gt_trimaps[t] for t in labeled_frames(TRIMAP_SETTINGS[variant], len(item.clip))}
                fed.append(propagate_clip(propagator, item.clip, labeled, device))
            clips = [item._replace(trimaps=trimaps) for item, trimaps in zip(gt_clips, fed)]
            _, summary, _ = evaluate_model(matting, clips, metric_config=cfg.metrics, device=device)
            logger.info("trimap %s seed %d: SAD %.4f", variant, seed, summary["sad"])
            runs[variant].append(summary)
    return [_row(variant, runs[variant]) for variant in variants]


def run_ablation(study: str, config: ExperimentConfig, variants: Optional[Iterable[str]] = None,
                 seeds: Sequence[int] = (0, 1, 2), eval_count: int = 3, out_dir: Optional[Path] = None,
                 device: str = "cpu") -> pd.DataFrame:
    """
    Train and evaluate every variant of a study

    Args:
        study: "tfa_tff", "window", "fusion" or "trimap"
        config: Base experiment configuration (matting training)
        variants: Subset of the study's variants, all by default
        seeds: Training seeds; each metric is the median over them
        eval_count: Number of held-out evaluation clips
        out_dir: Writes `<study>.csv` when given
        device: Torch device

    Returns:
        One row per variant with the median of every metric
    """
    known = study_variants(study)
    variants = known if variants is None else list(variants)
    unknown = [v for v in variants if v not in known]
    if unknown:
        raise ConfigError(f"unknown variants {unknown} for study {study!r}, expected {known}")
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    samples = held_out_samples(config, eval_count)
    if study == "trimap":
        rows = _trimap_study(variants, config, seeds, samples, device)
    else:
        clips = eval_clips(samples, config.synth.trimap_kernel, config.synth.trimap_iterations)
        rows = _model_study(study, variants, config, seeds, clips, device)
    table = pd.DataFrame(rows, columns=["variant", *METRICS, "seeds"]).set_index("variant")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / f"{study}.csv")
    return table
