"""
Synthetic datasets on disk and in memory
Writes and re-loads manifest-described sample directories and serves seeded
training cubes (matting) and frame pairs (trimap propagation) to torch
"""

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from .compositor import (VelocityCaps, crop_cube, crop_square, derive_seed, generate_sample, generate_track,
                         make_trimap, procedural_background, procedural_foreground, random_trimap_params,
                         resize_square, sample_trimaps, synthesize)
from .config import SynthConfig, TrainConfig
from .errors import InvalidInputError, SkipSample
from .io import (MANIFEST_VERSION, frame_paths, read_alpha_frames, read_frames, read_manifest, read_motion,
                 read_trimaps, write_alpha_frames, write_frames, write_manifest, write_motion, write_trimaps)
from .types import AffineTrack, Clip, CompositeSample, TrainingCube, Trimap

logger = logging.getLogger(__name__)

SAMPLE_NAME = "sample_{:05d}"
MAX_DRAWS = 16


def write_sample(root: Path, index: int, sample: CompositeSample, trimaps: Sequence[Trimap],
                 trimap_params: Tuple[int, int]) -> Dict[str, Any]:
    """Write one sample directory and return its manifest entry"""
    name = SAMPLE_NAME.format(index)
    base = Path(root) / name
    write_frames(base / "composite", sample.composite.frames)
    write_frames(base / "fg", sample.fg.frames)
    write_frames(base / "bg", sample.bg.frames)
    write_alpha_frames(base / "alpha", sample.alpha.frames, bits=8)
    write_trimaps(base / "trimap", trimaps)
    write_motion(base / "motion.bin", sample.motion)
    height, width = sample.composite.size
    return {
        "name": name, "index": index, "seed": int(sample.seed or 0), "frames": len(sample),
        "height": int(height), "width": int(width),
        "composite": f"{name}/composite", "fg": f"{name}/fg", "bg": f"{name}/bg",
        "alpha": f"{name}/alpha", "trimap": f"{name}/trimap", "motion": f"{name}/motion.bin",
        "track": sample.track.to_dict(),
        "trimap_params": {"kernel": trimap_params[0], "iterations": trimap_params[1]},
    }


def load_sample(root: Path, entry: Dict[str, Any]) -> Tuple[CompositeSample, List[Trimap]]:
    """Re-load a sample and its trimaps from a manifest entry"""
    root = Path(root)
    composite = read_frames(root / entry["composite"])
    sample = CompositeSample(
        fg=read_frames(root / entry["fg"]), bg=read_frames(root / entry["bg"]),
        alpha=read_alpha_frames(root / entry["alpha"]), composite=composite,
        track=AffineTrack.from_dict(entry["track"]), motion=read_motion(root / entry["motion"]),
        seed=entry["seed"], meta={"name": entry["name"], "index": entry["index"]},
    )
    trimaps = read_trimaps(root / entry["trimap"])
    ordered = [trimaps[t] for t in sorted(trimaps)]
    if len(ordered) != len(sample):
        raise InvalidInputError(f"{entry['name']} has {len(ordered)} trimaps for {len(sample)} frames")
    return sample, ordered


def load_dataset(root: Path) -> List[Tuple[CompositeSample, List[Trimap]]]:
    manifest = read_manifest(root)
    return [load_sample(root, entry) for entry in manifest["samples"]]


def _rgba_images(directory: Path) -> List[Path]:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise InvalidInputError(f"no PNG foregrounds in {directory}")
    return paths


def load_foreground(path: Path, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """RGBA PNG -> (image, alpha) resized to a square canvas"""
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None or image.ndim != 3 or image.shape[2] != 4:
        raise InvalidInputError(f"foreground {path} must be an RGBA PNG")
    scale = 65535.0 if image.dtype == np.uint16 else 255.0
    image = cv2.resize(image, (size, size), interpolation=cv2.INTER_AREA).astype(np.float32) / scale
    rgb = cv2.cvtColor(np.ascontiguousarray(image[..., :3]), cv2.COLOR_BGR2RGB)
    return np.clip(rgb, 0.0, 1.0), np.clip(image[..., 3], 0.0, 1.0)


def load_background(directory: Path, length: int, size: int) -> Clip:
    """Frame sequence resized to a square canvas; short clips play forward then backward"""
    clip = read_frames(directory)
    frames = [cv2.resize(f, (size, size), interpolation=cv2.INTER_AREA) for f in clip.frames]
    cycle = frames + frames[-2:0:-1] if len(frames) > 1 else frames
    return Clip(np.clip(np.stack([cycle[t % len(cycle)] for t in range(length)]), 0.0, 1.0))


def _background_dirs(bg_dir: Path) -> List[Path]:
    bg_dir = Path(bg_dir)
    if not bg_dir.is_dir():
        raise InvalidInputError(f"background directory not found: {bg_dir}")
    if list(bg_dir.glob("frame_*.png")):
        return [bg_dir]
    dirs = sorted(d for d in bg_dir.iterdir() if d.is_dir() and frame_paths(d))
    if not dirs:
        raise InvalidInputError(f"no frame sequences in {bg_dir}")
    return dirs


def build_sample(index: int, config: SynthConfig, seed: int, fg_mode: str = "procedural",
                 fg_dir: Optional[Path] = None, bg_dir: Optional[Path] = None) -> CompositeSample:
    """One sample; randomness depends only on (seed, index)"""
    if fg_mode == "procedural" and bg_dir is None:
        return generate_sample(index, config, seed)
    sample_seed = derive_seed(seed, index)
    fg_seed, bg_seed, track_seed = (derive_seed(sample_seed, k) for k in range(3))
    if fg_mode == "files":
        if fg_dir is None:
            raise InvalidInputError("--fg-mode files needs a foreground directory")
        paths = _rgba_images(fg_dir)
        image, alpha = load_foreground(paths[index % len(paths)], config.size)
    elif fg_mode == "procedural":
        image, alpha = procedural_foreground(config.size, config.size, fg_seed, config)
    else:
        raise InvalidInputError(f"unknown foreground mode {fg_mode!r}")
    if bg_dir is not None:
        dirs = _background_dirs(bg_dir)
        bg = load_background(dirs[index % len(dirs)], config.frames, config.size)
    else:
        bg = procedural_background(config.frames, config.size, config.size, bg_seed, config.bg_pan)
    caps = VelocityCaps(config.translation_cap, config.rotation_cap, config.scale_cap)
    track = generate_track(config.frames, caps, track_seed, config)
    sample = synthesize(image, alpha, bg, track, quantize=config.quantize, seed=sample_seed)
    sample.meta.update(index=index, global_seed=seed)
    return sample


def _synthesize_one(args) -> Dict[str, Any]:
    root, index, config, seed, fg_mode, fg_dir, bg_dir = args
    sample = build_sample(index, config, seed, fg_mode, fg_dir, bg_dir)
    params = (config.trimap_kernel, config.trimap_iterations)
    return write_sample(root, index, sample, sample_trimaps(sample, *params), params)


def synthesize_dataset(root: Path, num: int, config: SynthConfig, seed: Optional[int] = None,
                       fg_mode: str = "procedural", fg_dir: Optional[Path] = None,
                       bg_dir: Optional[Path] = None, workers: int = 0) -> Path:
    """
    Write `num` samples and the manifest under `root`

    Args:
        root: Output directory
        num: Number of samples
        config: Synthesis configuration
        seed: Global seed, defaults to config.seed
        fg_mode: "procedural" or "files"
        fg_dir: RGBA foreground PNGs for "files" mode
        bg_dir: Background frame sequences (one directory or a directory of them)
        workers: Process count; 0 runs in-process. Output never depends on it.

    Returns:
        Path of the manifest
    """
    if num < 1:
        raise InvalidInputError("need at least one sample")
    config.validate()
    seed = config.seed if seed is None else seed
    if fg_mode == "files":
        if fg_dir is None:
            raise InvalidInputError("--fg-mode files needs a foreground directory")
        _rgba_images(fg_dir)
    if bg_dir is not None:
        _background_dirs(bg_dir)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(root, i, config, seed, fg_mode, fg_dir, bg_dir) for i in range(num)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(tqdm(pool.map(_synthesize_one, jobs), total=num, desc="synthesize"))
    else:
        entries = [_synthesize_one(job) for job in tqdm(jobs, desc="synthesize")]
    synth = dataclasses.asdict(config)
    synth["seed"] = seed
    manifest = {"version": MANIFEST_VERSION, "seed": seed, "config": synth,
                "samples": sorted(entries, key=lambda e: e["index"])}
    path = write_manifest(root, manifest)
    logger.info("wrote %d samples to %s", num, root)
    return path


def training_clips(config: TrainConfig, synth: SynthConfig) -> List[CompositeSample]:
    """In-memory procedural clips sized by the training recipe"""
    clip_config = SynthConfig(**{**vars(synth), "frames": config.clip_length, "size": config.frame_size})
    return [generate_sample(i, clip_config, config.seed) for i in range(config.num_clips)]


def _window_trimaps(sample: CompositeSample, indices: Sequence[int], kernel: int,
                    iterations: int) -> List[Optional[Trimap]]:
    trimaps: List[Optional[Trimap]] = [None] * len(sample)
    for t in set(indices):
        trimaps[t] = make_trimap(sample.alpha.frames[t], kernel, iterations)
    return trimaps


def _can_have_unknown(sample: CompositeSample) -> bool:
    # constant alpha (all 0 or all 1) stays constant under dilation and erosion
    alpha = sample.alpha.frames
    return bool(alpha.max() > 0.0 and alpha.min() < 1.0)


class MattingCubes(Dataset):
    """
    Seeded training cubes; item i of epoch e always draws from the generator
    keyed by (seed, e, i), so loader workers never change the data

    Clips whose alpha is constant are dropped up front. An item whose clip
    yields no unknown region in MAX_DRAWS draws moves on to the next clip.
    """

    def __init__(self, samples: Sequence[CompositeSample], config: TrainConfig, epoch: int = 0):
        if not samples:
            raise InvalidInputError("training needs at least one clip")
        usable = [s for s in samples if _can_have_unknown(s)]
        if not usable:
            raise InvalidInputError("no training clip has an unknown region")
        if len(usable) < len(samples):
            logger.warning("skipping %d of %d clips with constant alpha", len(samples) - len(usable), len(samples))
        self.samples = usable
        self.config = config
        self.epoch = epoch

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return self.config.steps_per_epoch * self.config.batch_size

    def _draw(self, sample: CompositeSample, rng: np.random.Generator) -> TrainingCube:
        cfg = self.config
        length = len(sample)
        for _ in range(MAX_DRAWS):
            kernel, iterations = random_trimap_params(rng, cfg.trimap_kernel_range, cfg.trimap_iteration_range)
            target = int(rng.integers(max(length - cfg.targets + 1, 1)))
            indices = [min(max(target + d, 0), length - 1) for d in range(-cfg.n, cfg.n + cfg.targets)]
            trimaps = _window_trimaps(sample, indices, kernel, iterations)
            try:
                return crop_cube(sample, trimaps, target, cfg.n, cfg.crop_size, rng, cfg.crop_scales,
                                 cfg.flip_prob, targets=cfg.targets)
            except SkipSample:
                continue
        raise SkipSample(f"no frame with an unknown region after {MAX_DRAWS} draws")

    def __getitem__(self, index: int) -> TrainingCube:
        rng = np.random.default_rng(derive_seed(self.config.seed, self.epoch, index))
        count = len(self.samples)
        for k in range(count):
            try:
                return self._draw(self.samples[(index + k) % count], rng)
            except SkipSample:
                logger.debug("item %d: clip %d skipped", index, (index + k) % count)
        raise InvalidInputError(f"no training clip yields an unknown region for item {index}")


def collate_cubes(cubes: Sequence[TrainingCube]):
    """Stack cubes into network inputs (B, L, 3, H, W), (B, L, H, W) and keep the cubes"""
    frames = torch.from_numpy(np.stack([c.composite for c in cubes])).permute(0, 1, 4, 2, 3).contiguous()
    trimaps = torch.from_numpy(np.stack([c.trimap for c in cubes]).astype(np.int64))
    return frames, trimaps, list(cubes)


def color_jitter(image: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Random brightness, contrast and saturation factors in [1 - strength, 1 + strength]"""
    if strength <= 0:
        return image
    brightness, contrast, saturation = rng.uniform(1 - strength, 1 + strength, size=3)
    out = image * brightness
    out = (out - out.mean()) * contrast + out.mean()
    gray = out @ np.array([0.299, 0.587, 0.114], np.float32)
    out = (out - gray[..., None]) * saturation + gray[..., None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


class TrimapPairs(Dataset):
    """
    Reference/target frame pairs of one clip with their groundtruth trimaps

    Both frames share the crop and flip; colour jitter is drawn per frame.
    """

    def __init__(self, samples: Sequence[CompositeSample], config: TrainConfig, epoch: int = 0):
        if not samples:
            raise InvalidInputError("training needs at least one clip")
        if any(len(s) < 2 for s in samples):
            raise InvalidInputError("trimap pairs need clips of at least 2 frames")
        self.samples = list(samples)
        self.config = config
        self.epoch = epoch

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return self.config.steps_per_epoch * self.config.batch_size

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        cfg = self.config
        rng = np.random.default_rng(derive_seed(cfg.seed, self.epoch, index))
        sample = self.samples[index % len(self.samples)]
        reference, target = (int(t) for t in rng.choice(len(sample), size=2, replace=False))
        kernel, iterations = random_trimap_params(rng, cfg.trimap_kernel_range, cfg.trimap_iteration_range)
        trimaps = {t: make_trimap(sample.alpha.frames[t], kernel, iterations).map for t in (reference, target)}
        ys, xs = np.nonzero(trimaps[reference] == 1)
        height, width = sample.composite.size
        if len(ys):
            pick = int(rng.integers(len(ys)))
            cy, cx = int(ys[pick]), int(xs[pick])
        else:
            cy, cx = height // 2, width // 2
        side = int(rng.choice(np.asarray(cfg.crop_scales)))
        flip = bool(rng.random() < cfg.flip_prob)
        top, left = cy - side // 2, cx - side // 2

        out = {}
        for key, t in (("reference", reference), ("target", target)):
            image = resize_square(crop_square(sample.composite.frames[t], top, left, side), cfg.crop_size)
            trimap = resize_square(crop_square(trimaps[t], top, left, side), cfg.crop_size, nearest=True)
            if flip:
                image, trimap = image[:, ::-1], trimap[:, ::-1]
            image = color_jitter(np.ascontiguousarray(image), rng, cfg.jitter)
            out[key] = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
            out[f"{key}_trimap"] = torch.from_numpy(np.ascontiguousarray(trimap).astype(np.int64))
        return out
