"""
Synthetic clip compositing
Moves foregrounds over background clips with random affine tracks, emits alpha,
trimaps and exact motion vectors, and cuts multi-scale training cubes
"""

import logging
import math
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from .config import SynthConfig
from .errors import InvalidInputError, SkipSample
from .types import (BACKGROUND, FOREGROUND, UNKNOWN, AffineTrack, AlphaClip, Clip,
                    CompositeSample, MotionField, TrainingCube, Trimap)

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, np.random.SeedSequence, None]


class VelocityCaps(NamedTuple):
    """Largest per-frame change of translation (px), rotation (rad) and scale"""

    translation: float
    rotation: float
    scale: float


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of integers (global seed, sample index, ...)"""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def quantize_8bit(x: np.ndarray) -> np.ndarray:
    """Snap values to the 1/255 grid an 8-bit PNG stores exactly"""
    return np.round(np.asarray(x, dtype=np.float32) * np.float32(255.0)).astype(np.float32) / np.float32(255.0)


def composite(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """
    Compositing equation I = alpha * F + (1 - alpha) * B

    Args:
        fg: Foreground image (..., H, W, 3)
        bg: Background image, same shape as fg
        alpha: Alpha map (..., H, W) in [0, 1]

    Returns:
        Composite clamped to [0, 1]
    """
    fg = np.asarray(fg, dtype=np.float32)
    bg = np.asarray(bg, dtype=np.float32)
    alpha = np.asarray(alpha, dtype=np.float32)
    if fg.shape != bg.shape or fg.shape[:-1] != alpha.shape or fg.shape[-1] != 3:
        raise InvalidInputError(f"shape mismatch: fg {fg.shape}, bg {bg.shape}, alpha {alpha.shape}")
    if alpha.size and (alpha.min() < 0.0 or alpha.max() > 1.0):
        raise InvalidInputError("alpha must lie in [0, 1]")
    a = alpha[..., None]
    return np.clip(a * fg + (1.0 - a) * bg, 0.0, 1.0)


def generate_track(length: int, caps: VelocityCaps, seed: SeedLike,
                   config: Optional[SynthConfig] = None) -> AffineTrack:
    """
    Random continuous affine track

    Keyframes every `config.keyframe_every` frames receive a random per-frame
    velocity bounded by the caps; poses in between are linearly interpolated.

    Args:
        length: Number of frames (>= 1)
        caps: Per-frame velocity caps
        seed: Seed or generator
        config: Scale range, initial jitter and keyframe spacing

    Returns:
        AffineTrack of the given length
    """
    if length < 1:
        raise InvalidInputError(f"track length must be >= 1, got {length}")
    config = config or SynthConfig()
    rng = _rng(seed)
    s_min, s_max = config.scale_min, config.scale_max

    translation = rng.uniform(-config.init_shift, config.init_shift, size=2)
    rotation = rng.uniform(-0.1, 0.1)
    scale = rng.uniform(s_min, s_max)

    keys = list(range(0, length, config.keyframe_every))
    if keys[-1] != length - 1:
        keys.append(length - 1)
    key_t, key_r, key_s = [translation], [rotation], [scale]
    for prev, nxt in zip(keys[:-1], keys[1:]):
        gap = nxt - prev
        v_t = rng.uniform(-caps.translation, caps.translation, size=2)
        v_r = rng.uniform(-caps.rotation, caps.rotation)
        v_s = rng.uniform(-caps.scale, caps.scale)
        key_t.append(key_t[-1] + gap * v_t)
        key_r.append(key_r[-1] + gap * v_r)
        key_s.append(float(np.clip(key_s[-1] + gap * v_s, s_min, s_max)))

    frames = np.arange(length)
    key_t = np.asarray(key_t)
    track = AffineTrack(
        translation=np.stack([np.interp(frames, keys, key_t[:, 0]),
                              np.interp(frames, keys, key_t[:, 1])], axis=1),
        rotation=np.interp(frames, keys, key_r),
        scale=np.interp(frames, keys, key_s),
    )
    return track


def _frame_center(height: int, width: int) -> Tuple[float, float]:
    return (width - 1) / 2.0, (height - 1) / 2.0


def motion_from_track(track: AffineTrack, height: int, width: int) -> MotionField:
    """Closed-form displacement of every pixel under T_{t+1} o T_t^-1"""
    center = _frame_center(height, width)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    grid = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    vectors = np.zeros((max(len(track) - 1, 0), height, width, 2), dtype=np.float32)
    for t in range(len(track) - 1):
        step = track.matrix(t + 1, center) @ np.linalg.inv(track.matrix(t, center))
        moved = step @ grid
        vectors[t, ..., 0] = (moved[0] - grid[0]).reshape(height, width)
        vectors[t, ..., 1] = (moved[1] - grid[1]).reshape(height, width)
    return MotionField(vectors)


def _warp(image: np.ndarray, matrix: np.ndarray, height: int, width: int) -> np.ndarray:
    return cv2.warpAffine(image, matrix[:2].astype(np.float64), (width, height),
                          flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def synthesize(fg: Union[Clip, np.ndarray], fg_alpha: Union[AlphaClip, np.ndarray], bg: Clip,
               track: AffineTrack, quantize: bool = True, seed: Optional[int] = None) -> CompositeSample:
    """
    Composite a moving foreground over a background clip

    Args:
        fg: Foreground clip, or a single (H, W, 3) image reused for every frame
        fg_alpha: Alpha paired with fg (clip or single map)
        bg: Background clip, at least as long as the track
        track: Per-frame affine poses
        quantize: Keep fg, bg and alpha on the 8-bit grid
        seed: Recorded in the sample for the manifest

    Returns:
        CompositeSample with exact motion vectors
    """
    if len(bg) < len(track):
        raise InvalidInputError(f"background has {len(bg)} frames, track needs {len(track)}")
    if isinstance(fg, Clip):
        fg_frames = fg.frames
    else:
        fg_frames = np.asarray(fg, dtype=np.float32)[None]
    alpha_frames = fg_alpha.frames if isinstance(fg_alpha, AlphaClip) else np.asarray(fg_alpha, np.float32)[None]
    if fg_frames.shape[:3] != alpha_frames.shape:
        raise InvalidInputError("foreground and its alpha differ in shape")
    height, width = bg.size
    if fg_frames.shape[1:3] != (height, width):
        raise InvalidInputError(f"foreground size {fg_frames.shape[1:3]} differs from background {(height, width)}")

    length = len(track)
    center = _frame_center(height, width)
    out_fg = np.zeros((length, height, width, 3), np.float32)
    out_alpha = np.zeros((length, height, width), np.float32)
    out_bg = bg.frames[:length].copy()
    for t in range(length):
        src = min(t, len(fg_frames) - 1)
        matrix = track.matrix(t, center)
        out_fg[t] = np.clip(_warp(fg_frames[src], matrix, height, width), 0.0, 1.0)
        out_alpha[t] = np.clip(_warp(alpha_frames[src], matrix, height, width), 0.0, 1.0)
    if quantize:
        out_fg, out_alpha, out_bg = quantize_8bit(out_fg), quantize_8bit(out_alpha), quantize_8bit(out_bg)
    comp = composite(out_fg, out_bg, out_alpha)
    return CompositeSample(
        fg=Clip(out_fg, bg.fps), bg=Clip(out_bg, bg.fps), alpha=AlphaClip(out_alpha),
        composite=Clip(comp, bg.fps), track=track, motion=motion_from_track(track, height, width),
        seed=seed,
    )


def _square(kernel: int) -> np.ndarray:
    side = 2 * kernel - 1
    return np.ones((side, side), np.uint8)


def make_trimap(alpha: np.ndarray, kernel: int, iterations: int) -> Trimap:
    """
    Trimap from a groundtruth alpha by dilation and erosion

    Soft pixels (0 < alpha < 1) are always unknown. The unknown band is the
    dilation of foreground-or-soft minus the erosion of the pure foreground.
    `kernel` k selects a square structuring element of side 2k - 1, so k = 1
    is the identity and every iteration grows the band by k - 1 pixels.

    Args:
        alpha: (H, W) alpha in [0, 1]
        kernel: Structuring element size, >= 1
        iterations: Number of morphology passes, >= 0

    Returns:
        Trimap
    """
    if kernel < 1 or iterations < 0:
        raise InvalidInputError(f"need kernel >= 1 and iterations >= 0, got {kernel}, {iterations}")
    alpha = np.asarray(alpha, dtype=np.float32)
    fg = (alpha >= 1.0).astype(np.uint8)
    support = (alpha > 0.0).astype(np.uint8)
    if iterations > 0 and kernel > 1:
        element = _square(kernel)
        support = cv2.dilate(support, element, iterations=iterations)
        fg = cv2.erode(fg, element, iterations=iterations)
    trimap = np.full(alpha.shape, UNKNOWN, np.uint8)
    trimap[support == 0] = BACKGROUND
    trimap[fg == 1] = FOREGROUND
    return Trimap(trimap)


def random_trimap_params(rng: np.random.Generator, kernel_range: Sequence[int],
                         iteration_range: Sequence[int]) -> Tuple[int, int]:
    """Kernel and iteration count drawn once per cube"""
    kernel = int(rng.integers(kernel_range[0], kernel_range[1] + 1))
    iterations = int(rng.integers(iteration_range[0], iteration_range[1] + 1))
    return kernel, iterations


def crop_square(array: np.ndarray, top: int, left: int, side: int) -> np.ndarray:
    """Square crop with zero fill outside the source"""
    height, width = array.shape[:2]
    out = np.zeros((side, side) + array.shape[2:], array.dtype)
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + side, height), min(left + side, width)
    if y1 > y0 and x1 > x0:
        out[y0 - top:y1 - top, x0 - left:x1 - left] = array[y0:y1, x0:x1]
    return out


def resize_square(array: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    if array.shape[0] == size:
        return array
    interpolation = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.resize(array, (size, size), interpolation=interpolation)


def window_indices(t: int, n: int, length: int) -> Tuple[int, ...]:
    """Frame indices t-n..t+n with the clip ends replicated"""
    return tuple(min(max(t + d, 0), length - 1) for d in range(-n, n + 1))


def crop_cube(sample: CompositeSample, trimaps: Sequence[Trimap], target_t: int, n: int, size: int,
              seed: SeedLike, scales: Sequence[int] = (320, 480, 640), flip_prob: float = 0.5,
              targets: int = 1) -> TrainingCube:
    """
    Training cube of 2n+1 aligned crops around an unknown pixel of the target frame

    With targets > 1 the cube covers frames target_t-n .. target_t+targets-1+n,
    one full window per consecutive target.

    Args:
        sample: Source composite sample
        trimaps: One trimap per frame of the sample
        target_t: First target frame index
        n: Neighbour frames on each side
        size: Output crop side after resizing
        seed: Seed or generator
        scales: Crop sides drawn uniformly before resizing
        flip_prob: Probability of a horizontal flip of the whole cube
        targets: Consecutive target frames

    Returns:
        TrainingCube; raises SkipSample when the target frame has no unknown pixel
    """
    length = len(sample)
    if length < 2 * n + 1:
        raise InvalidInputError(f"sample has {length} frames, window needs {2 * n + 1}")
    if len(trimaps) != length:
        raise InvalidInputError(f"need one trimap per frame, got {len(trimaps)} for {length}")
    if not 0 <= target_t < length:
        raise InvalidInputError(f"target frame {target_t} outside clip of length {length}")
    if targets < 1:
        raise InvalidInputError(f"targets must be >= 1, got {targets}")
    rng = _rng(seed)
    ys, xs = np.nonzero(trimaps[target_t].unknown)
    if len(ys) == 0:
        raise SkipSample(f"frame {target_t} has no unknown pixel")
    pick = int(rng.integers(len(ys)))
    cy, cx = int(ys[pick]), int(xs[pick])
    side = int(rng.choice(np.asarray(scales)))
    flipped = bool(rng.random() < flip_prob)
    top, left = cy - side // 2, cx - side // 2

    indices = tuple(min(max(target_t + d, 0), length - 1) for d in range(-n, n + targets))
    fg, bg, alpha, trimap = [], [], [], []
    for t in indices:
        fg.append(resize_square(crop_square(sample.fg.frames[t], top, left, side), size))
        bg.append(resize_square(crop_square(sample.bg.frames[t], top, left, side), size))
        alpha.append(np.clip(resize_square(crop_square(sample.alpha.frames[t], top, left, side), size), 0.0, 1.0))
        trimap.append(resize_square(crop_square(trimaps[t].map, top, left, side), size, nearest=True))
    fg, bg, alpha, trimap = (np.stack(a) for a in (fg, bg, alpha, trimap))
    if flipped:
        fg, bg, alpha, trimap = (np.ascontiguousarray(a[:, :, ::-1]) for a in (fg, bg, alpha, trimap))
    return TrainingCube(
        composite=composite(fg, bg, alpha), fg=fg, bg=bg, alpha=alpha, trimap=trimap,
        center=(cy, cx), crop_side=side, flipped=flipped, frame_indices=indices, targets=targets,
    )


def procedural_foreground(height: int, width: int, seed: SeedLike,
                          config: Optional[SynthConfig] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Soft-edged random blob with a smooth colour texture

    Args:
        height: Canvas height
        width: Canvas width
        seed: Seed or generator
        config: Blob and edge smoothing

    Returns:
        (image (H, W, 3), alpha (H, W)); alpha is exactly 0 or 1 away from the edge
    """
    config = config or SynthConfig()
    rng = _rng(seed)
    noise = rng.standard_normal((height, width)).astype(np.float32)
    smooth = cv2.GaussianBlur(noise, (0, 0), config.blob_sigma * min(height, width) / 160.0)
    smooth /= smooth.std() + 1e-6
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float32)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    radius = np.hypot((xs - cx) / (0.28 * width), (ys - cy) / (0.28 * height))
    mask = ((1.0 - radius) + 0.35 * smooth > 0.0).astype(np.float32)
    edge = config.edge_sigma * min(height, width) / 160.0
    alpha = cv2.GaussianBlur(mask, (0, 0), max(edge, 0.5))
    alpha[alpha < 1.0 / 255.0] = 0.0
    alpha[alpha > 1.0 - 1.0 / 255.0] = 1.0

    image = np.empty((height, width, 3), np.float32)
    base = rng.uniform(0.25, 0.75, size=3)
    for c in range(3):
        tex = cv2.GaussianBlur(rng.standard_normal((height, width)).astype(np.float32), (0, 0), 4.0)
        tex /= tex.std() + 1e-6
        image[..., c] = base[c] + 0.15 * np.tanh(tex)
    return np.clip(image, 0.0, 1.0), np.clip(alpha, 0.0, 1.0)


def procedural_background(length: int, height: int, width: int, seed: SeedLike,
                          pan: float = 1.5) -> Clip:
    """Textured background seen through a slowly panning camera"""
    rng = _rng(seed)
    margin = int(math.ceil(pan * length)) + 2
    big_h, big_w = height + 2 * margin, width + 2 * margin
    texture = np.empty((big_h, big_w, 3), np.float32)
    ramp = np.linspace(0.0, 1.0, big_w, dtype=np.float32)[None, :]
    for c in range(3):
        coarse = cv2.GaussianBlur(rng.standard_normal((big_h, big_w)).astype(np.float32), (0, 0), 10.0)
        fine = cv2.GaussianBlur(rng.standard_normal((big_h, big_w)).astype(np.float32), (0, 0), 1.5)
        coarse /= coarse.std() + 1e-6
        fine /= fine.std() + 1e-6
        texture[..., c] = rng.uniform(0.2, 0.8) + 0.2 * np.tanh(coarse) + 0.05 * fine + 0.1 * (ramp - 0.5)
    texture = np.clip(texture, 0.0, 1.0)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    velocity = pan * np.array([np.cos(angle), np.sin(angle)])
    frames = []
    for t in range(length):
        dx, dy = np.rint(velocity * t).astype(int)
        y0, x0 = margin + dy, margin + dx
        frames.append(texture[y0:y0 + height, x0:x0 + width])
    return Clip(np.stack(frames))


def generate_sample(index: int, config: SynthConfig, seed: Optional[int] = None) -> CompositeSample:
    """
    Fully procedural composite sample

    Randomness is keyed by (seed, index) so samples do not depend on the
    order or the worker that produces them.

    Args:
        index: Sample index
        config: Synthesis configuration
        seed: Global seed, defaults to config.seed

    Returns:
        CompositeSample
    """
    global_seed = config.seed if seed is None else seed
    sample_seed = derive_seed(global_seed, index)
    fg_seed, bg_seed, track_seed = (derive_seed(sample_seed, k) for k in range(3))
    image, alpha = procedural_foreground(config.size, config.size, fg_seed, config)
    bg = procedural_background(config.frames, config.size, config.size, bg_seed, config.bg_pan)
    caps = VelocityCaps(config.translation_cap, config.rotation_cap, config.scale_cap)
    track = generate_track(config.frames, caps, track_seed, config)
    sample = synthesize(image, alpha, bg, track, quantize=config.quantize, seed=sample_seed)
    sample.meta.update(index=index, global_seed=global_seed)
    return sample


def sample_trimaps(sample: CompositeSample, kernel: int, iterations: int) -> list:
    """One trimap per frame with shared morphology parameters"""
    return [make_trimap(a, kernel, iterations) for a in sample.alpha.frames]
