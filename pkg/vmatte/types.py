"""
Domain types shared across the pipeline
Clips, alpha clips, affine tracks, motion fields, composite samples and trimaps
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import InvalidInputError

BACKGROUND, UNKNOWN, FOREGROUND = 0, 1, 2
TRIMAP_VALUES = (BACKGROUND, UNKNOWN, FOREGROUND)


@dataclass
class Clip:
    """RGB frames, shape (T, H, W, 3), float32 in [0, 1]"""

    frames: np.ndarray
    fps: Optional[float] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim == 3 and self.frames.shape[-1] == 3:
            self.frames = self.frames[None]
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise InvalidInputError(f"clip frames must be (T, H, W, 3), got {self.frames.shape}")
        if len(self.frames) < 1:
            raise InvalidInputError("clip must contain at least one frame")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise InvalidInputError("clip values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self):
        return self.frames.shape[1:3]


@dataclass
class AlphaClip:
    """Alpha mattes, shape (T, H, W), float32 in [0, 1]"""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim == 2:
            self.frames = self.frames[None]
        if self.frames.ndim != 3:
            raise InvalidInputError(f"alpha frames must be (T, H, W), got {self.frames.shape}")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise InvalidInputError("alpha values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.frames)

    def matches(self, clip: Clip) -> bool:
        return self.frames.shape == clip.frames.shape[:3]


@dataclass
class AffineTrack:
    """Per-frame pose of the foreground about the frame centre.

    translation: (T, 2) pixels as (dx, dy); rotation: (T,) radians;
    scale: (T,) > 0.
    """

    translation: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(-1, 2)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(-1)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        if not len(self.translation) == len(self.rotation) == len(self.scale):
            raise InvalidInputError("track parameter lengths differ")
        if len(self.scale) < 1:
            raise InvalidInputError("track must have at least one pose")
        if np.any(self.scale <= 0):
            raise InvalidInputError("track scale must be > 0")

    def __len__(self) -> int:
        return len(self.scale)

    def matrix(self, t: int, center) -> np.ndarray:
        """3x3 homogeneous map from foreground to frame coordinates: p' = c + sR(p - c) + d"""
        cx, cy = center
        s, th = self.scale[t], self.rotation[t]
        cos, sin = s * np.cos(th), s * np.sin(th)
        dx, dy = self.translation[t]
        return np.array([
            [cos, -sin, cx - cos * cx + sin * cy + dx],
            [sin, cos, cy - sin * cx - cos * cy + dy],
            [0.0, 0.0, 1.0],
        ])

    def to_dict(self) -> Dict[str, List]:
        return {
            "translation": self.translation.tolist(),
            "rotation": self.rotation.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AffineTrack":
        return cls(data["translation"], data["rotation"], data["scale"])


@dataclass
class MotionField:
    """Displacement (dx, dy) in pixels of every pixel from frame t to t+1, shape (T-1, H, W, 2)"""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 4 or self.vectors.shape[-1] != 2:
            raise InvalidInputError(f"motion field must be (T-1, H, W, 2), got {self.vectors.shape}")

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass
class Trimap:
    """Per-pixel class map: 0 background, 1 unknown, 2 foreground"""

    map: np.ndarray

    def __post_init__(self):
        self.map = np.asarray(self.map)
        if self.map.ndim != 2:
            raise InvalidInputError(f"trimap must be 2-D, got {self.map.shape}")
        if not np.isin(self.map, TRIMAP_VALUES).all():
            raise InvalidInputError("trimap values must be in {0, 1, 2}")
        self.map = self.map.astype(np.uint8)

    @property
    def unknown(self) -> np.ndarray:
        return self.map == UNKNOWN

    @property
    def shape(self):
        return self.map.shape


@dataclass
class CompositeSample:
    """One synthesized clip with every groundtruth quantity"""

    fg: Clip
    bg: Clip
    alpha: AlphaClip
    composite: Clip
    track: AffineTrack
    motion: MotionField
    seed: Optional[int] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.composite)
        if not len(self.fg) == len(self.bg) == len(self.alpha) == len(self.track) == n:
            raise InvalidInputError("sample components have different lengths")
        if len(self.motion) != n - 1:
            raise InvalidInputError("motion field must have one entry per frame pair")
        if not self.alpha.matches(self.composite):
            raise InvalidInputError("alpha and composite sizes differ")

    def __len__(self) -> int:
        return len(self.composite)


@dataclass
class TrainingCube:
    """Aligned crops of 2n + targets frames; the first target sits at index n"""

    composite: np.ndarray
    fg: np.ndarray
    bg: np.ndarray
    alpha: np.ndarray
    trimap: np.ndarray
    center: tuple
    crop_side: int
    flipped: bool
    frame_indices: tuple
    targets: int = 1

    @property
    def n(self) -> int:
        return (len(self.composite) - self.targets) // 2

    @property
    def target_slice(self) -> slice:
        return slice(self.n, self.n + self.targets)
