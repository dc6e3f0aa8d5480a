"""
File formats of the pipeline
PNG frame sequences, trimap/alpha maps, binary motion fields and the dataset manifest
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import cv2
import numpy as np

from .errors import FormatError, InvalidInputError
from .types import AlphaClip, Clip, MotionField, Trimap

logger = logging.getLogger(__name__)

FRAME_PATTERN = "frame_{:05d}.png"
TRIMAP_CODES = np.array([0, 128, 255], np.uint8)
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SAMPLE_KEYS = ("name", "index", "seed", "frames", "height", "width", "composite", "fg", "bg",
               "alpha", "trimap", "motion", "track", "trimap_params")


def frame_paths(directory: Path) -> List[Path]:
    """Sorted frame_XXXXX.png files of a directory"""
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInputError(f"frame directory not found: {directory}")
    return sorted(directory.glob("frame_*.png"))


def _imread(path: Path) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise FormatError(f"cannot read image {path}")
    return image


def _imwrite(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), image):
        raise FormatError(f"cannot write image {path}")


def _to_unit(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / np.float32(255.0)
    if image.dtype == np.uint16:
        return image.astype(np.float32) / np.float32(65535.0)
    raise FormatError(f"unsupported PNG sample type {image.dtype}")


def write_frames(directory: Path, frames: np.ndarray) -> List[Path]:
    """Write (T, H, W, 3) frames in [0, 1] as 8-bit RGB PNGs"""
    directory = Path(directory)
    paths = []
    for t, frame in enumerate(np.asarray(frames)):
        path = directory / FRAME_PATTERN.format(t)
        data = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
        _imwrite(path, cv2.cvtColor(data, cv2.COLOR_RGB2BGR))
        paths.append(path)
    return paths


def read_frames(directory: Path) -> Clip:
    """Read an RGB PNG sequence into a Clip"""
    paths = frame_paths(directory)
    if not paths:
        raise InvalidInputError(f"no frame_*.png files in {directory}")
    frames = []
    for path in paths:
        image = _imread(path)
        if image.ndim == 2:
            image = cv2.cvtColor(image, cv2.COLOR_GRAY2BGR)
        elif image.shape[2] == 4:
            image = image[..., :3]
        frames.append(_to_unit(cv2.cvtColor(image, cv2.COLOR_BGR2RGB)))
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FormatError(f"frames in {directory} have different sizes: {sorted(shapes)}")
    return Clip(np.stack(frames))


def write_alpha_frames(directory: Path, frames: np.ndarray, bits: int = 8) -> List[Path]:
    """Write (T, H, W) alpha mattes as 8- or 16-bit grayscale PNGs"""
    if bits not in (8, 16):
        raise InvalidInputError(f"alpha PNGs are 8 or 16 bit, got {bits}")
    dtype, peak = (np.uint8, 255.0) if bits == 8 else (np.uint16, 65535.0)
    directory = Path(directory)
    paths = []
    for t, frame in enumerate(np.asarray(frames)):
        path = directory / FRAME_PATTERN.format(t)
        _imwrite(path, np.round(np.clip(frame, 0.0, 1.0) * peak).astype(dtype))
        paths.append(path)
    return paths


def read_alpha_frames(directory: Path) -> AlphaClip:
    """Read grayscale alpha PNGs; bit depth is detected per file"""
    paths = frame_paths(directory)
    if not paths:
        raise InvalidInputError(f"no frame_*.png files in {directory}")
    frames = []
    for path in paths:
        image = _imread(path)
        if image.ndim == 3:
            image = image[..., 0]
        frames.append(_to_unit(image))
    return AlphaClip(np.stack(frames))


def encode_trimap(trimap: Trimap) -> np.ndarray:
    return TRIMAP_CODES[trimap.map]


def decode_trimap(image: np.ndarray) -> Trimap:
    """Map {0, 128, 255} PNG codes to trimap classes"""
    if image.ndim == 3:
        image = image[..., 0]
    if image.dtype != np.uint8:
        raise FormatError(f"trimap PNGs must be 8-bit, got {image.dtype}")
    classes = np.full(image.shape, 255, np.uint8)
    for cls, code in enumerate(TRIMAP_CODES):
        classes[image == code] = cls
    if (classes == 255).any():
        raise FormatError("trimap PNG contains values outside {0, 128, 255}")
    return Trimap(classes)


def write_trimap(path: Path, trimap: Trimap) -> Path:
    path = Path(path)
    _imwrite(path, encode_trimap(trimap))
    return path


def read_trimap(path: Path) -> Trimap:
    return decode_trimap(_imread(Path(path)))


def write_trimaps(directory: Path, trimaps: Sequence[Trimap], indices: Optional[Sequence[int]] = None) -> List[Path]:
    directory = Path(directory)
    indices = range(len(trimaps)) if indices is None else indices
    return [write_trimap(directory / FRAME_PATTERN.format(t), tm) for t, tm in zip(indices, trimaps)]


def read_trimaps(directory: Path) -> Dict[int, Trimap]:
    """Trimaps keyed by the frame index encoded in the file name"""
    out = {}
    for path in frame_paths(directory):
        try:
            index = int(path.stem.split("_")[1])
        except (IndexError, ValueError) as exc:
            raise FormatError(f"unexpected trimap file name {path.name}") from exc
        out[index] = read_trimap(path)
    return out


def write_motion(path: Path, motion: MotionField) -> Path:
    """Frame pairs concatenated: int32 H, int32 W, then H*W*2 float32 (dx, dy), little-endian"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        for field in motion.vectors:
            height, width = field.shape[:2]
            fh.write(struct.pack("<ii", height, width))
            fh.write(np.ascontiguousarray(field, dtype="<f4").tobytes())
    return path


def read_motion(path: Path) -> MotionField:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"motion file not found: {path}")
    data = path.read_bytes()
    fields, offset = [], 0
    while offset < len(data):
        if offset + 8 > len(data):
            raise FormatError(f"truncated motion header in {path}")
        height, width = struct.unpack_from("<ii", data, offset)
        offset += 8
        nbytes = height * width * 2 * 4
        if height <= 0 or width <= 0 or offset + nbytes > len(data):
            raise FormatError(f"truncated or invalid motion record in {path}")
        fields.append(np.frombuffer(data, dtype="<f4", count=height * width * 2, offset=offset)
                      .reshape(height, width, 2).astype(np.float32))
        offset += nbytes
    if not fields:
        return MotionField(np.zeros((0, 1, 1, 2), np.float32))
    return MotionField(np.stack(fields))


def validate_manifest(manifest: Dict[str, Any]) -> Dict[str, Any]:
    """Check the manifest structure documented in docs/manifest.schema.json"""
    if not isinstance(manifest, dict):
        raise FormatError("manifest must be a JSON object")
    for key, kind in (("version", int), ("seed", int), ("config", dict), ("samples", list)):
        if not isinstance(manifest.get(key), kind):
            raise FormatError(f"manifest field {key!r} missing or not {kind.__name__}")
    if manifest["version"] != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest['version']}")
    for entry in manifest["samples"]:
        if not isinstance(entry, dict):
            raise FormatError("manifest samples must be objects")
        missing = [k for k in SAMPLE_KEYS if k not in entry]
        if missing:
            raise FormatError(f"sample {entry.get('name', '?')} lacks {missing}")
        track = entry["track"]
        if not isinstance(track, dict) or any(len(track.get(k, [])) != entry["frames"]
                                              for k in ("translation", "rotation", "scale")):
            raise FormatError(f"sample {entry['name']} has a track of the wrong length")
    return manifest


def write_manifest(directory: Path, manifest: Dict[str, Any]) -> Path:
    validate_manifest(manifest)
    path = Path(directory) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(directory: Path) -> Dict[str, Any]:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise InvalidInputError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    return validate_manifest(manifest)
