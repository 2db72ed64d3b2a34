"""Frame decoding, mask cleanup and back-projection into per-object point clouds.

A frame directory holds ``depth.png`` (16-bit), ``fruit_mask.png`` (16-bit instance ids),
``semantic_mask.png`` (8-bit class labels) and ``intrinsics.json``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict
from enum import IntEnum
from pathlib import Path
from typing import List, NamedTuple, Optional

import cv2
import numpy as np
from scipy import ndimage

from .errors import FrameError

logger = logging.getLogger(__name__)

DEPTH_FILE = "depth.png"
FRUIT_MASK_FILE = "fruit_mask.png"
SEMANTIC_MASK_FILE = "semantic_mask.png"
INTRINSICS_FILE = "intrinsics.json"

DEFAULT_MIN_REGION_AREA = 200
DEFAULT_DEPTH_SCALE = 0.001
DEDUPE_TOLERANCE = 1e-9

# 8-connectivity
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class SemanticClass(IntEnum):
    BACKGROUND = 0
    BRANCH_TRUNK = 1
    OTHER_ELEMENT = 2


OBSTACLE_CLASSES = (SemanticClass.BRANCH_TRUNK, SemanticClass.OTHER_ELEMENT)
FRUIT_LABEL = "fruit"


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = DEFAULT_DEPTH_SCALE

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise FrameError(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise FrameError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        if not self.depth_scale > 0:
            raise FrameError(f"depth_scale must be positive, got {self.depth_scale}")

    @classmethod
    def from_dict(cls, data: dict) -> "CameraIntrinsics":
        try:
            return cls(
                fx=float(data["fx"]),
                fy=float(data["fy"]),
                cx=float(data["cx"]),
                cy=float(data["cy"]),
                width=int(data["width"]),
                height=int(data["height"]),
                depth_scale=float(data.get("depth_scale", DEFAULT_DEPTH_SCALE)),
            )
        except KeyError as e:
            raise FrameError(f"intrinsics missing field {e.args[0]!r}") from e
        except (TypeError, ValueError) as e:
            raise FrameError(f"intrinsics field is not numeric: {e}") from e

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CameraFrame:
    depth: np.ndarray
    fruit_mask: np.ndarray
    semantic_mask: np.ndarray
    intrinsics: CameraIntrinsics
    frame_id: str = "frame"

    @property
    def shape(self) -> tuple:
        return self.depth.shape


@dataclass
class ObjectCloud:
    """Labeled point set in the camera frame, one row per point (metres)."""
    points: np.ndarray
    label: str
    instance_id: Optional[int] = None
    source_pixel_count: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        self.points = pts.reshape(-1, 3)

    @classmethod
    def from_points(cls, points: np.ndarray, label: str, instance_id: Optional[int] = None,
                    source_pixel_count: Optional[int] = None) -> "ObjectCloud":
        """Build a cloud, dropping points that repeat within 1e-9 m (first occurrence kept)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        count = len(pts) if source_pixel_count is None else source_pixel_count
        return cls(dedupe_points(pts), label, instance_id, int(count))

    @property
    def name(self) -> str:
        return f"{self.label}:{self.instance_id}" if self.instance_id is not None else self.label

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> "ObjectCloud":
        return ObjectCloud(points, self.label, self.instance_id, self.source_pixel_count)


def dedupe_points(points: np.ndarray, tol: float = DEDUPE_TOLERANCE) -> np.ndarray:
    if len(points) < 2:
        return points
    snapped = np.round(points / tol).astype(np.int64)
    _, first = np.unique(snapped, axis=0, return_index=True)
    if len(first) == len(points):
        return points
    return points[np.sort(first)]


# --- mask cleanup ---
def remove_small_regions(mask: np.ndarray, min_area: int) -> np.ndarray:
    """Clear every 8-connected component smaller than ``min_area`` pixels."""
    if min_area < 0:
        raise ValueError(f"min_area must be >= 0, got {min_area}")
    binary = np.asarray(mask).astype(bool)
    if min_area <= 1 or not binary.any():
        return binary
    labels, n = ndimage.label(binary, structure=_EIGHT_CONNECTED)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


# --- back-projection ---
def backproject(u: float, v: float, d: float, intr: CameraIntrinsics) -> Point3:
    """Pinhole back-projection of pixel (u, v) at ``d`` depth units.

    ``d == 0`` marks a depth hole; callers skip such pixels.
    """
    if d <= 0:
        raise ValueError("depth 0 marks a hole; skip the pixel")
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValueError(f"pixel ({u}, {v}) outside image")
    z = d * intr.depth_scale
    return Point3((u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z)


def backproject_pixels(us: np.ndarray, vs: np.ndarray, ds: np.ndarray,
                       intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized :func:`backproject`; returns an N×3 array."""
    z = np.asarray(ds, dtype=np.float64) * intr.depth_scale
    x = (np.asarray(us, dtype=np.float64) - intr.cx) * z / intr.fx
    y = (np.asarray(vs, dtype=np.float64) - intr.cy) * z / intr.fy
    return np.column_stack([x, y, z])


def _cloud_from_mask(frame: CameraFrame, mask: np.ndarray, label: str,
                     instance_id: Optional[int] = None) -> ObjectCloud:
    hit = mask & (frame.depth > 0)
    vs, us = np.nonzero(hit)
    pts = backproject_pixels(us, vs, frame.depth[vs, us], frame.intrinsics)
    return ObjectCloud.from_points(pts, label, instance_id, source_pixel_count=len(vs))


def validate_frame(frame: CameraFrame) -> None:
    shapes = {
        "depth": frame.depth.shape,
        "fruit_mask": frame.fruit_mask.shape,
        "semantic_mask": frame.semantic_mask.shape,
    }
    if len(set(shapes.values())) != 1:
        raise FrameError(f"mask/depth dimensions differ: {shapes}")
    if frame.depth.ndim != 2:
        raise FrameError(f"depth must be single channel, got shape {frame.depth.shape}")
    h, w = frame.depth.shape
    intr = frame.intrinsics
    if (intr.width, intr.height) != (w, h):
        raise FrameError(f"intrinsics size {intr.width}x{intr.height} != image size {w}x{h}")
    if np.any(frame.depth < 0):
        raise FrameError("depth contains negative values")
    if frame.semantic_mask.size and int(frame.semantic_mask.max()) > max(SemanticClass):
        raise FrameError(f"semantic label {int(frame.semantic_mask.max())} is not a known class")


def extract_clouds(frame: CameraFrame,
                   min_region_area: int = DEFAULT_MIN_REGION_AREA) -> List[ObjectCloud]:
    """Fruit clouds (ascending instance id) followed by the branch and other-element clouds.

    Fruit pixels never reach an obstacle cloud, whatever their semantic label.
    """
    validate_frame(frame)
    fruit_pixels = frame.fruit_mask != 0
    clouds: List[ObjectCloud] = []
    for iid in np.unique(frame.fruit_mask[fruit_pixels]):
        mask = remove_small_regions(frame.fruit_mask == iid, min_region_area)
        if not mask.any():
            logger.debug("fruit %d removed by small-region cleanup", iid)
            continue
        clouds.append(_cloud_from_mask(frame, mask, FRUIT_LABEL, int(iid)))
    for cls in OBSTACLE_CLASSES:
        mask = remove_small_regions((frame.semantic_mask == cls) & ~fruit_pixels, min_region_area)
        clouds.append(_cloud_from_mask(frame, mask, cls.name.lower()))
    logger.debug("frame %s: %s", frame.frame_id, {c.name: len(c) for c in clouds})
    return clouds


# --- frame directory I/O ---
def read_mask_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise FrameError("missing frame file", path)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FrameError("cannot decode image", path)
    if img.ndim != 2:
        raise FrameError(f"expected a single-channel image, got shape {img.shape}", path)
    return img


def read_intrinsics(path: Path | str) -> CameraIntrinsics:
    path = Path(path)
    if not path.exists():
        raise FrameError("missing frame file", path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FrameError(f"intrinsics is not valid JSON: {e}", path) from e
    try:
        return CameraIntrinsics.from_dict(data)
    except FrameError as e:
        raise FrameError(str(e), path) from e


def read_frame(frame_dir: Path | str) -> CameraFrame:
    """Load a frame directory; every failure names the offending file."""
    root = Path(frame_dir)
    if not root.is_dir():
        raise FrameError("frame directory not found", root)
    intr = read_intrinsics(root / INTRINSICS_FILE)
    depth = read_mask_png(root / DEPTH_FILE)
    if depth.dtype != np.uint16:
        raise FrameError(f"depth must be 16-bit, got {depth.dtype}", root / DEPTH_FILE)
    frame = CameraFrame(
        depth=depth,
        fruit_mask=read_mask_png(root / FRUIT_MASK_FILE).astype(np.uint16),
        semantic_mask=read_mask_png(root / SEMANTIC_MASK_FILE).astype(np.uint8),
        intrinsics=intr,
        frame_id=root.name,
    )
    try:
        validate_frame(frame)
    except FrameError as e:
        raise FrameError(str(e), root) from e
    return frame


def write_frame(frame: CameraFrame, frame_dir: Path | str) -> Path:
    root = Path(frame_dir)
    root.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(root / DEPTH_FILE), frame.depth.astype(np.uint16))
    cv2.imwrite(str(root / FRUIT_MASK_FILE), frame.fruit_mask.astype(np.uint16))
    cv2.imwrite(str(root / SEMANTIC_MASK_FILE), frame.semantic_mask.astype(np.uint8))
    (root / INTRINSICS_FILE).write_text(json.dumps(frame.intrinsics.to_dict(), indent=2),
                                        encoding="utf-8")
    return root


__all__ = [
    "SemanticClass",
    "Point3",
    "CameraIntrinsics",
    "CameraFrame",
    "ObjectCloud",
    "remove_small_regions",
    "backproject",
    "backproject_pixels",
    "extract_clouds",
    "validate_frame",
    "read_frame",
    "read_intrinsics",
    "read_mask_png",
    "write_frame",
]
