"""Binary voxel occupancy maps for obstacle classes.

A map is a static snapshot: a voxel is occupied iff at least one point fell inside it.
Keys are signed integer triples ``floor(p / resolution)``; the voxel centre of key
``(i, j, k)`` is ``((i + .5) * res, (j + .5) * res, (k + .5) * res)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
import open3d as o3d
from scipy.spatial import cKDTree

from .errors import FrameError
from .frame_ingest import ObjectCloud, Point3

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 0.010
FORMAT_TAG = "voxmap"
FORMAT_VERSION = "v1"

# Morton layout: 21 bits per axis, signed keys shifted by 2**20
_MORTON_BITS = 21
_MORTON_OFFSET = 1 << (_MORTON_BITS - 1)


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(keys: np.ndarray) -> np.ndarray:
    """Interleave signed key triples (each within ±2**20) into 63-bit Morton codes."""
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 3) + _MORTON_OFFSET
    if k.size and (k.min() < 0 or k.max() >= (1 << _MORTON_BITS)):
        raise ValueError("voxel key outside the Morton-encodable range")
    return (_spread_bits(k[:, 0])
            | (_spread_bits(k[:, 1]) << np.uint64(1))
            | (_spread_bits(k[:, 2]) << np.uint64(2)))


def morton_decode(codes: np.ndarray) -> np.ndarray:
    c = np.asarray(codes, dtype=np.uint64)
    parts = [_compact_bits(c >> np.uint64(axis)) for axis in range(3)]
    return np.column_stack(parts).astype(np.int64) - _MORTON_OFFSET


@dataclass
class OccupancyMap:
    resolution: float
    class_label: str
    keys: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.int64))

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be > 0, got {self.resolution}")
        keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        # canonical form: unique keys in lexicographic order
        self.keys = np.unique(keys, axis=0) if len(keys) else keys
        self._tree = None

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def occupied(self) -> set:
        return {tuple(int(v) for v in k) for k in self.keys}

    def centers(self) -> np.ndarray:
        return (self.keys + 0.5) * self.resolution

    def morton_codes(self) -> np.ndarray:
        return morton_encode(self.keys)

    def contains(self, point: Point3 | np.ndarray) -> bool:
        key = np.floor(np.asarray(point, dtype=np.float64) / self.resolution).astype(np.int64)
        return tuple(int(v) for v in key) in self.occupied

    def _index(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.centers())
        return self._tree

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancyMap):
            return NotImplemented
        return (self.resolution == other.resolution
                and self.class_label == other.class_label
                and np.array_equal(self.keys, other.keys))


def build_map(cloud: ObjectCloud, resolution: float = DEFAULT_RESOLUTION,
              class_label: str | None = None) -> OccupancyMap:
    if not resolution > 0:
        raise ValueError(f"resolution must be > 0, got {resolution}")
    label = class_label or cloud.label
    if len(cloud) == 0:
        return OccupancyMap(resolution, label)
    keys = np.floor(cloud.points / resolution).astype(np.int64)
    occ = OccupancyMap(resolution, label, keys)
    logger.debug("%s map: %d points -> %d voxels at %.3f m", label, len(cloud), len(occ), resolution)
    return occ


def query_radius(occ: OccupancyMap, center: Point3 | np.ndarray,
                 radius: float) -> List[Tuple[Point3, float]]:
    """Occupied voxel centres in the closed ball, nearest first (ties by key order)."""
    if not radius > 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    if len(occ) == 0:
        return []
    c = np.asarray(center, dtype=np.float64)
    # widen the tree query slightly, then apply the exact test
    idx = np.asarray(occ._index().query_ball_point(c, r=radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
    if idx.size == 0:
        return []
    centers = occ.centers()[idx]
    dist = np.linalg.norm(centers - c, axis=1)
    inside = dist <= radius
    idx, centers, dist = idx[inside], centers[inside], dist[inside]
    keys = occ.keys[idx]
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0], dist))
    return [(Point3(*map(float, centers[i])), float(dist[i])) for i in order]


# --- export / import ---
def export_map(occ: OccupancyMap, path: Path | str) -> Path:
    """Write ``voxmap v1 <res> <label> <count>`` then one ``x y z`` centre per line."""
    path = Path(path)
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION} {occ.resolution!r} {occ.class_label} {len(occ)}"]
    lines.extend(f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in occ.centers())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_map(path: Path | str) -> OccupancyMap:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise FrameError(f"cannot read voxel map: {e}", path) from e
    rows = text.splitlines()
    header = rows[0].split() if rows else []
    if len(header) != 5 or header[0] != FORMAT_TAG or header[1] != FORMAT_VERSION:
        raise FrameError("not a voxmap v1 file", path)
    resolution, label, count = float(header[2]), header[3], int(header[4])
    body = [r for r in rows[1:] if r.strip()]
    if len(body) != count:
        raise FrameError(f"header announces {count} voxels, file holds {len(body)}", path)
    if count == 0:
        return OccupancyMap(resolution, label)
    centers = np.array([[float(v) for v in r.split()] for r in body], dtype=np.float64)
    keys = np.rint(centers / resolution - 0.5).astype(np.int64)
    return OccupancyMap(resolution, label, keys)


def export_ply(occ: OccupancyMap, path: Path | str) -> Path:
    """Binary PLY of voxel centres in Morton order, for external point viewers."""
    if len(occ) == 0:
        raise ValueError(f"{occ.class_label} map is empty, nothing to export")
    path = Path(path)
    pcd = o3d.geometry.PointCloud()
    pcd.points = o3d.utility.Vector3dVector(occ.centers()[np.argsort(occ.morton_codes(), kind="stable")])
    if not o3d.io.write_point_cloud(str(path), pcd):
        raise FrameError("cannot write point cloud", path)
    return path


__all__ = [
    "OccupancyMap",
    "build_map",
    "query_radius",
    "export_map",
    "load_map",
    "export_ply",
    "morton_encode",
    "morton_decode",
]
