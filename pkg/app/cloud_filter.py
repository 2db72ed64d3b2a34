"""Point-cloud denoising, degenerate-object rejection and voxel downsampling.

Downsampled clouds are the "computation candidates" every geometry stage works on.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .frame_ingest import ObjectCloud

logger = logging.getLogger(__name__)

INSUFFICIENT_POINTS = "insufficient_points"
AXIS_IMBALANCE = "axis_imbalance"


@dataclass(frozen=True)
class FilterConfig:
    nn_radius: float = 0.010
    min_neighbors: int = 4
    min_points: int = 30
    max_axis_ratio: float = 3.0
    downsample_voxel: float = 0.005

    def __post_init__(self):
        if not self.nn_radius > 0:
            raise ConfigError(f"nn_radius must be > 0, got {self.nn_radius}")
        if self.min_neighbors < 1:
            raise ConfigError(f"min_neighbors must be >= 1, got {self.min_neighbors}")
        if self.min_points < 4:
            raise ConfigError(f"min_points must be >= 4, got {self.min_points}")
        if self.max_axis_ratio < 1:
            raise ConfigError(f"max_axis_ratio must be >= 1, got {self.max_axis_ratio}")
        if not self.downsample_voxel > 0:
            raise ConfigError(f"downsample_voxel must be > 0, got {self.downsample_voxel}")


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    reason: Optional[str] = None
    extents: tuple = ()

    def __bool__(self) -> bool:
        return self.accepted


def euclidean_denoise(cloud: ObjectCloud, cfg: FilterConfig) -> ObjectCloud:
    """Keep points with at least ``min_neighbors`` other points within ``nn_radius``."""
    pts = cloud.points
    if len(pts) == 0:
        return cloud.with_points(pts)
    tree = cKDTree(pts)
    # the point itself is its own first neighbour; missing neighbours come back as inf
    dist, _ = tree.query(pts, k=cfg.min_neighbors + 1,
                         distance_upper_bound=cfg.nn_radius * (1 + 1e-9))
    keep = dist[:, -1] <= cfg.nn_radius
    if not keep.all():
        logger.debug("%s: denoise dropped %d of %d points", cloud.name, int((~keep).sum()), len(pts))
    return cloud.with_points(pts[keep])


def reject_degenerate(cloud: ObjectCloud, cfg: FilterConfig) -> FilterDecision:
    """Reject clouds that are too small or whose bounding box is badly elongated."""
    n = len(cloud)
    if n < cfg.min_points:
        return FilterDecision(False, INSUFFICIENT_POINTS)
    extents = cloud.points.max(axis=0) - cloud.points.min(axis=0)
    floored = np.maximum(extents, cfg.downsample_voxel)
    ratio = float(floored.max() / floored.min())
    if ratio > cfg.max_axis_ratio:
        return FilterDecision(False, AXIS_IMBALANCE, tuple(float(e) for e in extents))
    return FilterDecision(True, None, tuple(float(e) for e in extents))


def voxel_downsample(cloud: ObjectCloud, voxel: float) -> ObjectCloud:
    """Replace the points of each occupied grid cell by their centroid.

    The grid is anchored at the origin; output rows follow ascending cell key.
    """
    if not voxel > 0:
        raise ValueError(f"voxel must be > 0, got {voxel}")
    pts = cloud.points
    if len(pts) == 0:
        return cloud.with_points(pts)
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    sums = np.column_stack([
        np.bincount(inverse, weights=pts[:, axis], minlength=len(counts)) for axis in range(3)
    ])
    centroids = sums / counts[:, None]
    return cloud.with_points(centroids)


__all__ = [
    "FilterConfig",
    "FilterDecision",
    "euclidean_denoise",
    "reject_degenerate",
    "voxel_downsample",
    "INSUFFICIENT_POINTS",
    "AXIS_IMBALANCE",
]
