"""Obstacle-aware verification of an estimated approach pose.

Barriers (occupied voxels and neighbouring fruits) around a fruit are binned by direction
into a 2-D (theta, phi) penalty histogram. The penalty summed over a window around the
pose maps to a confidence ``L = 2 / (1 + exp(H))`` in (0, 1].
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractViolation
from .frame_ingest import Point3
from .occupancy_map import OccupancyMap, query_radius
from .pose_estimation import FruitPose, WorkFrame, angles_about
from .sphere_hough import Sphere

logger = logging.getLogger(__name__)

CONFIDENCE_MODEL = "L = 2 / (1 + exp(H)), renormalized so that H = 0 gives L = 1"
_TAU_RTOL = 1e-12
_WINDOW_EPS = 1e-9

PenaltyField = Callable[[np.ndarray, np.ndarray], "np.ndarray | float"]


@dataclass(frozen=True)
class VerifyConfig:
    neighborhood_r: float = 0.200
    beta: float = 50.0
    tau: float = 0.6
    bin_deg: float = 5.0
    cone_halfwidth_deg: float = 10.0
    d_min: float = 0.010
    alpha_branch: float = 1.0
    alpha_other: float = 0.5

    def __post_init__(self):
        if not (self.neighborhood_r > self.d_min > 0):
            raise ConfigError("need neighborhood_r > d_min > 0, got "
                              f"neighborhood_r={self.neighborhood_r}, d_min={self.d_min}")
        if not self.beta > 1:
            raise ConfigError(f"beta must be > 1, got {self.beta}")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.bin_deg > 0 or (360.0 / self.bin_deg) % 1 or (180.0 / self.bin_deg) % 1:
            raise ConfigError(f"bin_deg must divide 180 and 360, got {self.bin_deg}")
        if self.cone_halfwidth_deg < 0:
            raise ConfigError(f"cone_halfwidth_deg must be >= 0, got {self.cone_halfwidth_deg}")
        if self.alpha_branch < 0 or self.alpha_other < 0:
            raise ConfigError("class weights alpha_branch/alpha_other must be >= 0")

    def class_weight(self, label: str) -> float:
        return self.alpha_branch if label == "branch_trunk" else self.alpha_other


@dataclass
class ObstacleHistogram:
    """Penalty mass over theta bins [-180°, 180°) × phi bins [-90°, 90°)."""
    H: np.ndarray
    bin_deg: float

    @classmethod
    def empty(cls, bin_deg: float) -> "ObstacleHistogram":
        return cls(np.zeros((int(round(360 / bin_deg)), int(round(180 / bin_deg)))), bin_deg)

    @property
    def shape(self) -> tuple:
        return self.H.shape

    def theta_centers_deg(self) -> np.ndarray:
        return -180.0 + self.bin_deg * (np.arange(self.H.shape[0]) + 0.5)

    def phi_centers_deg(self) -> np.ndarray:
        return -90.0 + self.bin_deg * (np.arange(self.H.shape[1]) + 0.5)

    def bin_index(self, theta: np.ndarray | float, phi: np.ndarray | float):
        """Bin of angles given in radians."""
        n_t, n_p = self.H.shape
        it = np.floor((np.degrees(theta) + 180.0) / self.bin_deg).astype(np.int64) % n_t
        ip = np.clip(np.floor((np.degrees(phi) + 90.0) / self.bin_deg).astype(np.int64), 0, n_p - 1)
        return it, ip

    def add(self, theta: np.ndarray, phi: np.ndarray, values: np.ndarray) -> None:
        it, ip = self.bin_index(np.asarray(theta), np.asarray(phi))
        np.add.at(self.H, (it, ip), np.asarray(values, dtype=np.float64))

    def window(self, theta: float, phi: float, halfwidth_deg: float) -> np.ndarray:
        """Boolean mask of bins whose centres lie within ±halfwidth of (theta, phi)."""
        dt = (self.theta_centers_deg() - math.degrees(theta) + 180.0) % 360.0 - 180.0
        dp = self.phi_centers_deg() - math.degrees(phi)
        lim = halfwidth_deg + _WINDOW_EPS
        return (np.abs(dt) <= lim)[:, None] & (np.abs(dp) <= lim)[None, :]

    def window_sum(self, theta: float, phi: float, halfwidth_deg: float) -> float:
        return float(self.H[self.window(theta, phi, halfwidth_deg)].sum())


@dataclass(frozen=True)
class PickDecision:
    confidence: float
    can_pick: bool
    window_penalty: float


def barrier_penalty(distance: np.ndarray | float, alpha: float, cfg: VerifyConfig):
    """alpha / log_beta(d), with d clamped to [d_min, neighborhood_r] and taken in mm."""
    d_mm = np.clip(np.asarray(distance, dtype=np.float64), cfg.d_min, cfg.neighborhood_r) * 1000.0
    return alpha * math.log(cfg.beta) / np.log(d_mm)


def build_histogram(fruit_center: Point3 | np.ndarray, maps: Sequence[OccupancyMap],
                    other_fruits: Iterable[Sphere], cfg: VerifyConfig,
                    work_frame: Optional[WorkFrame] = None) -> ObstacleHistogram:
    """Penalty histogram of every barrier within ``neighborhood_r`` of the fruit centre.

    Maps, centre and other fruits share the camera frame; directions are binned in the
    work frame.
    """
    c = np.asarray(fruit_center, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ContractViolation(f"fruit centre is not finite: {c}")
    frame = work_frame or WorkFrame.identity()
    hist = ObstacleHistogram.empty(cfg.bin_deg)

    barriers: List[np.ndarray] = []
    dists: List[np.ndarray] = []
    alphas: List[np.ndarray] = []
    for occ in maps:
        hits = query_radius(occ, c, cfg.neighborhood_r)
        if not hits:
            continue
        barriers.append(np.array([h[0] for h in hits], dtype=np.float64))
        dists.append(np.array([h[1] for h in hits], dtype=np.float64))
        alphas.append(np.full(len(hits), cfg.class_weight(occ.class_label)))
    others = np.array([s.center for s in other_fruits], dtype=np.float64).reshape(-1, 3)
    if len(others):
        d = np.linalg.norm(others - c, axis=1)
        near = (d <= cfg.neighborhood_r) & (d > 0)
        barriers.append(others[near])
        dists.append(d[near])
        alphas.append(np.full(int(near.sum()), cfg.alpha_other))
    if not barriers:
        return hist

    pts = np.concatenate(barriers)
    d = np.concatenate(dists)
    alpha = np.concatenate(alphas)
    keep = d >= 1e-6
    rel = frame.to_work(pts[keep] - c)
    theta, phi = angles_about(rel, np.zeros(3))
    hist.add(theta, phi, barrier_penalty(d[keep], 1.0, cfg) * alpha[keep])
    logger.debug("histogram: %d barriers, total penalty %.4f", int(keep.sum()), hist.H.sum())
    return hist


def confidence_from_penalty(window_penalty: float) -> float:
    return float(2.0 * expit(-window_penalty))


def confidence(hist: ObstacleHistogram, pose: FruitPose, cfg: VerifyConfig) -> PickDecision:
    penalty = hist.window_sum(pose.theta, pose.phi, cfg.cone_halfwidth_deg)
    L = confidence_from_penalty(penalty)
    can_pick = L >= cfg.tau or math.isclose(L, cfg.tau, rel_tol=_TAU_RTOL)
    return PickDecision(L, bool(can_pick), penalty)


def add_constraint_penalty(hist: ObstacleHistogram, penalty_field: PenaltyField) -> ObstacleHistogram:
    """Bin-wise sum of ``hist`` and a non-negative penalty field.

    The field is evaluated at bin centres, angles in radians, as ``field(theta, phi)``
    over broadcast grids.
    """
    theta, phi = np.meshgrid(np.radians(hist.theta_centers_deg()),
                             np.radians(hist.phi_centers_deg()), indexing="ij")
    extra = np.broadcast_to(np.asarray(penalty_field(theta, phi), dtype=np.float64), hist.H.shape)
    if not np.all(np.isfinite(extra)) or np.any(extra < 0):
        raise ContractViolation("constraint penalty must be finite and non-negative")
    return ObstacleHistogram(hist.H + extra, hist.bin_deg)


def elevation_limit_field(max_phi: float, penalty: float) -> PenaltyField:
    """Workspace constraint: ``penalty`` on every direction above elevation ``max_phi``."""
    def field(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
        return np.where(phi > max_phi, penalty, 0.0)
    return field


def rank_fruits(entries: Iterable) -> list:
    """Picking priority: confidence descending, then instance id ascending."""
    return sorted(entries, key=lambda e: (-e.confidence, e.instance_id))


__all__ = [
    "VerifyConfig",
    "ObstacleHistogram",
    "PickDecision",
    "CONFIDENCE_MODEL",
    "barrier_penalty",
    "build_histogram",
    "confidence",
    "confidence_from_penalty",
    "add_constraint_penalty",
    "elevation_limit_field",
    "rank_fruits",
]
