"""Per-frame perception workflow.

masks → clouds → denoise → obstacle maps → per fruit (downsample, reject, Hough sphere,
pose) → verification → pick list sorted by confidence.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from monitoring.performance_monitor import PerformanceMonitor
from utilities.pick_list_exporter import write_pick_list, write_summary

from .cloud_filter import euclidean_denoise, reject_degenerate, voxel_downsample
from .config import PipelineConfig
from .errors import NoConsensusError, PoseEstimationError
from .frame_ingest import FRUIT_LABEL, CameraFrame, ObjectCloud, extract_clouds, read_frame
from .occupancy_map import OccupancyMap, build_map, export_map, export_ply
from .pose_estimation import FruitPose, estimate_pose
from .pose_verification import (
    PickDecision,
    build_histogram,
    confidence,
    rank_fruits,
)
from .sphere_hough import Sphere, fit_sphere

logger = logging.getLogger(__name__)

EMPTY_AFTER_DENOISE = "empty_after_denoise"
NO_CONSENSUS = "no_consensus"
POSE_FAILURE = "pose_failure"

PICK_LIST_FILE = "pick_list.json"
TIMING_FILE = "timing.txt"
SUMMARY_FILE = "summary.md"


@dataclass
class FruitModel:
    instance_id: int
    sphere: Sphere                       # camera frame
    pose: Optional[FruitPose]
    center_work: np.ndarray              # sphere centre in the work frame
    confidence: float = 0.0
    can_pick: bool = False
    rejection: Optional[str] = None
    diagnostics: Dict[str, float] = field(default_factory=dict)

    @property
    def approach_dir(self) -> Optional[np.ndarray]:
        return self.pose.approach_dir if self.pose is not None else None


@dataclass
class Rejection:
    instance_id: int
    reason: str


@dataclass
class FrameResult:
    frame_id: str
    fruits: List[FruitModel]
    rejected: List[Rejection]
    maps: Dict[str, OccupancyMap]
    config_digest: str


# --- per-fruit stages ---
def _model_fruit(cloud: ObjectCloud, cfg: PipelineConfig) -> Tuple[Optional[FruitModel], Optional[Rejection]]:
    iid = int(cloud.instance_id)
    diag = {"raw_points": cloud.source_pixel_count, "denoised": len(cloud)}
    if len(cloud) == 0:
        return None, Rejection(iid, EMPTY_AFTER_DENOISE)
    candidates = voxel_downsample(cloud, cfg.filter.downsample_voxel)
    diag["candidates"] = len(candidates)
    decision = reject_degenerate(candidates, cfg.filter)
    if not decision:
        logger.debug("fruit %d rejected: %s", iid, decision.reason)
        return None, Rejection(iid, decision.reason)
    try:
        sphere, votes = fit_sphere(candidates, cfg.hough, workers=cfg.workers)
    except NoConsensusError:
        logger.warning("fruit %d: Hough grid without consensus", iid)
        return None, Rejection(iid, NO_CONSENSUS)
    diag["votes"] = votes

    frame = cfg.work_frame
    center_work = frame.to_work(sphere.center)
    model = FruitModel(iid, sphere, None, center_work, diagnostics=diag)
    try:
        model.pose = estimate_pose(frame.to_work(candidates.points),
                                   frame.sphere_to_work(sphere), clamp=cfg.clamp)
    except PoseEstimationError as e:
        logger.warning("fruit %d: %s", iid, e)
        model.rejection = POSE_FAILURE
    return model, None


def _verify_fruit(model: FruitModel, others: List[Sphere], maps: List[OccupancyMap],
                  cfg: PipelineConfig) -> PickDecision:
    if model.pose is None:
        return PickDecision(0.0, False, float("nan"))
    if not cfg.verify_enabled:
        return PickDecision(1.0, True, 0.0)
    hist = build_histogram(model.sphere.center, maps, others, cfg.verify, cfg.work_frame)
    return confidence(hist, model.pose, cfg.verify)


def _map_parallel(func, items, workers: int) -> list:
    if workers <= 1 or len(items) < 2:
        return [func(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


# --- frame level ---
def run_frame(frame: CameraFrame, cfg: PipelineConfig,
              monitor: Optional[PerformanceMonitor] = None) -> FrameResult:
    """Model every fruit of an in-memory frame; per-fruit failures become rejections."""
    monitor = monitor or PerformanceMonitor()
    monitor.frame_id = frame.frame_id

    with monitor.stage("extract_clouds"):
        clouds = extract_clouds(frame, cfg.min_region_area)
    with monitor.stage("denoise"):
        clouds = [euclidean_denoise(c, cfg.filter) for c in clouds]
    fruit_clouds = [c for c in clouds if c.label == FRUIT_LABEL]
    obstacle_clouds = [c for c in clouds if c.label != FRUIT_LABEL]

    with monitor.stage("build_maps"):
        maps = {c.label: build_map(c, cfg.map_resolution) for c in obstacle_clouds}

    with monitor.stage("fruit_modelling"):
        outcomes = _map_parallel(lambda c: _model_fruit(c, cfg), fruit_clouds, cfg.workers)
    models = [m for m, _ in outcomes if m is not None]
    rejected = [r for _, r in outcomes if r is not None]

    with monitor.stage("verification"):
        map_list = list(maps.values())

        def verify(model: FruitModel) -> PickDecision:
            others = [m.sphere for m in models if m.instance_id != model.instance_id]
            return _verify_fruit(model, others, map_list, cfg)

        decisions = _map_parallel(verify, models, cfg.workers)
    for model, decision in zip(models, decisions):
        model.confidence = decision.confidence
        model.can_pick = decision.can_pick
        model.diagnostics["window_penalty"] = decision.window_penalty

    ranked = rank_fruits(models)
    logger.info("frame %s: %d fruits modelled, %d rejected, %d pickable", frame.frame_id,
                len(ranked), len(rejected), sum(m.can_pick for m in ranked))
    return FrameResult(frame.frame_id, ranked, sorted(rejected, key=lambda r: r.instance_id),
                       maps, cfg.digest())


def write_outputs(result: FrameResult, out_dir: Path | str, cfg: PipelineConfig) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {
        "pick_list": write_pick_list(result, out / PICK_LIST_FILE),
        "summary": write_summary(result, out / SUMMARY_FILE),
    }
    for label, occ in result.maps.items():
        written[f"voxmap_{label}"] = export_map(occ, out / f"voxmap_{label}.txt")
        if cfg.export_ply and len(occ):
            written[f"ply_{label}"] = export_ply(occ, out / f"voxmap_{label}.ply")
    return written


def process_frame(frame_dir: Path | str, cfg: PipelineConfig, out_dir: Path | str,
                  monitor: Optional[PerformanceMonitor] = None) -> Dict[str, Path]:
    """Run the full workflow on a frame directory and write its outputs.

    Writes ``pick_list.json``, one ``voxmap_<class>.txt`` per obstacle class and
    ``timing.txt``; returns the written paths keyed by kind.
    """
    monitor = monitor or PerformanceMonitor()
    frame = read_frame(frame_dir)
    result = run_frame(frame, cfg, monitor)
    with monitor.stage("write_outputs"):
        written = write_outputs(result, out_dir, cfg)
    timing = Path(out_dir) / TIMING_FILE
    timing.write_text(monitor.format_table(f"Stage timing - frame {frame.frame_id}"), encoding="utf-8")
    written["timing"] = timing
    return written


__all__ = [
    "FruitModel",
    "Rejection",
    "FrameResult",
    "run_frame",
    "write_outputs",
    "process_frame",
]
