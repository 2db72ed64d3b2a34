import math

import numpy as np
import pytest

from app.errors import ConfigError, ContractViolation
from app.occupancy_map import OccupancyMap
from app.pose_estimation import FruitPose, WorkFrame, rotation_matrix
from app.pose_verification import (
    ObstacleHistogram,
    VerifyConfig,
    add_constraint_penalty,
    barrier_penalty,
    build_histogram,
    confidence,
    confidence_from_penalty,
    elevation_limit_field,
    rank_fruits,
)
from app.sphere_hough import Sphere

CFG = VerifyConfig()
FRUIT = np.array([0.005, 0.005, 0.005])
IDENTITY = WorkFrame.identity()


def _pose(theta=0.0, phi=0.0):
    return FruitPose(theta, phi, rotation_matrix(theta, phi))


def _voxel_ahead(label):
    # voxel key (5, 0, 0) at 10 mm: centre 50 mm along +X from FRUIT
    return OccupancyMap(0.01, label, np.array([[5, 0, 0]]))


def test_verify_config_defaults():
    assert (CFG.neighborhood_r, CFG.beta, CFG.tau) == (0.200, 50.0, 0.6)
    assert (CFG.bin_deg, CFG.cone_halfwidth_deg, CFG.d_min) == (5.0, 10.0, 0.010)
    assert CFG.class_weight("branch_trunk") == 1.0
    assert CFG.class_weight("other_element") == 0.5


@pytest.mark.parametrize("kwargs", [{"beta": 1.0}, {"tau": 1.0}, {"bin_deg": 7.0}, {"d_min": 0.3}])
def test_verify_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        VerifyConfig(**kwargs)


# --- barrier penalty ---
def test_penalty_at_fifty_mm_is_one():
    assert barrier_penalty(0.05, 1.0, CFG) == pytest.approx(1.0, rel=1e-12)


def test_penalty_at_neighbourhood_edge():
    assert barrier_penalty(0.2, 1.0, CFG) == pytest.approx(math.log(50) / math.log(200), rel=1e-12)
    assert barrier_penalty(0.2, 1.0, CFG) == pytest.approx(0.7384, abs=1e-3)


def test_penalty_is_clamped_and_decreasing():
    d = np.array([0.0, 0.005, 0.01, 0.05, 0.1, 0.2, 0.5])
    pv = barrier_penalty(d, 1.0, CFG)
    assert pv[0] == pv[1] == pv[2]
    assert pv[-1] == pv[-2]
    assert np.all(np.diff(pv) <= 0)


# --- histogram ---
def test_no_obstacles_gives_zero_histogram():
    hist = build_histogram(FRUIT, [], [], CFG, IDENTITY)
    assert hist.shape == (72, 36)
    assert not hist.H.any()


def test_far_obstacle_is_ignored():
    occ = OccupancyMap(0.01, "branch_trunk", np.array([[40, 0, 0]]))
    assert not build_histogram(FRUIT, [occ], [], CFG, IDENTITY).H.any()


def test_single_branch_voxel_lands_in_forward_bin():
    hist = build_histogram(FRUIT, [_voxel_ahead("branch_trunk")], [], CFG, IDENTITY)
    it, ip = hist.bin_index(0.0, 0.0)
    assert hist.H[it, ip] == pytest.approx(1.0, abs=1e-9)
    assert hist.H.sum() == hist.H[it, ip]


def test_other_element_halves_the_penalty():
    branch = build_histogram(FRUIT, [_voxel_ahead("branch_trunk")], [], CFG, IDENTITY)
    other = build_histogram(FRUIT, [_voxel_ahead("other_element")], [], CFG, IDENTITY)
    assert other.H.sum() == branch.H.sum() / 2


def test_neighbouring_fruit_counts_as_barrier():
    neighbour = Sphere(FRUIT[0], FRUIT[1] + 0.1, FRUIT[2], 0.04)
    hist = build_histogram(FRUIT, [], [neighbour, Sphere(*FRUIT, 0.04)], CFG, IDENTITY)
    it, ip = hist.bin_index(math.pi / 2, 0.0)
    assert hist.H.sum() == hist.H[it, ip]
    assert hist.H[it, ip] == pytest.approx(0.5 * math.log(50) / math.log(100), rel=1e-9)


def test_histogram_uses_work_frame_directions():
    """A voxel between fruit and camera lies along +X of the work frame."""
    fruit_cam = np.array([0.005, 0.005, 0.405])
    occ = OccupancyMap(0.01, "branch_trunk", np.array([[0, 0, 35]]))   # 50 mm toward the camera
    hist = build_histogram(fruit_cam, [occ], [], CFG, WorkFrame())
    it, ip = hist.bin_index(0.0, 0.0)
    assert hist.H[it, ip] == pytest.approx(1.0, abs=1e-9)


def test_non_finite_centre_rejected():
    with pytest.raises(ContractViolation):
        build_histogram(np.array([np.nan, 0, 0]), [], [], CFG)


def test_window_selects_bins_within_halfwidth():
    hist = ObstacleHistogram.empty(5.0)
    w = hist.window(0.0, 0.0, 10.0)
    assert w.sum() == 16      # centres at ±2.5 and ±7.5 deg on both axes
    wrapped = hist.window(math.pi, 0.0, 10.0)
    assert wrapped.sum() == 16
    assert wrapped[0].any() and wrapped[-1].any()


# --- confidence ---
def test_zero_histogram_gives_full_confidence():
    decision = confidence(ObstacleHistogram.empty(5.0), _pose(), CFG)
    assert decision.confidence == 1.0
    assert decision.window_penalty == 0.0
    assert decision.can_pick


def test_branch_voxel_in_cone_blocks_pick(audit):
    hist = build_histogram(FRUIT, [_voxel_ahead("branch_trunk")], [], CFG, IDENTITY)
    decision = confidence(hist, _pose(), CFG)
    audit(kind="verification", query="branch voxel at 50 mm in cone", result=f"L={decision.confidence:.4f}")
    assert decision.confidence == pytest.approx(2 / (1 + math.e), abs=1e-9)
    assert not decision.can_pick


def test_branch_voxel_outside_cone_is_harmless():
    hist = build_histogram(FRUIT, [_voxel_ahead("branch_trunk")], [], CFG, IDENTITY)
    decision = confidence(hist, _pose(theta=math.radians(40)), CFG)
    assert decision.confidence == 1.0


def test_threshold_is_inclusive():
    hist = ObstacleHistogram.empty(5.0)
    it, ip = hist.bin_index(0.0, 0.0)
    hist.H[it, ip] = math.log(7 / 3)
    decision = confidence(hist, _pose(), CFG)
    assert decision.confidence == pytest.approx(0.6, abs=1e-12)
    assert decision.can_pick


def test_confidence_from_penalty_is_monotone():
    values = [confidence_from_penalty(p) for p in (0.0, 0.5, 1.0, 5.0, 50.0)]
    assert values[0] == 1.0
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] >= 0.0


# --- constraint fields ---
def test_zero_field_is_identity():
    hist = build_histogram(FRUIT, [_voxel_ahead("branch_trunk")], [], CFG, IDENTITY)
    out = add_constraint_penalty(hist, lambda t, p: 0.0)
    assert np.array_equal(out.H, hist.H)


def test_constant_field_adds_everywhere():
    hist = build_histogram(FRUIT, [_voxel_ahead("branch_trunk")], [], CFG, IDENTITY)
    out = add_constraint_penalty(hist, lambda t, p: 0.25)
    assert np.allclose(out.H - hist.H, 0.25)


def test_elevation_limit_blocks_high_poses(audit):
    hist = add_constraint_penalty(ObstacleHistogram.empty(5.0), elevation_limit_field(math.radians(30), 10.0))
    high = confidence(hist, _pose(phi=math.radians(50)), CFG)
    low = confidence(hist, _pose(phi=math.radians(0)), CFG)
    audit(kind="verification", query="phi > 30 deg masked with PV=10", result=f"L={high.confidence:.2e}")
    assert high.confidence < 2 / (1 + math.exp(10)) * 1.0001
    assert not high.can_pick
    assert low.can_pick


def test_negative_field_rejected():
    with pytest.raises(ContractViolation):
        add_constraint_penalty(ObstacleHistogram.empty(5.0), lambda t, p: -1.0)


def test_rank_fruits_orders_by_confidence_then_id():
    class Entry:
        def __init__(self, iid, conf):
            self.instance_id, self.confidence = iid, conf

    ranked = rank_fruits([Entry(3, 0.5), Entry(1, 0.9), Entry(2, 0.9), Entry(4, 1.0)])
    assert [e.instance_id for e in ranked] == [4, 1, 2, 3]
