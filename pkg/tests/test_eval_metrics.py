"""Scoring, matching and study tests for utilities.eval_harness."""
import json
from dataclasses import asdict

import cv2
import numpy as np
import pytest

from app.config import PipelineConfig
from app.errors import ContractViolation, FrameError
from utilities.eval_harness import (
    REPORT_JSON_FILE,
    REPORT_TEXT_FILE,
    ConfusionCounts,
    EvaluationHarness,
    TrialRecord,
    band_stats,
    detection_scores,
    evaluate_single_fruit,
    format_study,
    masks_to_counts,
    match_components,
    miou,
    robustness_replay,
    robustness_stats,
    run_distance_study,
)
from utilities.synth_scene import FruitPrimitive, SceneSpec, default_intrinsics

MATRIX = np.array([[50, 2, 3], [4, 30, 1], [0, 5, 20]])


# --- scores ---
def test_detection_scores_hand_computed():
    s = detection_scores(ConfusionCounts(MATRIX, tp=8, fp=2, fn=4))
    assert s.precision == pytest.approx(0.8, abs=1e-12)
    assert s.recall == pytest.approx(2 / 3, abs=1e-12)
    assert s.f1 == pytest.approx(8 / 11, abs=1e-12)
    assert not s.f1_undefined


@pytest.mark.parametrize("tp, fp, fn, expected", [
    (10, 0, 0, (1.0, 1.0, 1.0)),
    (8, 2, 2, (0.8, 0.8, 0.8)),
])
def test_detection_scores_examples(tp, fp, fn, expected):
    s = detection_scores(ConfusionCounts(MATRIX, tp=tp, fp=fp, fn=fn))
    assert (s.precision, s.recall, s.f1) == pytest.approx(expected, abs=1e-12)


def test_miou_balanced_two_class_matrix_is_one_third():
    assert miou(ConfusionCounts(np.array([[50, 50], [50, 50]]))).value == 1 / 3
    assert miou(ConfusionCounts(np.array([[0, 5], [7, 0]]))).value == 0.0
    assert miou(ConfusionCounts(np.diag([3, 4, 5]))).value == 1.0


def test_miou_all_empty_is_undefined():
    assert miou(ConfusionCounts(np.zeros((3, 3)))).value is None


def test_detection_scores_undefined_cases():
    nothing_predicted = detection_scores(ConfusionCounts(MATRIX, tp=0, fp=0, fn=3))
    assert nothing_predicted.precision is None
    assert nothing_predicted.recall == 0.0
    assert nothing_predicted.f1 is None and nothing_predicted.f1_undefined

    all_wrong = detection_scores(ConfusionCounts(MATRIX, tp=0, fp=3, fn=2))
    assert (all_wrong.precision, all_wrong.recall, all_wrong.f1) == (0.0, 0.0, 0.0)
    assert all_wrong.f1_undefined


def test_miou_hand_computed():
    result = miou(ConfusionCounts(MATRIX))
    expected = [50 / 59, 30 / 42, 20 / 29]
    assert [result.per_class[i] for i in range(3)] == pytest.approx(expected, abs=1e-12)
    assert result.value == pytest.approx(sum(expected) / 3, abs=1e-12)
    assert result.excluded_classes == []


def test_miou_excludes_empty_classes():
    m = np.array([[10, 2, 0], [1, 7, 0], [0, 0, 0]])
    result = miou(ConfusionCounts(m))
    assert result.excluded_classes == [2]
    assert result.per_class[2] is None
    assert result.value == pytest.approx((10 / 13 + 7 / 10) / 2, abs=1e-12)


def test_confusion_counts_validation_and_pooling():
    with pytest.raises(ContractViolation):
        ConfusionCounts(np.zeros((2, 3)))
    with pytest.raises(ContractViolation):
        ConfusionCounts(np.zeros((2, 2)), tp=-1)
    pooled = ConfusionCounts(MATRIX, 1, 2, 3) + ConfusionCounts(MATRIX, 4, 5, 6)
    assert np.array_equal(pooled.matrix, 2 * MATRIX)
    assert (pooled.tp, pooled.fp, pooled.fn) == (5, 7, 9)
    with pytest.raises(ContractViolation):
        ConfusionCounts(MATRIX) + ConfusionCounts(np.zeros((2, 2)))


# --- mask comparison ---
def _two_blobs():
    m = np.zeros((30, 30), dtype=np.uint8)
    m[2:8, 2:8] = 1
    m[15:25, 15:25] = 2
    return m


def test_identical_masks():
    mask = _two_blobs()
    counts = masks_to_counts(mask, mask, 3)
    assert (counts.tp, counts.fp, counts.fn) == (2, 0, 0)
    assert np.array_equal(counts.matrix, np.diag(np.bincount(mask.ravel(), minlength=3)))
    assert miou(counts).value == 1.0


def test_disjoint_masks():
    truth = np.zeros((20, 20), dtype=np.uint8)
    pred = np.zeros_like(truth)
    truth[1:5, 1:5] = 1
    pred[10:15, 10:15] = 1
    counts = masks_to_counts(pred, truth, 2)
    assert (counts.tp, counts.fp, counts.fn) == (0, 1, 1)
    assert miou(counts).per_class[1] == 0.0


def test_pixel_matrix_matches_loop_oracle():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 4, size=(25, 30))
    truth = rng.integers(0, 4, size=(25, 30))
    oracle = np.zeros((4, 4), dtype=np.int64)
    for t, p in zip(truth.ravel(), pred.ravel()):
        oracle[t, p] += 1
    assert np.array_equal(masks_to_counts(pred, truth, 4).matrix, oracle)


def test_swapping_pred_and_truth_transposes():
    rng = np.random.default_rng(1)
    a = (rng.random((40, 40)) > 0.7).astype(np.uint8)
    b = (rng.random((40, 40)) > 0.7).astype(np.uint8)
    ab = masks_to_counts(a, b, 2)
    ba = masks_to_counts(b, a, 2)
    assert np.array_equal(ab.matrix, ba.matrix.T)
    assert (ab.tp, ab.fp, ab.fn) == (ba.tp, ba.fn, ba.fp)
    assert miou(ab).value == pytest.approx(miou(ba).value, abs=1e-12)


def test_class_relabelling_keeps_scores():
    truth = _two_blobs()
    pred = np.roll(truth, 2, axis=1)
    swap = np.array([0, 2, 1], dtype=np.uint8)
    base = masks_to_counts(pred, truth, 3)
    relabelled = masks_to_counts(swap[pred], swap[truth], 3)
    assert (base.tp, base.fp, base.fn) == (relabelled.tp, relabelled.fp, relabelled.fn)
    assert miou(base).value == pytest.approx(miou(relabelled).value, abs=1e-12)


def test_iou_threshold_is_inclusive():
    truth = np.zeros((5, 12), dtype=bool)
    truth[2, 0:6] = True
    half = np.zeros_like(truth)
    half[2, 2:8] = True      # IoU 4 / 8
    third = np.zeros_like(truth)
    third[2, 3:9] = True     # IoU 3 / 9
    assert match_components(half, truth) == (1, 0, 0)
    assert match_components(third, truth) == (0, 1, 1)


def test_one_prediction_matches_one_truth():
    truth = np.zeros((10, 20), dtype=bool)
    truth[2:8, 2:8] = True
    pred = np.zeros_like(truth)
    pred[2:8, 2:8] = True
    pred[2:8, 12:18] = True
    assert match_components(pred, truth) == (1, 1, 0)


def test_mask_contract_violations():
    with pytest.raises(ContractViolation):
        masks_to_counts(np.zeros((3, 3)), np.zeros((3, 4)), 2)
    with pytest.raises(ContractViolation):
        masks_to_counts(np.full((3, 3), 5), np.zeros((3, 3)), 2)


# --- harness over directories ---
def _write_masks(root, name, pred, truth):
    (root / "pred").mkdir(exist_ok=True)
    (root / "truth").mkdir(exist_ok=True)
    cv2.imwrite(str(root / "pred" / name), pred)
    cv2.imwrite(str(root / "truth" / name), truth)


def test_harness_pools_counts_over_images(tmp_path, audit):
    truth = _two_blobs()
    _write_masks(tmp_path, "a.png", truth, truth)
    empty_pred = np.zeros_like(truth)
    _write_masks(tmp_path, "b.png", empty_pred, truth)
    harness = EvaluationHarness(tmp_path / "pred", tmp_path / "truth", 3)
    summary = harness.run_evaluation()
    det = summary["detection"]
    audit(kind="metrics", query="2 images, second prediction empty",
          result=f"P={det['precision']} R={det['recall']:.2f}")
    assert (det["tp"], det["fp"], det["fn"]) == (2, 0, 2)
    assert det["precision"] == 1.0 and det["recall"] == 0.5
    assert summary["images"] == 2

    text_path, json_path = harness.save_results(summary, tmp_path / "report")
    assert text_path.name == REPORT_TEXT_FILE and json_path.name == REPORT_JSON_FILE
    assert "IoU >= 0.5" in text_path.read_text()
    assert json.loads(json_path.read_text())["confusion_matrix"] == summary["confusion_matrix"]


def test_harness_reports_missing_prediction(tmp_path):
    truth = _two_blobs()
    _write_masks(tmp_path, "a.png", truth, truth)
    cv2.imwrite(str(tmp_path / "truth" / "b.png"), truth)
    with pytest.raises(FrameError, match="b.png"):
        EvaluationHarness(tmp_path / "pred", tmp_path / "truth", 3).run_evaluation()


def test_format_report_marks_undefined_scores():
    truth = np.zeros((10, 10), dtype=np.uint8)
    counts = masks_to_counts(truth, truth, 2)
    summary = {
        "images": 1, "classes": 2, "iou_threshold": 0.5,
        "detection": {"tp": 0, "fp": 0, "fn": 0, **asdict(detection_scores(counts))},
        "segmentation": {"miou": miou(counts).value, "per_class_iou": {"0": 1.0, "1": None},
                         "excluded_classes": [1]},
    }
    report = EvaluationHarness.format_report(summary)
    assert "F1:        undefined  (flag: undefined)" in report
    assert "excluded (empty) classes: [1]" in report


# --- study and robustness ---
def test_band_stats_from_records():
    records = [
        TrialRecord(2.0, 1.0, 1.0, -1.0, 400, 300, 40),
        TrialRecord(4.0, -1.0, 3.0, 1.0, 600, 500, 60),
        TrialRecord(None, None, None, None, 100, 50, 0),
    ]
    s = band_stats("near", records)
    assert s.trials == 3
    assert s.accuracy == pytest.approx(2 / 3)
    assert s.sd_center_mm == pytest.approx(np.std([2.0, 4.0], ddof=1))
    assert s.asobbx_px == pytest.approx(1100 / 3)
    assert s.anop == pytest.approx(850 / 3)
    assert s.anocc == 50.0


def test_clean_fruit_is_accurate():
    spec = SceneSpec(fruits=[FruitPrimitive((0.02, -0.01, 0.4), 0.04, 1)], intrinsics=default_intrinsics(320, 240))
    record = evaluate_single_fruit(spec, PipelineConfig(), seed=0)
    assert record.modelled and record.accurate
    assert abs(record.theta_error_deg) < 10 and abs(record.phi_error_deg) < 10


def test_small_distance_study():
    stats = run_distance_study(trials=2, seed=1, intrinsics=default_intrinsics(320, 240),
                               bands=[("0.3-0.5 m", 0.3, 0.5)])
    assert len(stats) == 1
    assert stats[0].trials == 2
    assert 0.0 <= stats[0].accuracy <= 1.0
    assert stats[0].anop > 0
    assert "0.3-0.5 m" in format_study(stats)


def test_robustness_stats():
    records = [
        {"center": [0.0, 0.0, 0.4], "radius": 0.040, "theta": 0.0, "phi": 0.0},
        {"center": [0.002, 0.0, 0.4], "radius": 0.042, "theta": 0.02, "phi": 0.0},
    ]
    stats = robustness_stats(records)
    assert stats["runs"] == 2
    assert stats["sd_center_x_mm"] == pytest.approx(np.sqrt(2))
    assert stats["sd_center_y_mm"] == 0.0
    assert stats["sd_radius_mm"] == pytest.approx(np.sqrt(2))
    assert stats["sd_theta_deg"] == pytest.approx(np.degrees(0.02 / np.sqrt(2)))
    with pytest.raises(ContractViolation):
        robustness_stats(records[:1])


def test_robustness_replay_on_noisy_fruit():
    spec = SceneSpec(fruits=[FruitPrimitive((0.0, 0.0, 0.4), 0.04, 1)],
                     intrinsics=default_intrinsics(320, 240), depth_noise=0.002)
    stats = robustness_replay(spec, runs=3, seed=4)
    assert stats["runs"] == 3
    assert stats["sd_radius_mm"] < 10.0
    assert all(v >= 0.0 for v in stats.values())
