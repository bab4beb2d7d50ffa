"""Tests for metrics module."""

import numpy as np
import pytest

from stagedpgd.core.metrics import (
    EvaluationError,
    UndefinedASRError,
    asr,
    cell_map,
    class_iou,
    dense_task_metric,
    format_asr,
    miou,
    recall_at_1,
    recall_at_1_from_similarities,
)


def test_asr_values():
    """Test ASR boundaries and worked values."""
    assert asr(0.8, 0.8) == 0.0
    assert asr(0.8, 0.0) == 100.0
    assert asr(0.5, 0.6) == pytest.approx(-20.0)
    assert format_asr(asr(24.0, 5.1)) == "78.8"
    assert format_asr(asr(46.24, 0.24)) == "99.5"


def test_asr_undefined_for_zero_clean_metric():
    """Test ASR refuses a zero clean metric."""
    with pytest.raises(UndefinedASRError):
        asr(0.0, 0.0)


@pytest.mark.parametrize(
    "value, text",
    [(78.75, "78.8"), (78.7499999999, "78.8"), (78.74, "78.7"), (0.0, "0.0"), (100.0, "100.0")],
)
def test_format_asr_rounds_half_up(value, text):
    """Test one-decimal ASR formatting."""
    assert format_asr(value) == text


def test_recall_matches_brute_force():
    """Test Recall@1 against a loop over rows."""
    rng = np.random.default_rng(0)
    sims = rng.normal(size=(50, 7))
    targets = rng.integers(0, 7, size=50)

    hits = 0
    for row, target in zip(sims, targets):
        best = max(range(7), key=lambda j: (row[j], -j))
        hits += best == target
    assert recall_at_1_from_similarities(sims, targets) == hits / 50


def test_recall_ties_go_to_lowest_index():
    """Test tied similarities resolve to the first column."""
    sims = np.array([[0.5, 0.5, 0.1], [0.2, 0.9, 0.9]])
    assert recall_at_1_from_similarities(sims, np.array([0, 1])) == 1.0
    assert recall_at_1_from_similarities(sims, np.array([1, 2])) == 0.0


def test_recall_invariant_to_monotone_transform():
    """Test Recall@1 only depends on the ranking."""
    rng = np.random.default_rng(1)
    sims = rng.uniform(-1, 1, size=(20, 5))
    targets = rng.integers(0, 5, size=20)
    assert recall_at_1_from_similarities(sims, targets) == recall_at_1_from_similarities(
        np.exp(3 * sims) + 2, targets
    )


def test_recall_shape_errors():
    """Test mismatched and empty inputs."""
    with pytest.raises(EvaluationError):
        recall_at_1_from_similarities(np.zeros((3, 2)), np.zeros(2, dtype=int))
    with pytest.raises(EvaluationError):
        recall_at_1_from_similarities(np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_recall_at_1_on_model(clip_model, bank, samples):
    """Test model Recall@1 lies in [0, 1] and checks caption counts."""
    images = np.stack([s.image for s in samples])
    value = recall_at_1(clip_model, images, bank, [s.caption for s in samples])
    assert 0.0 <= value <= 1.0
    with pytest.raises(EvaluationError):
        recall_at_1(clip_model, images, bank, [samples[0].caption])


def test_class_iou_matches_set_oracle():
    """Test per-class IoU against pixel-set intersection over union."""
    rng = np.random.default_rng(2)
    pred = rng.integers(0, 4, size=(6, 6))
    gt = rng.integers(0, 4, size=(6, 6))
    iou = class_iou(pred, gt, num_classes=5)

    for cid in range(4):
        p, g = pred == cid, gt == cid
        expected = (p & g).sum() / (p | g).sum()
        assert iou[cid] == pytest.approx(expected, abs=1e-12)
    assert np.isnan(iou[4])
    assert miou(pred, gt, num_classes=5) == pytest.approx(np.mean(iou[:4]), abs=1e-12)


def test_miou_perfect_and_permutation_invariant():
    """Test a perfect mask scores 1 and pixel order does not matter."""
    rng = np.random.default_rng(3)
    gt = rng.integers(0, 3, size=(5, 5))
    assert miou(gt, gt, num_classes=3) == 1.0

    pred = rng.integers(0, 3, size=(5, 5))
    perm = rng.permutation(25)
    shuffled = miou(pred.ravel()[perm], gt.ravel()[perm], num_classes=3)
    assert shuffled == pytest.approx(miou(pred, gt, num_classes=3), abs=1e-12)


def test_class_iou_errors():
    """Test shape and class-range checks."""
    with pytest.raises(EvaluationError, match="shapes differ"):
        class_iou(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(EvaluationError, match="outside"):
        class_iou(np.full((2, 2), 7), np.zeros((2, 2)), num_classes=3)


def test_cell_map_worked_example():
    """Test AP of a miss ranked above two hits."""
    scores = np.array([[0.9, 0.8, 0.7]])
    classes = np.array([[1, 1, 1]])
    labels = np.array([[[0, 0], [1, 1], [1, 1]]])
    assert cell_map(scores, classes, labels) == pytest.approx(2 / 3)


def test_cell_map_perfect_detection():
    """Test detections matching every object score 1."""
    labels = np.zeros((2, 3, 3, 2), dtype=int)
    labels[0, 0, 0] = [1, 4]
    labels[1, 2, 1] = [1, 7]
    classes = np.where(labels[..., 0] == 1, labels[..., 1], 1)
    scores = np.where(labels[..., 0] == 1, 0.9, 0.0)
    assert cell_map(scores, classes, labels) == 1.0


def test_cell_map_is_order_invariant():
    """Test permuting the cells leaves cell-mAP unchanged."""
    rng = np.random.default_rng(4)
    scores = rng.uniform(size=9)
    classes = rng.integers(1, 4, size=9)
    labels = np.stack([rng.integers(0, 2, size=9), rng.integers(1, 4, size=9)], axis=-1)
    reference = cell_map(scores, classes, labels)

    for _ in range(10):
        perm = rng.permutation(9)
        assert cell_map(scores[perm], classes[perm], labels[perm]) == pytest.approx(reference)


def test_cell_map_without_objects():
    """Test an empty ground truth is an error."""
    with pytest.raises(EvaluationError, match="No ground-truth objects"):
        cell_map(np.ones((2, 2)), np.ones((2, 2), dtype=int), np.zeros((2, 2, 2), dtype=int))


def test_cell_map_grid_mismatch():
    """Test mismatched grids are rejected."""
    with pytest.raises(EvaluationError, match="Grid mismatch"):
        cell_map(np.ones((2, 2)), np.ones((3, 3), dtype=int), np.zeros((2, 2, 2), dtype=int))


def test_dense_task_metric(seg_model, det_model, clip_model, samples):
    """Test the dense metric dispatches on the head kind."""
    images = np.stack([s.image for s in samples])
    assert 0.0 <= dense_task_metric(seg_model, images, samples) <= 1.0
    assert 0.0 <= dense_task_metric(det_model, images, samples) <= 1.0
    with pytest.raises(EvaluationError, match="not a dense model"):
        dense_task_metric(clip_model, images, samples)
    with pytest.raises(EvaluationError):
        dense_task_metric(seg_model, images[:1], samples)
