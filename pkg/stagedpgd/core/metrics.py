"""Retrieval, segmentation and cell-detection metrics plus attack success rates."""

import decimal
import logging
from typing import Sequence

import numpy as np

from .dataset import NUM_CLASSES, SyntheticSample
from .models import DifferentiableModel
from .objectives import ObjectiveError, TextBank

logger = logging.getLogger(__name__)

DENSE_METRIC_NAMES = {"segmentation": "mIoU", "detection": "cell-mAP"}


class EvaluationError(ValueError):
    """Exception raised for mismatched or malformed metric inputs."""
    pass


class UndefinedASRError(EvaluationError):
    """Exception raised when the clean metric is zero and ASR has no meaning."""
    pass


def recall_at_1_from_similarities(similarities: np.ndarray, targets: np.ndarray) -> float:
    """
    Fraction of rows whose highest-similarity column is the target column.

    Ties resolve to the lowest index.
    """
    similarities = np.asarray(similarities)
    targets = np.asarray(targets)
    if similarities.ndim != 2 or similarities.shape[0] != targets.shape[0]:
        raise EvaluationError(
            f"Similarity matrix {similarities.shape} does not match {targets.shape[0]} targets"
        )
    if similarities.shape[0] == 0:
        raise EvaluationError("Cannot compute Recall@1 over zero images")
    return float(np.mean(np.argmax(similarities, axis=1) == targets))


def recall_at_1(
    clip_model: DifferentiableModel,
    images: np.ndarray,
    bank: TextBank,
    captions: Sequence[str],
) -> float:
    """
    Image-to-text Recall@1 of a CLIP model over a caption bank.

    Args:
        clip_model: Contrastive model
        images: N x H x W x C images
        bank: Text bank holding every correct caption
        captions: Correct caption of each image

    Returns:
        Recall@1 in [0, 1]
    """
    if len(images) != len(captions):
        raise EvaluationError(f"{len(images)} images but {len(captions)} captions")
    try:
        targets = bank.targets(captions)
    except ObjectiveError as e:
        raise EvaluationError(str(e)) from e
    similarities = clip_model.image_embeddings(images) @ bank.embeddings.T
    return recall_at_1_from_similarities(similarities, targets)


def class_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """
    Per-class IoU from the pixel confusion matrix; NaN for classes absent from both.

    Args:
        pred: Predicted class ids (any shape)
        gt: Ground-truth class ids (same shape)
        num_classes: Number of classes, background included

    Returns:
        Array of num_classes IoU values
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"Mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise EvaluationError(f"{name} contains class ids outside [0, {num_classes})")

    confusion = np.bincount(
        num_classes * gt.ravel() + pred.ravel(), minlength=num_classes * num_classes
    ).reshape(num_classes, num_classes)
    intersection = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - intersection

    iou = np.full(num_classes, np.nan)
    present = union > 0
    iou[present] = intersection[present] / union[present]
    return iou


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int = NUM_CLASSES) -> float:
    """Mean IoU over classes present in the prediction or the ground truth."""
    iou = class_iou(pred, gt, num_classes)
    if np.all(np.isnan(iou)):
        raise EvaluationError("No classes present in prediction or ground truth")
    return float(np.nanmean(iou))


def _average_precision(scores: np.ndarray, hits: np.ndarray, num_positives: int) -> float:
    """All-points interpolated AP of ranked detections."""
    order = np.argsort(-scores, kind="stable")
    hits = hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / num_positives
    precision = tp / np.maximum(tp + fp, 1)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def cell_map(
    scores: np.ndarray,
    classes: np.ndarray,
    gt_labels: np.ndarray,
    num_classes: int = NUM_CLASSES,
) -> float:
    """
    Mean per-class average precision of per-cell detections.

    Each cell emits one detection (objectness score, foreground class); a detection
    is a hit when the cell holds an object of that class. Detections with a score
    of zero or less are dropped.

    Args:
        scores: (N x) G x G objectness scores
        classes: (N x) G x G predicted foreground classes
        gt_labels: (N x) G x G x 2 (objectness, class id) labels
        num_classes: Number of classes, background included

    Returns:
        Mean AP over classes with at least one ground-truth cell
    """
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    if scores.shape != classes.shape or gt_labels.shape != scores.shape + (2,):
        raise EvaluationError(
            f"Grid mismatch: scores {scores.shape}, classes {classes.shape}, labels {gt_labels.shape}"
        )

    gt_classes = (gt_labels[..., 0] * gt_labels[..., 1]).ravel()
    scores, classes = scores.ravel(), classes.ravel()

    aps = []
    for cid in range(1, num_classes):
        num_positives = int(np.sum(gt_classes == cid))
        if num_positives == 0:
            continue
        selected = (classes == cid) & (scores > 0)
        aps.append(
            _average_precision(scores[selected], gt_classes[selected] == cid, num_positives)
        )

    if not aps:
        raise EvaluationError("No ground-truth objects to score against")
    return float(np.mean(aps))


def dense_task_metric(
    model: DifferentiableModel, images: np.ndarray, samples: Sequence[SyntheticSample]
) -> float:
    """
    Dataset-level mIoU (segmentation) or cell-mAP (detection) of a dense model.

    Args:
        model: Dense model
        images: N x H x W x C images, clean or adversarial
        samples: Samples providing the ground truth, aligned with images
    """
    if len(images) != len(samples):
        raise EvaluationError(f"{len(images)} images but {len(samples)} samples")
    if model.head_kind == "segmentation":
        gt = np.stack([s.seg_mask for s in samples])
        return miou(model.predict_masks(images), gt)
    if model.head_kind == "detection":
        scores, classes = model.predict_cells(images)
        return cell_map(scores, classes, np.stack([s.cell_labels for s in samples]))
    raise EvaluationError(f"{model.name} is not a dense model")


def asr(metric_before: float, metric_after: float) -> float:
    """
    Attack success rate: relative drop of a higher-is-better metric, in percent.

    Raises:
        UndefinedASRError: If metric_before is not positive
    """
    if not metric_before > 0:
        raise UndefinedASRError(f"ASR is undefined for a clean metric of {metric_before}")
    return 100.0 * (metric_before - metric_after) / metric_before


def format_asr(value: float) -> str:
    """ASR at one decimal place, rounding halves up (78.75 -> "78.8")."""
    # Round to 9 places first so binary noise such as 78.7499999 still reads as a half
    tidy = decimal.Decimal(repr(round(value, 9)))
    return str(tidy.quantize(decimal.Decimal("0.1"), rounding=decimal.ROUND_HALF_UP))
