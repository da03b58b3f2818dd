"""MAE, precision-recall curve and F-measure for saliency maps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from saliency_adapt.core.errors import InvalidArgumentError
from saliency_adapt.core.imaging import BinaryMask, GrayMap, resize_bilinear
from saliency_adapt.core.parallel import ordered_map
from saliency_adapt.pipeline.manifest import DatasetReader
from saliency_adapt.pipeline.predictor import Predictor

logger = logging.getLogger(__name__)

N_THRESHOLDS = 256
THRESHOLDS = np.arange(N_THRESHOLDS, dtype=np.float64) / 255.0
DEFAULT_BETA_SQ = 0.3


@dataclass(frozen=True, slots=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass(slots=True)
class EvalResult:
    mae: float
    f_beta: float
    pr_points: list[PRPoint]
    n_images: int
    per_image_mae: list[tuple[str, float]] = field(default_factory=list)

    def summary(self) -> dict[str, float | int]:
        return {"n_images": self.n_images, "mae": self.mae, "f_beta": self.f_beta}


def _values(map_: GrayMap | BinaryMask) -> np.ndarray:
    return map_.values.astype(np.float64)


def mae(pred: GrayMap, target: GrayMap | BinaryMask) -> float:
    if pred.dims != target.dims:
        raise InvalidArgumentError(f"mae needs equal dims, got {pred.dims} and {target.dims}")
    return float(np.mean(np.abs(_values(pred) - _values(target))))


def threshold_counts(pred: GrayMap, gt: BinaryMask) -> tuple[np.ndarray, np.ndarray, int]:
    """True/false positive counts of ``pred >= t`` at every threshold, and the positive count."""
    if pred.dims != gt.dims:
        raise InvalidArgumentError(f"pr counts need equal dims, got {pred.dims} and {gt.dims}")
    positive = gt.values.astype(bool)
    pos_scores = np.sort(pred.values[positive])
    neg_scores = np.sort(pred.values[~positive])
    tp = pos_scores.size - np.searchsorted(pos_scores, THRESHOLDS, side="left")
    fp = neg_scores.size - np.searchsorted(neg_scores, THRESHOLDS, side="left")
    return tp.astype(np.int64), fp.astype(np.int64), int(pos_scores.size)


def _points(tp: np.ndarray, fp: np.ndarray, n_pos: int) -> list[PRPoint]:
    predicted = tp + fp
    points = []
    for index in range(N_THRESHOLDS):
        # No predicted positives means no false positives.
        precision = 1.0 if predicted[index] == 0 else tp[index] / predicted[index]
        points.append(PRPoint(float(THRESHOLDS[index]), float(precision), float(tp[index] / n_pos)))
    return points


def pr_curve(preds: Sequence[GrayMap], gts: Sequence[BinaryMask]) -> list[PRPoint]:
    """Micro-averaged curve: counts are pooled over all images before dividing."""
    if not preds or len(preds) != len(gts):
        raise InvalidArgumentError("pr_curve needs non-empty, equally long prediction and label lists")
    tp = np.zeros(N_THRESHOLDS, dtype=np.int64)
    fp = np.zeros(N_THRESHOLDS, dtype=np.int64)
    n_pos = 0
    for pred, gt in zip(preds, gts):
        image_tp, image_fp, image_pos = threshold_counts(pred, gt)
        tp += image_tp
        fp += image_fp
        n_pos += image_pos
    if n_pos == 0:
        raise InvalidArgumentError("pr_curve needs at least one positive label pixel")
    return _points(tp, fp, n_pos)


def f_beta(precision: float, recall: float, beta_sq: float = DEFAULT_BETA_SQ) -> float:
    denominator = beta_sq * precision + recall
    if denominator == 0:
        return 0.0
    return (1.0 + beta_sq) * precision * recall / denominator


def max_f_beta(points: Sequence[PRPoint], beta_sq: float = DEFAULT_BETA_SQ) -> float:
    return max(f_beta(point.precision, point.recall, beta_sq) for point in points)


class MetricAccumulator:
    """Collects per-image counts; the final reduction ignores arrival order."""

    def __init__(self) -> None:
        self.tp = np.zeros(N_THRESHOLDS, dtype=np.int64)
        self.fp = np.zeros(N_THRESHOLDS, dtype=np.int64)
        self.n_pos = 0
        self.image_mae: list[tuple[str, float]] = []
        self.image_curves: list[list[PRPoint]] = []

    def add(self, image_id: str, pred: GrayMap, gt: BinaryMask) -> None:
        tp, fp, n_pos = threshold_counts(pred, gt)
        self.tp += tp
        self.fp += fp
        self.n_pos += n_pos
        self.image_mae.append((image_id, mae(pred, gt)))
        if n_pos > 0:
            self.image_curves.append(_points(tp, fp, n_pos))

    def result(self, beta_sq: float = DEFAULT_BETA_SQ, per_image: bool = False) -> EvalResult:
        if not self.image_mae:
            raise InvalidArgumentError("no images were evaluated")
        if self.n_pos == 0:
            raise InvalidArgumentError("evaluation needs at least one positive label pixel")
        if per_image:
            points = [
                PRPoint(
                    float(THRESHOLDS[index]),
                    math.fsum(curve[index].precision for curve in self.image_curves) / len(self.image_curves),
                    math.fsum(curve[index].recall for curve in self.image_curves) / len(self.image_curves),
                )
                for index in range(N_THRESHOLDS)
            ]
        else:
            points = _points(self.tp, self.fp, self.n_pos)
        ordered = sorted(self.image_mae)
        return EvalResult(
            mae=math.fsum(value for _, value in ordered) / len(ordered),
            f_beta=max_f_beta(points, beta_sq),
            pr_points=points,
            n_images=len(ordered),
            per_image_mae=ordered,
        )


def evaluate_manifest(
    predictor: Predictor,
    reader: DatasetReader,
    test_dims: tuple[int, int],
    *,
    beta_sq: float = DEFAULT_BETA_SQ,
    per_image: bool = False,
    workers: int = 1,
) -> EvalResult:
    """Predict every record at ``test_dims``, resize back to the label grid and score it."""

    def score(record_id: str) -> tuple[str, GrayMap, BinaryMask]:
        label = reader.label(record_id)
        image = reader.image(record_id)
        pred = predictor.predict(resize_bilinear(image, *test_dims))
        return record_id, resize_bilinear(pred, *label.dims), label

    accumulator = MetricAccumulator()
    for record_id, pred, label in ordered_map(score, reader.record_ids, workers=workers):
        accumulator.add(record_id, pred, label)
    result = accumulator.result(beta_sq, per_image)
    logger.info("Evaluated %d images from %s: mae=%.5f f_beta=%.5f", result.n_images, reader.root, result.mae, result.f_beta)
    return result
