"""Uncertainty-aware pseudo-labels: variance maps, scores, selection and reweighting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from saliency_adapt.core.errors import InvalidArgumentError, PseudoLabelError
from saliency_adapt.core.imaging import GrayMap, RgbImage
from saliency_adapt.core.parallel import ordered_map
from saliency_adapt.core.persistence import PersistentStore
from saliency_adapt.pipeline.augment import AugmentationKind, AugmentationSpec, apply, invert
from saliency_adapt.pipeline.predictor import Predictor

logger = logging.getLogger(__name__)

MAX_VARIANCE = 0.25
# Variance maps are stored scaled by this factor so the PNG uses the full 8-bit range.
VARIANCE_PNG_SCALE = 4.0


@dataclass(frozen=True, slots=True)
class VarianceMap:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or not np.all(np.isfinite(values)):
            raise InvalidArgumentError("VarianceMap expects a finite (H, W) array")
        if values.min() < 0.0 or values.max() > MAX_VARIANCE:
            raise InvalidArgumentError(f"VarianceMap values must lie in [0, {MAX_VARIANCE}]")
        object.__setattr__(self, "values", values)

    @property
    def dims(self) -> tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])


@dataclass(frozen=True, slots=True)
class WeightMap:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or not np.all(np.isfinite(values)):
            raise InvalidArgumentError("WeightMap expects a finite (H, W) array")
        if values.min() <= 0.0 or values.max() > 1.0:
            raise InvalidArgumentError("WeightMap values must lie in (0, 1]")
        object.__setattr__(self, "values", values)

    @classmethod
    def ones(cls, height: int, width: int) -> WeightMap:
        return cls(np.ones((height, width), dtype=np.float64))

    @property
    def dims(self) -> tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])


@dataclass(frozen=True, slots=True)
class PseudoLabelRecord:
    target_id: str
    pseudo_label: GrayMap
    variance: VarianceMap
    score: float
    weights: WeightMap
    selected: bool = False
    round_index: int = 0

    def __post_init__(self) -> None:
        if not (self.pseudo_label.dims == self.variance.dims == self.weights.dims):
            raise InvalidArgumentError(f"Maps of pseudo-label record {self.target_id!r} disagree in size")

    @property
    def foreground_fraction(self) -> float:
        return float(np.mean(self.pseudo_label.values >= 0.5))

    def sidecar(self) -> dict[str, object]:
        return {
            "target_id": self.target_id,
            "score": self.score,
            "selected": self.selected,
            "round": self.round_index,
            "foreground_fraction": self.foreground_fraction,
            "variance_png_scale": VARIANCE_PNG_SCALE,
        }


def variance_map(preds: Sequence[GrayMap]) -> VarianceMap:
    """Per-pixel population variance (divide by N) of ``preds``."""
    if len(preds) < 2:
        raise InvalidArgumentError(f"variance_map needs at least 2 predictions, got {len(preds)}")
    dims = preds[0].dims
    if any(pred.dims != dims for pred in preds):
        raise InvalidArgumentError("variance_map predictions must share dimensions")
    stack = np.stack([pred.values for pred in preds])
    spread = np.mean((stack - stack.mean(axis=0)) ** 2, axis=0)
    return VarianceMap(np.clip(spread, 0.0, MAX_VARIANCE))


def uncertainty_score(variance: VarianceMap) -> float:
    return float(np.mean(variance.values))


def reweight(variance: VarianceMap, k: float) -> WeightMap:
    """``exp(-k * v)`` per pixel; floored at the smallest positive float so weights stay > 0."""
    if k <= 0:
        raise InvalidArgumentError(f"k must be > 0, got {k}")
    weights = np.exp(-k * variance.values)
    return WeightMap(np.maximum(weights, np.finfo(np.float64).tiny))


def selection_quota(proportion: float, total: int) -> int:
    # The epsilon keeps products such as 0.6 * 300 from flooring one short.
    return int(math.floor(proportion * total + 1e-9))


def select_targets(
    records: Sequence[PseudoLabelRecord],
    proportion: float,
    degen_lo: float = 0.01,
    degen_hi: float = 0.99,
    *,
    enabled: bool = True,
) -> list[PseudoLabelRecord]:
    """Mark the ``floor(proportion * len(records))`` most consistent records as selected.

    Records whose binarized pseudo-label is almost all background or all
    foreground never qualify. With ``enabled=False`` (no image-level
    selection) the quota is filled in ``target_id`` order with no
    degeneracy filter. Records come back in input order.
    """
    if not 0.0 <= proportion <= 1.0:
        raise InvalidArgumentError(f"proportion must lie in [0, 1], got {proportion}")
    quota = selection_quota(proportion, len(records))
    if enabled:
        candidates = [
            record
            for record in records
            if degen_lo <= record.foreground_fraction <= degen_hi
        ]
        ranked = sorted(candidates, key=lambda record: (record.score, record.target_id))
    else:
        ranked = sorted(records, key=lambda record: record.target_id)
    chosen = {record.target_id for record in ranked[:quota]}
    if len(chosen) < quota:
        logger.warning("Only %d of %d requested pseudo-labels passed the degeneracy filter", len(chosen), quota)
    return [replace(record, selected=record.target_id in chosen) for record in records]


def estimate_record(
    predictor: Predictor,
    target_id: str,
    target_images: Mapping[str, RgbImage],
    specs: Sequence[AugmentationSpec],
    k: float,
    *,
    reweighting: bool = True,
    round_index: int = 0,
) -> PseudoLabelRecord:
    """Pseudo-label, variance, score and weights for one target image."""
    if not specs or specs[0].kind is not AugmentationKind.IDENTITY:
        raise InvalidArgumentError(f"Augmentation set of {target_id!r} must start with Identity")
    image = target_images[target_id]
    preds = []
    for spec in specs:
        augmented = apply(spec, image, target_images)
        preds.append(invert(spec, predictor.predict(augmented), image.dims))
    variance = variance_map(preds)
    weights = reweight(variance, k) if reweighting else WeightMap.ones(*image.dims)
    return PseudoLabelRecord(
        target_id=target_id,
        pseudo_label=preds[0],
        variance=variance,
        score=uncertainty_score(variance),
        weights=weights,
        round_index=round_index,
    )


def refresh_pseudo_labels(
    predictor: Predictor,
    target_images: Mapping[str, RgbImage],
    aug_sets: Mapping[str, Sequence[AugmentationSpec]],
    k: float,
    proportion: float,
    *,
    degen_lo: float = 0.01,
    degen_hi: float = 0.99,
    selection: bool = True,
    reweighting: bool = True,
    round_index: int = 0,
    workers: int = 1,
) -> list[PseudoLabelRecord]:
    """Re-estimate every target pseudo-label with a frozen predictor, then select."""

    def estimate(target_id: str) -> PseudoLabelRecord:
        try:
            return estimate_record(
                predictor,
                target_id,
                target_images,
                aug_sets[target_id],
                k,
                reweighting=reweighting,
                round_index=round_index,
            )
        except Exception as exc:
            raise PseudoLabelError(target_id, exc) from exc

    records = ordered_map(estimate, list(target_images), workers=workers)
    records = select_targets(records, proportion, degen_lo, degen_hi, enabled=selection)
    logger.info(
        "Refreshed %d pseudo-labels for round %d: %d selected (mean score %.5f)",
        len(records),
        round_index,
        sum(record.selected for record in records),
        float(np.mean([record.score for record in records])) if records else 0.0,
    )
    return records


def write_pseudo_audit(records: Sequence[PseudoLabelRecord], root: Path) -> None:
    """Persist pseudo-label, variance and weight PNGs plus a JSON sidecar per record."""
    store = PersistentStore(root)
    for record in records:
        stem = record.target_id
        store.write_png(f"{stem}_label.png", record.pseudo_label)
        store.write_png(f"{stem}_variance.png", GrayMap(record.variance.values * VARIANCE_PNG_SCALE))
        store.write_png(f"{stem}_weight.png", GrayMap(record.weights.values))
        store.write_json(f"{stem}.json", record.sidecar())
