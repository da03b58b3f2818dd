"""Weighted joint loss, SGD rounds and the multi-round adaptation pipeline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from saliency_adapt.core.config_manager import RunConfig, TrainConfig
from saliency_adapt.core.errors import InvalidArgumentError, NumericalFailureError
from saliency_adapt.core.imaging import GrayMap, RgbImage, resize_bilinear
from saliency_adapt.core.ledger import RunLedger
from saliency_adapt.core.parallel import ordered_map
from saliency_adapt.core.persistence import PersistentStore
from saliency_adapt.pipeline.augment import build_augmentation_set
from saliency_adapt.pipeline.manifest import DatasetReader
from saliency_adapt.pipeline.metrics import EvalResult, evaluate_manifest
from saliency_adapt.pipeline.predictor import (
    PredictorParams,
    SaliencyPredictor,
    backprop,
    forward_trace,
    image_to_input,
    init_params,
    save_checkpoint,
)
from saliency_adapt.pipeline.upl import PseudoLabelRecord, refresh_pseudo_labels, write_pseudo_audit

logger = logging.getLogger(__name__)

EPS = 1e-7
FINAL_CHECKPOINT = "final.ckpt"
METRICS_FILE = "metrics.csv"


@dataclass(frozen=True, slots=True)
class TrainingSample:
    sample_id: str
    image: RgbImage
    label: GrayMap
    weights: GrayMap | None = None
    domain: Literal["source", "target"] = "source"

    def __post_init__(self) -> None:
        if self.image.dims != self.label.dims or (self.weights is not None and self.weights.dims != self.label.dims):
            raise InvalidArgumentError(f"Sample {self.sample_id!r} has image, label and weights of different sizes")

    def weight_values(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(self.label.dims, dtype=np.float64)
        return self.weights.values


@dataclass(slots=True)
class LossReport:
    source: float
    target: float
    total: float
    batches: list[dict[str, float]] = field(default_factory=list)


def _bce_map(y: np.ndarray, p: np.ndarray) -> np.ndarray:
    clamped = np.clip(p, EPS, 1.0 - EPS)
    return -(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped))


def weighted_bce(y: GrayMap, p: GrayMap, weights: GrayMap | np.ndarray | None = None) -> float:
    """Pixel-mean of ``w * BCE(y, clamp(p))``."""
    if y.dims != p.dims:
        raise InvalidArgumentError(f"weighted_bce needs equal dims, got {y.dims} and {p.dims}")
    w = np.ones(y.dims) if weights is None else getattr(weights, "values", weights)
    if w.shape != y.dims:
        raise InvalidArgumentError(f"weights of shape {w.shape} do not match {y.dims}")
    return float(np.mean(w * _bce_map(y.values, p.values)))


def bce_logit_grad(y: np.ndarray, p: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Gradient of the pixel-mean weighted BCE with respect to the logits behind ``p``.

    Pixels whose probability sits outside the log clamp get zero gradient.
    """
    inside = (p >= EPS) & (p <= 1.0 - EPS)
    return np.where(inside, weights * (p - y), 0.0) / y.size


def _sample_pass(params: PredictorParams, sample: TrainingSample, scale: float) -> tuple[float, np.ndarray]:
    trace = forward_trace(params, image_to_input(sample.image))
    weights = sample.weight_values()
    loss = float(np.mean(weights * _bce_map(sample.label.values, trace.probs)))
    if not math.isfinite(loss):
        raise NumericalFailureError("loss", f"non-finite loss for sample {sample.sample_id!r}")
    grad = backprop(params, trace, bce_logit_grad(sample.label.values, trace.probs, weights) * scale)
    return loss, grad


def loss_and_gradient(
    params: PredictorParams,
    source_batch: Sequence[TrainingSample],
    target_batch: Sequence[TrainingSample],
    *,
    workers: int = 1,
) -> tuple[LossReport, np.ndarray]:
    """Joint source + target loss of one batch and its gradient.

    Each domain term is the mean over its samples; an empty domain
    contributes zero. Per-sample gradients are summed in batch order.
    """
    if not source_batch and not target_batch:
        raise InvalidArgumentError("a batch needs at least one source or target sample")
    jobs = [(sample, 1.0 / len(source_batch)) for sample in source_batch]
    jobs += [(sample, 1.0 / len(target_batch)) for sample in target_batch]
    results = ordered_map(lambda job: _sample_pass(params, *job), jobs, workers=workers)
    grad = np.zeros(params.size, dtype=np.float64)
    for _, sample_grad in results:
        grad += sample_grad
    source_losses = [loss for loss, _ in results[: len(source_batch)]]
    target_losses = [loss for loss, _ in results[len(source_batch) :]]
    source = math.fsum(source_losses) / len(source_losses) if source_losses else 0.0
    target = math.fsum(target_losses) / len(target_losses) if target_losses else 0.0
    report = LossReport(source=source, target=target, total=source + target)
    report.batches.append({"source": source, "target": target, "total": report.total})
    return report, grad


def round_loss(
    params: PredictorParams,
    source_batch: Sequence[TrainingSample],
    target_batch: Sequence[TrainingSample],
) -> LossReport:
    if not source_batch and not target_batch:
        raise InvalidArgumentError("round_loss needs at least one source or target sample")
    predictor = SaliencyPredictor(params)

    def term(batch: Sequence[TrainingSample]) -> float:
        if not batch:
            return 0.0
        losses = [weighted_bce(s.label, predictor.predict(s.image), s.weight_values()) for s in batch]
        return math.fsum(losses) / len(losses)

    source, target = term(source_batch), term(target_batch)
    report = LossReport(source=source, target=target, total=source + target)
    report.batches.append({"source": source, "target": target, "total": report.total})
    return report


def backward(
    params: PredictorParams,
    source_batch: Sequence[TrainingSample],
    target_batch: Sequence[TrainingSample],
    *,
    workers: int = 1,
) -> np.ndarray:
    """Analytic gradient of :func:`round_loss` with respect to every parameter."""
    return loss_and_gradient(params, source_batch, target_batch, workers=workers)[1]


def one_cycle_lr(step: int, total_steps: int, lr_max: float) -> float:
    """Linear warm-up from lr_max/25 to lr_max over 30% of the steps, then linear decay to lr_max/2500."""
    if total_steps < 1 or not 0 <= step < total_steps:
        raise InvalidArgumentError(f"step must lie in [0, {total_steps}), got {step}")
    start, end = lr_max / 25.0, lr_max / 2500.0
    peak = 0.3 * total_steps
    last = total_steps - 1
    if step <= peak or last <= peak:
        return start + (lr_max - start) * (step / peak)
    return lr_max + (end - lr_max) * ((step - peak) / (last - peak))


def _batch_plan(n_source: int, n_target: int, batch_size: int) -> int:
    return max(1, math.ceil((n_source + n_target) / batch_size))


def _epoch_batches(
    source: Sequence[TrainingSample],
    target: Sequence[TrainingSample],
    n_batches: int,
    rng: np.random.Generator,
) -> list[tuple[list[TrainingSample], list[TrainingSample]]]:
    """Split shuffled pools into ``n_batches`` mixed batches, each pool filled proportionally."""
    source_chunks = np.array_split(rng.permutation(len(source)), n_batches)
    target_chunks = np.array_split(rng.permutation(len(target)), n_batches)[::-1]
    batches = []
    for source_idx, target_idx in zip(source_chunks, target_chunks):
        if source_idx.size == 0 and target_idx.size == 0:
            continue
        batches.append(([source[i] for i in source_idx], [target[i] for i in target_idx]))
    return batches


@dataclass(slots=True)
class RoundResult:
    params: PredictorParams
    loss: LossReport
    steps: int


def train_round(
    params_prev: PredictorParams,
    source_subset: Sequence[TrainingSample],
    target_samples: Sequence[TrainingSample],
    config: TrainConfig,
    round_index: int,
    seed: int,
    *,
    workers: int = 1,
) -> RoundResult:
    """SGD with momentum under a one-cycle schedule over ``config.epochs_per_round`` epochs."""
    if not source_subset and not target_samples:
        raise InvalidArgumentError(f"round {round_index} has neither source nor target samples")
    rng = np.random.default_rng([seed, round_index])
    n_batches = _batch_plan(len(source_subset), len(target_samples), config.batch_size)
    per_epoch = sum(
        1
        for s, t in zip(
            np.array_split(np.arange(len(source_subset)), n_batches),
            np.array_split(np.arange(len(target_samples)), n_batches)[::-1],
        )
        if s.size or t.size
    )
    total_steps = per_epoch * config.epochs_per_round
    params = params_prev.copy()
    velocity = np.zeros_like(params.theta)
    batch_reports: list[dict[str, float]] = []
    step = 0
    for epoch in range(config.epochs_per_round):
        for source_batch, target_batch in _epoch_batches(source_subset, target_samples, n_batches, rng):
            report, grad = loss_and_gradient(params, source_batch, target_batch, workers=workers)
            if config.weight_decay:
                grad = grad + config.weight_decay * params.theta
            velocity = config.momentum * velocity + grad
            params.theta -= one_cycle_lr(step, total_steps, config.lr_max) * velocity
            batch_reports.extend(report.batches)
            step += 1
        logger.debug("Round %d epoch %d: last batch loss %.5f", round_index, epoch + 1, batch_reports[-1]["total"])
    if not np.all(np.isfinite(params.theta)):
        raise NumericalFailureError("sgd", f"non-finite parameters after round {round_index}")
    source = math.fsum(b["source"] for b in batch_reports) / len(batch_reports)
    target = math.fsum(b["target"] for b in batch_reports) / len(batch_reports)
    return RoundResult(params, LossReport(source, target, source + target, batch_reports), step)


def source_subset_indices(n_source: int, proportion: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw without replacement of ``floor(proportion * n)`` indices (at least one when proportion > 0)."""
    if proportion <= 0 or n_source == 0:
        return np.zeros(0, dtype=np.int64)
    count = min(n_source, max(1, int(math.floor(proportion * n_source + 1e-9))))
    return np.sort(rng.choice(n_source, size=count, replace=False))


@dataclass(frozen=True, slots=True)
class RoundMetrics:
    round_index: int
    split: str
    mae: float
    f_beta: float
    source_samples: int
    target_samples: int
    train_loss: float

    def row(self) -> list[object]:
        return [self.round_index, self.split, f"{self.mae:.6f}", f"{self.f_beta:.6f}"]


@dataclass(slots=True)
class PipelineResult:
    params: PredictorParams
    history: list[RoundMetrics]
    final_eval: EvalResult | None
    checkpoint: Path


def _resized(image: RgbImage, dims: tuple[int, int]) -> RgbImage:
    return resize_bilinear(image, *dims)


def load_source_samples(reader: DatasetReader, dims: tuple[int, int]) -> list[TrainingSample]:
    samples = []
    for record_id in reader.record_ids:
        label = GrayMap.from_mask(reader.label(record_id))
        samples.append(
            TrainingSample(
                record_id,
                _resized(reader.image(record_id), dims),
                resize_bilinear(label, *dims),
                domain="source",
            )
        )
    return samples


def target_samples_from(
    records: Sequence[PseudoLabelRecord],
    images: dict[str, RgbImage],
    dims: tuple[int, int],
) -> list[TrainingSample]:
    samples = []
    for record in records:
        if not record.selected:
            continue
        samples.append(
            TrainingSample(
                record.target_id,
                _resized(images[record.target_id], dims),
                resize_bilinear(record.pseudo_label, *dims),
                resize_bilinear(GrayMap(record.weights.values), *dims),
                domain="target",
            )
        )
    return samples


def write_metric_history(store: PersistentStore, history: Sequence[RoundMetrics]) -> Path:
    return store.write_csv(METRICS_FILE, ["round", "split", "mae", "f_beta"], [m.row() for m in history])


def run_pipeline(
    config: RunConfig,
    source_root: Path,
    target_train_root: Path,
    target_eval_root: Path | None,
    run_dir: Path,
    *,
    workers: int = 1,
    ledger: RunLedger | None = None,
) -> PipelineResult:
    """Train round by round, refreshing pseudo-labels before every round that uses targets.

    Round ``i`` artifacts land in ``run_dir/rounds/<i>/``. The evaluation
    split is the only place target labels are read.
    """
    train = config.train
    store = PersistentStore(run_dir)
    ledger = ledger or RunLedger(store.path("logs/run_ledger.jsonl"))
    source_reader = DatasetReader(source_root, purpose="train")
    target_reader = DatasetReader(target_train_root, purpose="train")
    eval_reader = DatasetReader(target_eval_root, purpose="eval") if target_eval_root else None

    source_pool = load_source_samples(source_reader, train.train_input_dims)
    target_images = dict(target_reader.images())
    aug_sets = build_augmentation_set(train.augment, list(target_images), config.seed)
    store.write_json(
        "augmentations.json",
        {target_id: [spec.to_dict() for spec in specs] for target_id, specs in aug_sets.items()},
    )
    params = init_params(config.seed)
    history: list[RoundMetrics] = []
    final_eval: EvalResult | None = None
    ledger.append("pipeline_start", "ok", details={"arm": train.arm, "rounds": train.schedule.rounds, "seed": config.seed})

    for round_index in range(1, train.schedule.rounds + 1):
        source_prop, target_prop = train.schedule.proportions(round_index)
        ledger.append(
            "round_start",
            "ok",
            details={"round": round_index, "source_prop": source_prop, "target_prop": target_prop},
        )
        try:
            target_samples: list[TrainingSample] = []
            if target_prop > 0 and target_images:
                records = refresh_pseudo_labels(
                    SaliencyPredictor(params),
                    target_images,
                    aug_sets,
                    train.k,
                    target_prop,
                    degen_lo=train.degenerate_low,
                    degen_hi=train.degenerate_high,
                    selection=train.sample_selection,
                    reweighting=train.pixel_reweighting,
                    round_index=round_index,
                    workers=workers,
                )
                write_pseudo_audit(records, store.path(f"rounds/{round_index}/pseudo"))
                target_samples = target_samples_from(records, target_images, train.train_input_dims)
                ledger.append(
                    "pseudo_labels_refreshed",
                    "ok",
                    details={"round": round_index, "selected": len(target_samples), "candidates": len(records)},
                )
            subset_rng = np.random.default_rng([config.seed, round_index, 0])
            source_subset = [source_pool[i] for i in source_subset_indices(len(source_pool), source_prop, subset_rng)]
            result = train_round(params, source_subset, target_samples, train, round_index, config.seed, workers=workers)
            params = result.params
            save_checkpoint(params, store.path(f"rounds/{round_index}/checkpoint.ckpt"))
            ledger.append(
                "round_trained",
                "ok",
                details={
                    "round": round_index,
                    "source_samples": len(source_subset),
                    "target_samples": len(target_samples),
                    "steps": result.steps,
                    "loss": result.loss.total,
                    "checksum": params.checksum(),
                },
            )
            if eval_reader is not None:
                final_eval = evaluate_manifest(
                    SaliencyPredictor(params),
                    eval_reader,
                    train.test_input_dims,
                    beta_sq=config.metrics.beta_sq,
                    per_image=config.metrics.per_image,
                    workers=workers,
                )
                history.append(
                    RoundMetrics(
                        round_index,
                        eval_reader.manifest.split,
                        final_eval.mae,
                        final_eval.f_beta,
                        len(source_subset),
                        len(target_samples),
                        result.loss.total,
                    )
                )
                write_metric_history(store, history)
                ledger.append("round_evaluated", "ok", details={"round": round_index, **final_eval.summary()})
        except Exception as exc:
            ledger.append("round_failed", "error", notes=str(exc), details={"round": round_index})
            raise
        logger.info(
            "Round %d/%d done: %d source + %d target samples, loss %.5f",
            round_index,
            train.schedule.rounds,
            len(source_subset),
            len(target_samples),
            result.loss.total,
        )

    checkpoint = save_checkpoint(params, store.path(FINAL_CHECKPOINT))
    ledger.append("pipeline_done", "ok", details={"checksum": params.checksum()})
    return PipelineResult(params, history, final_eval, checkpoint)
