"""Copy-paste compositing of the synthetic source domain and its shifted target twin."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from saliency_adapt.core.config_manager import DomainShiftConfig
from saliency_adapt.core.errors import InsufficientBackgroundsError, InvalidArgumentError, InvalidPlacementError
from saliency_adapt.core.imaging import BinaryMask, GrayMap, RgbImage, resize_bilinear, resize_float
from saliency_adapt.core.parallel import ordered_map
from saliency_adapt.pipeline.assets import BackgroundAsset, ForegroundAsset
from saliency_adapt.pipeline.manifest import IMAGE_DIR, LABEL_DIR, DatasetManifest, ManifestEntry

logger = logging.getLogger(__name__)

LABEL_THRESHOLD = 0.5
PLACEMENT_ATTEMPTS = 16
_SEED_BOUND = 2**31 - 1


@dataclass(frozen=True, slots=True)
class SynthRecord:
    record_id: str
    image: RgbImage
    label: BinaryMask
    scale_ratio: float
    center: tuple[int, int]
    fg_id: str
    bg_id: str
    seed: int
    shift: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        if self.image.dims != self.label.dims:
            raise InvalidArgumentError(
                f"Record {self.record_id!r}: image {self.image.dims} and label {self.label.dims} differ"
            )

    def to_entry(self) -> ManifestEntry:
        return ManifestEntry(
            record_id=self.record_id,
            image_path=f"{IMAGE_DIR}/{self.record_id}.png",
            label_path=f"{LABEL_DIR}/{self.record_id}.png",
            fg_id=self.fg_id,
            bg_id=self.bg_id,
            scale_ratio=self.scale_ratio,
            center=self.center,
            seed=self.seed,
            shift=self.shift,
        )


def scaled_dims(fg: ForegroundAsset, scale_ratio: float) -> tuple[int, int]:
    return max(1, round(fg.image.height * scale_ratio)), max(1, round(fg.image.width * scale_ratio))


def place_layer(
    fg: ForegroundAsset,
    canvas_dims: tuple[int, int],
    scale_ratio: float,
    center: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Scale ``fg`` and paste it onto an empty canvas.

    Returns ``(rgb, alpha)`` canvas arrays: float colors and alpha in [0, 1],
    zero outside the pasted object. Overflow beyond the canvas is cropped.
    """
    if scale_ratio <= 0:
        raise InvalidArgumentError(f"scale_ratio must be > 0, got {scale_ratio}")
    height, width = canvas_dims
    new_h, new_w = scaled_dims(fg, scale_ratio)
    layer = resize_float(fg.image.pixels.astype(np.float64), new_h, new_w)
    top = center[0] - new_h // 2
    left = center[1] - new_w // 2
    y0, y1 = max(top, 0), min(top + new_h, height)
    x0, x1 = max(left, 0), min(left + new_w, width)
    if y0 >= y1 or x0 >= x1:
        raise InvalidPlacementError(
            f"Foreground {fg.asset_id!r} scaled to {new_h}x{new_w} at center {center} "
            f"misses the {height}x{width} canvas"
        )
    rgb = np.zeros((height, width, 3), dtype=np.float64)
    alpha = np.zeros((height, width), dtype=np.float64)
    window = layer[y0 - top : y1 - top, x0 - left : x1 - left]
    rgb[y0:y1, x0:x1] = window[:, :, :3]
    alpha[y0:y1, x0:x1] = window[:, :, 3] / 255.0
    return rgb, alpha


def compose(
    fg: ForegroundAsset,
    bg: BackgroundAsset,
    scale_ratio: float,
    center: tuple[int, int],
) -> tuple[RgbImage, BinaryMask]:
    rgb, alpha = place_layer(fg, bg.image.dims, scale_ratio, center)
    weight = alpha[:, :, None]
    color = weight * rgb + (1.0 - weight) * bg.image.pixels.astype(np.float64)
    image = RgbImage(np.clip(np.rint(color), 0, 255).astype(np.uint8))
    label = BinaryMask((alpha >= LABEL_THRESHOLD).astype(np.uint8))
    return image, label


def fit_background(bg: BackgroundAsset, canvas_dims: tuple[int, int] | None) -> BackgroundAsset:
    if canvas_dims is None or bg.image.dims == tuple(canvas_dims):
        return bg
    return BackgroundAsset(bg.asset_id, resize_bilinear(bg.image, *canvas_dims))


def _fallback_center(fg: ForegroundAsset, scale_ratio: float, canvas_dims: tuple[int, int]) -> tuple[int, int]:
    """Center that lands the most opaque scaled pixel on the canvas middle."""
    new_h, new_w = scaled_dims(fg, scale_ratio)
    alpha = resize_float(fg.image.pixels[:, :, 3].astype(np.float64), new_h, new_w)
    peak_y, peak_x = np.unravel_index(int(np.argmax(alpha)), alpha.shape)
    top = canvas_dims[0] // 2 - int(peak_y)
    left = canvas_dims[1] // 2 - int(peak_x)
    return top + new_h // 2, left + new_w // 2


def _sample_placement(
    fg: ForegroundAsset,
    bg: BackgroundAsset,
    scale_range: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[float, tuple[int, int], RgbImage, BinaryMask]:
    scale_ratio = float(rng.uniform(scale_range[0], scale_range[1]))
    height, width = bg.image.dims
    for _ in range(PLACEMENT_ATTEMPTS):
        center = (int(rng.integers(0, height)), int(rng.integers(0, width)))
        image, label = compose(fg, bg, scale_ratio, center)
        if label.values.any():
            return scale_ratio, center, image, label
    fallback_scales = [scale_ratio]
    if scale_ratio != 1.0 and scale_range[0] <= 1.0 <= scale_range[1]:
        fallback_scales.append(1.0)
    for scale_ratio in fallback_scales:
        center = _fallback_center(fg, scale_ratio, (height, width))
        image, label = compose(fg, bg, scale_ratio, center)
        if label.values.any():
            logger.debug("Placement of %s fell back to center %s at scale %.3f", fg.asset_id, center, scale_ratio)
            return scale_ratio, center, image, label
    raise InvalidPlacementError(
        f"Foreground {fg.asset_id!r} leaves no pixel with alpha >= {LABEL_THRESHOLD} "
        f"at any scale in {tuple(scale_range)}"
    )


def _match(
    fgs: Sequence[ForegroundAsset],
    bgs: Sequence[BackgroundAsset],
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    if len(bgs) < len(fgs):
        raise InsufficientBackgroundsError(
            f"{len(fgs)} foregrounds need at least as many backgrounds, got {len(bgs)}"
        )
    rng = np.random.default_rng(seed)
    pairing = rng.permutation(len(bgs))[: len(fgs)]
    record_seeds = rng.integers(0, _SEED_BOUND, size=len(fgs))
    return pairing, record_seeds


def generate_dataset(
    fgs: Sequence[ForegroundAsset],
    bgs: Sequence[BackgroundAsset],
    scale_range: tuple[float, float],
    seed: int,
    *,
    canvas_dims: tuple[int, int] | None = None,
    split: str = "source",
    assets: dict[str, Any] | None = None,
    workers: int = 1,
) -> DatasetManifest:
    """One composite per foreground, each on a distinct background.

    Record ``i`` uses foreground ``i`` and background ``permutation[i]``;
    scale and center come from the record's own seed, so generation order
    and worker count never change the output.
    """
    if not fgs:
        raise InvalidArgumentError("generate_dataset needs at least one foreground")
    if scale_range[0] <= 0 or scale_range[0] > scale_range[1]:
        raise InvalidArgumentError(f"scale_range must satisfy 0 < lo <= hi, got {scale_range}")
    pairing, record_seeds = _match(fgs, bgs, seed)

    def build(index: int) -> SynthRecord:
        fg = fgs[index]
        bg = fit_background(bgs[int(pairing[index])], canvas_dims)
        record_seed = int(record_seeds[index])
        scale_ratio, center, image, label = _sample_placement(fg, bg, scale_range, np.random.default_rng(record_seed))
        return SynthRecord(
            record_id=f"{split}_{index:05d}",
            image=image,
            label=label,
            scale_ratio=scale_ratio,
            center=center,
            fg_id=fg.asset_id,
            bg_id=bg.asset_id,
            seed=record_seed,
        )

    records = ordered_map(build, range(len(fgs)), workers=workers)
    logger.info("Composited %d %s records (seed %d)", len(records), split, seed)
    return DatasetManifest(
        split=split,
        seed=seed,
        entries=[record.to_entry() for record in records],
        canvas_dims=(int(canvas_dims[0]), int(canvas_dims[1])) if canvas_dims else None,
        assets=assets or {},
        records=list(records),
    )


def _shift_rng(record_seed: int) -> np.random.Generator:
    return np.random.default_rng([record_seed, 1])


def apply_domain_shift(
    image: RgbImage,
    shift: DomainShiftConfig,
    rng: np.random.Generator,
) -> tuple[RgbImage, dict[str, Any]]:
    """Gamma, per-channel color scaling, box blur, then additive Gaussian noise.

    Returns the shifted image and the drawn parameters. The identity
    configuration reproduces ``image`` exactly.
    """
    gamma = float(rng.uniform(*shift.gamma_range))
    scales = rng.uniform(np.array(shift.channel_scale_low), np.array(shift.channel_scale_high))
    values = image.pixels.astype(np.float64) / 255.0
    values = np.power(values, gamma) * scales
    if shift.blur_radius > 0:
        size = 2 * shift.blur_radius + 1
        values = ndimage.uniform_filter(values, size=(size, size, 1), mode="nearest")
    if shift.noise_sigma > 0:
        values = values + rng.normal(0.0, shift.noise_sigma / 255.0, size=values.shape)
    shifted = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    params = {"gamma": gamma, "channel_scale": [float(s) for s in scales]}
    return RgbImage(shifted), params


def generate_target_domain(
    fgs: Sequence[ForegroundAsset],
    bgs: Sequence[BackgroundAsset],
    shift: DomainShiftConfig,
    seed: int,
    *,
    scale_range: tuple[float, float] = (0.5, 1.1),
    canvas_dims: tuple[int, int] | None = None,
    split: str = "target",
    assets: dict[str, Any] | None = None,
    workers: int = 1,
) -> DatasetManifest:
    """Fresh composites pushed through :func:`apply_domain_shift`; labels are flagged evaluation-only."""
    if shift.is_identity:
        logger.warning("Domain shift for %s is the identity; target images will match plain composites", split)
    plain = generate_dataset(
        fgs, bgs, scale_range, seed, canvas_dims=canvas_dims, split=split, assets=assets, workers=workers
    )

    def shifted(record: SynthRecord) -> SynthRecord:
        image, params = apply_domain_shift(record.image, shift, _shift_rng(record.seed))
        return SynthRecord(
            record_id=record.record_id,
            image=image,
            label=record.label,
            scale_ratio=record.scale_ratio,
            center=record.center,
            fg_id=record.fg_id,
            bg_id=record.bg_id,
            seed=record.seed,
            shift=params,
        )

    records = ordered_map(shifted, plain.records, workers=workers)
    plain.records = list(records)
    plain.entries = [record.to_entry() for record in records]
    plain.shift = shift.model_dump(mode="json")
    plain.evaluation_only = True
    return plain


def regenerate_records(
    manifest: DatasetManifest,
    fgs: Sequence[ForegroundAsset],
    bgs: Sequence[BackgroundAsset],
) -> list[SynthRecord]:
    """Rebuild every record from manifest metadata alone; bit-identical to the original run."""
    fg_by_id = {fg.asset_id: fg for fg in fgs}
    bg_by_id = {bg.asset_id: bg for bg in bgs}
    shift = DomainShiftConfig.model_validate(manifest.shift) if manifest.shift else None
    records = []
    for entry in manifest.entries:
        try:
            fg, bg = fg_by_id[entry.fg_id], bg_by_id[entry.bg_id]
        except KeyError as exc:
            raise InvalidArgumentError(f"Record {entry.record_id!r} references unknown asset {exc}") from exc
        image, label = compose(fg, fit_background(bg, manifest.canvas_dims), entry.scale_ratio, entry.center)
        params = None
        if shift is not None:
            image, params = apply_domain_shift(image, shift, _shift_rng(entry.seed))
        records.append(
            SynthRecord(
                record_id=entry.record_id,
                image=image,
                label=label,
                scale_ratio=entry.scale_ratio,
                center=entry.center,
                fg_id=entry.fg_id,
                bg_id=entry.bg_id,
                seed=entry.seed,
                shift=params,
            )
        )
    return records


def object_size_ratio(label: BinaryMask) -> float:
    return float(label.values.sum()) / float(label.values.size)


def center_bias_map(labels: Sequence[BinaryMask], common_dims: tuple[int, int]) -> GrayMap:
    if not labels:
        raise InvalidArgumentError("center_bias_map needs at least one mask")
    total = np.zeros(tuple(common_dims), dtype=np.float64)
    for label in labels:
        total += resize_bilinear(GrayMap.from_mask(label), *common_dims).values
    return GrayMap(np.clip(total / len(labels), 0.0, 1.0))


def size_ratio_histogram(ratios: Sequence[float], bins: int) -> list[tuple[float, float, int]]:
    """``(bin_low, bin_high, count)`` rows over [0, 1]."""
    counts, edges = np.histogram(np.asarray(ratios, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
