"""Reversible augmentations for consistency-based uncertainty estimation.

Every augmentation has an inverse that maps a prediction made on the
augmented image back onto the pixel grid of the original image.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np

from saliency_adapt.core.config_manager import AugmentConfig
from saliency_adapt.core.errors import InvalidArgumentError, InvalidConfigError, MissingStyleError
from saliency_adapt.core.imaging import GrayMap, RgbImage, Spectrum, dft2, hflip, idft2, resize_bilinear

logger = logging.getLogger(__name__)


class AugmentationKind(str, Enum):
    IDENTITY = "identity"
    FLIP = "flip"
    SCALE = "scale"
    FDA = "fda"


@dataclass(frozen=True, slots=True)
class AugmentationSpec:
    kind: AugmentationKind
    target_dims: tuple[int, int] | None = None
    beta: float | None = None
    style_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind is AugmentationKind.SCALE:
            if self.target_dims is None or min(self.target_dims) < 1:
                raise InvalidArgumentError(f"Scale needs target dims >= 1, got {self.target_dims}")
        if self.kind is AugmentationKind.FDA:
            if self.beta is None or not 0.0 <= self.beta <= 1.0:
                raise InvalidArgumentError(f"Fda beta must lie in [0, 1], got {self.beta}")
            if not self.style_id:
                raise InvalidArgumentError("Fda needs a style_id")

    @classmethod
    def identity(cls) -> AugmentationSpec:
        return cls(AugmentationKind.IDENTITY)

    @classmethod
    def flip(cls) -> AugmentationSpec:
        return cls(AugmentationKind.FLIP)

    @classmethod
    def scale(cls, height: int, width: int) -> AugmentationSpec:
        return cls(AugmentationKind.SCALE, target_dims=(height, width))

    @classmethod
    def fda(cls, beta: float, style_id: str) -> AugmentationSpec:
        return cls(AugmentationKind.FDA, beta=beta, style_id=style_id)

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"kind": self.kind.value}
        if self.target_dims is not None:
            payload["target_dims"] = list(self.target_dims)
        if self.beta is not None:
            payload["beta"] = self.beta
        if self.style_id is not None:
            payload["style_id"] = self.style_id
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> AugmentationSpec:
        dims = payload.get("target_dims")
        return cls(
            AugmentationKind(payload["kind"]),
            target_dims=(int(dims[0]), int(dims[1])) if dims else None,
            beta=payload.get("beta"),
            style_id=payload.get("style_id"),
        )


def apply(spec: AugmentationSpec, image: RgbImage, style_pool: Mapping[str, RgbImage]) -> RgbImage:
    if spec.kind is AugmentationKind.IDENTITY:
        return RgbImage(image.pixels.copy())
    if spec.kind is AugmentationKind.FLIP:
        return hflip(image)
    if spec.kind is AugmentationKind.SCALE:
        return resize_bilinear(image, *spec.target_dims)
    if spec.style_id not in style_pool:
        raise MissingStyleError(spec.style_id)
    return fda_swap(image, style_pool[spec.style_id], spec.beta)


def invert(spec: AugmentationSpec, pred: GrayMap, original_dims: tuple[int, int]) -> GrayMap:
    """Map ``pred`` from the augmented frame back to ``original_dims``."""
    original_dims = (int(original_dims[0]), int(original_dims[1]))
    if spec.kind is AugmentationKind.SCALE:
        if pred.dims != spec.target_dims:
            raise InvalidArgumentError(f"Scale prediction is {pred.dims}, expected {spec.target_dims}")
        return resize_bilinear(pred, *original_dims)
    if pred.dims != original_dims:
        raise InvalidArgumentError(f"{spec.kind.value} prediction is {pred.dims}, expected {original_dims}")
    if spec.kind is AugmentationKind.FLIP:
        return hflip(pred)
    # Identity and Fda leave geometry untouched.
    return GrayMap(pred.values.copy())


def _band(size: int, beta: float) -> slice:
    extent = max(1, int(np.floor(beta * size)))
    start = size // 2 - extent // 2
    return slice(start, start + extent)


def fda_spectrum(src: GrayMap, style: GrayMap, beta: float) -> Spectrum:
    """Spectrum of ``src`` with its centered low-frequency amplitude taken from ``style``."""
    if src.dims != style.dims:
        raise InvalidArgumentError(f"fda_spectrum needs equal dims, got {src.dims} and {style.dims}")
    src_spec = dft2(src)
    amplitude = np.fft.fftshift(src_spec.amplitude)
    style_amplitude = np.fft.fftshift(dft2(style).amplitude)
    rows, cols = _band(src.height, beta), _band(src.width, beta)
    amplitude[rows, cols] = style_amplitude[rows, cols]
    return Spectrum(np.fft.ifftshift(amplitude) * np.exp(1j * src_spec.phase))


def fda_swap(src: RgbImage, style: RgbImage, beta: float) -> RgbImage:
    if not 0.0 <= beta <= 1.0:
        raise InvalidArgumentError(f"beta must lie in [0, 1], got {beta}")
    if style.dims != src.dims:
        style = resize_bilinear(style, *src.dims)
    channels = []
    for channel in range(3):
        src_channel = GrayMap(src.pixels[:, :, channel] / 255.0)
        style_channel = GrayMap(style.pixels[:, :, channel] / 255.0)
        channels.append(idft2(fda_spectrum(src_channel, style_channel, beta)).values)
    swapped = np.stack(channels, axis=2) * 255.0
    return RgbImage(np.clip(np.rint(swapped), 0, 255).astype(np.uint8))


def build_augmentation_set(
    config: AugmentConfig,
    target_ids: Sequence[str],
    seed: int,
) -> dict[str, list[AugmentationSpec]]:
    """Per target image: Identity first, then the enabled perturbations.

    Each Fda draw pairs the image with a uniformly drawn other target image;
    a lone target image swaps style with itself.
    """
    base = [AugmentationSpec.identity()]
    if config.flip:
        base.append(AugmentationSpec.flip())
    if config.scale:
        base.append(AugmentationSpec.scale(*config.scale_dims))
    if len(base) + (config.fda_draws if config.fda else 0) < 2:
        raise InvalidConfigError("train.augment", "enable at least one of flip, scale, fda")
    rng = np.random.default_rng(seed)
    ids = list(target_ids)
    specs: dict[str, list[AugmentationSpec]] = {}
    for index, target_id in enumerate(ids):
        chosen = list(base)
        if config.fda:
            others = ids[:index] + ids[index + 1 :]
            for _ in range(config.fda_draws):
                partner = others[int(rng.integers(0, len(others)))] if others else target_id
                chosen.append(AugmentationSpec.fda(config.fda_beta, partner))
        specs[target_id] = chosen
    logger.debug("Built augmentation sets of size %d for %d targets", len(base) + config.fda * config.fda_draws, len(ids))
    return specs
