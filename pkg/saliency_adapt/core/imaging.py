"""Raster containers and the pixel primitives shared by every pipeline stage.

All containers are immutable value objects wrapping a numpy array:

- ``RgbImage``  (H, W, 3) uint8
- ``RgbaImage`` (H, W, 4) uint8
- ``GrayMap``   (H, W) float64 in [0, 1]
- ``BinaryMask`` (H, W) uint8 in {0, 1}
- ``Spectrum``  (H, W) complex128

Bilinear sampling uses half-pixel-centre alignment: output pixel ``(i, j)``
samples source coordinate ``((i + 0.5) * H / new_h - 0.5, (j + 0.5) * W / new_w - 0.5)``
with indices clamped to the borders.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TypeVar

import numpy as np

from saliency_adapt.core.errors import InvalidArgumentError


def _check_dims(shape: tuple[int, ...], kind: str) -> None:
    if shape[0] < 1 or shape[1] < 1:
        raise InvalidArgumentError(f"{kind} needs at least 1x1 pixels, got {shape[0]}x{shape[1]}")


def _as_uint8(array: np.ndarray, kind: str) -> np.ndarray:
    if array.dtype == np.uint8:
        return array
    values = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 255.0:
        raise InvalidArgumentError(f"{kind} intensities must be finite and within [0, 255]")
    return np.rint(values).astype(np.uint8)


@dataclass(frozen=True, slots=True)
class RgbImage:
    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise InvalidArgumentError(f"RgbImage expects an (H, W, 3) array, got shape {pixels.shape}")
        _check_dims(pixels.shape, "RgbImage")
        object.__setattr__(self, "pixels", _as_uint8(pixels, "RgbImage"))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def dims(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True, slots=True)
class RgbaImage:
    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 4:
            raise InvalidArgumentError(f"RgbaImage expects an (H, W, 4) array, got shape {pixels.shape}")
        _check_dims(pixels.shape, "RgbaImage")
        object.__setattr__(self, "pixels", _as_uint8(pixels, "RgbaImage"))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def dims(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def alpha(self) -> np.ndarray:
        """Alpha channel as reals in [0, 1]."""
        return self.pixels[:, :, 3].astype(np.float64) / 255.0


@dataclass(frozen=True, slots=True)
class GrayMap:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidArgumentError(f"GrayMap expects an (H, W) array, got shape {values.shape}")
        _check_dims(values.shape, "GrayMap")
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("GrayMap values must be finite")
        if values.min() < 0.0 or values.max() > 1.0:
            raise InvalidArgumentError(
                f"GrayMap values must lie in [0, 1], got [{values.min():.6g}, {values.max():.6g}]"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def full(cls, height: int, width: int, value: float) -> GrayMap:
        return cls(np.full((height, width), value, dtype=np.float64))

    @classmethod
    def from_mask(cls, mask: BinaryMask) -> GrayMap:
        return cls(mask.values.astype(np.float64))

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def dims(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True, slots=True)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise InvalidArgumentError(f"BinaryMask expects an (H, W) array, got shape {values.shape}")
        _check_dims(values.shape, "BinaryMask")
        if not np.all((values == 0) | (values == 1)):
            raise InvalidArgumentError("BinaryMask values must be exactly 0 or 1")
        object.__setattr__(self, "values", values.astype(np.uint8))

    @classmethod
    def from_gray(cls, gray: GrayMap, threshold: float = 0.5) -> BinaryMask:
        return cls((gray.values >= threshold).astype(np.uint8))

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def dims(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True, slots=True)
class Spectrum:
    coefficients: np.ndarray

    def __post_init__(self) -> None:
        coefficients = np.asarray(self.coefficients, dtype=np.complex128)
        if coefficients.ndim != 2:
            raise InvalidArgumentError(f"Spectrum expects an (H, W) array, got shape {coefficients.shape}")
        _check_dims(coefficients.shape, "Spectrum")
        if not np.all(np.isfinite(coefficients)):
            raise InvalidArgumentError("Spectrum coefficients must be finite")
        object.__setattr__(self, "coefficients", coefficients)

    @property
    def height(self) -> int:
        return int(self.coefficients.shape[0])

    @property
    def width(self) -> int:
        return int(self.coefficients.shape[1])

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.coefficients)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.coefficients)


Raster = TypeVar("Raster", RgbImage, RgbaImage, GrayMap, BinaryMask)
Resizable = TypeVar("Resizable", RgbImage, RgbaImage, GrayMap)


def interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Return the (out_size, in_size) bilinear sampling operator along one axis.

    Every row is a convex combination of at most two source samples, so
    ``matrix @ signal`` never leaves the signal's range.
    """
    if in_size < 1 or out_size < 1:
        raise InvalidArgumentError(f"Axis sizes must be >= 1, got {in_size} -> {out_size}")
    coords = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    lower = np.floor(coords).astype(np.int64)
    frac = coords - lower
    rows = np.arange(out_size)
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    np.add.at(matrix, (rows, np.clip(lower, 0, in_size - 1)), 1.0 - frac)
    np.add.at(matrix, (rows, np.clip(lower + 1, 0, in_size - 1)), frac)
    return matrix


def separable_apply(rows: np.ndarray, data: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Return ``rows @ data @ cols.T`` applied per channel of an (H, W) or (H, W, C) array.

    Two BLAS products, one per axis; the result is C-contiguous.
    """
    if data.ndim == 2:
        return rows @ data @ cols.T
    along_rows = np.tensordot(rows, data, axes=(1, 0))
    return np.ascontiguousarray(np.tensordot(along_rows, cols, axes=(1, 1)).transpose(0, 2, 1))


def _resample(array: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    rows = interpolation_matrix(array.shape[0], new_h)
    cols = interpolation_matrix(array.shape[1], new_w)
    data = array.astype(np.float64)
    out = separable_apply(rows, data, cols)
    # Convex combination: pin float round-off to the input's range.
    return np.clip(out, data.min(), data.max())


def resize_bilinear(image: Resizable, new_h: int, new_w: int) -> Resizable:
    if new_h < 1 or new_w < 1:
        raise InvalidArgumentError(f"Target dimensions must be >= 1, got {new_h}x{new_w}")
    if isinstance(image, GrayMap):
        if image.dims == (new_h, new_w):
            return GrayMap(image.values.copy())
        return GrayMap(_resample(image.values, new_h, new_w))
    if isinstance(image, (RgbImage, RgbaImage)):
        if image.dims == (new_h, new_w):
            return type(image)(image.pixels.copy())
        return type(image)(np.rint(_resample(image.pixels, new_h, new_w)).astype(np.uint8))
    raise InvalidArgumentError(f"resize_bilinear does not support {type(image).__name__}")


def resize_float(array: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resize of a raw (H, W) or (H, W, C) float array without quantisation."""
    if new_h < 1 or new_w < 1:
        raise InvalidArgumentError(f"Target dimensions must be >= 1, got {new_h}x{new_w}")
    if array.shape[:2] == (new_h, new_w):
        return array.astype(np.float64, copy=True)
    return _resample(array, new_h, new_w)


def hflip(image: Raster) -> Raster:
    if isinstance(image, (GrayMap, BinaryMask)):
        return type(image)(image.values[:, ::-1].copy())
    if isinstance(image, (RgbImage, RgbaImage)):
        return type(image)(image.pixels[:, ::-1].copy())
    raise InvalidArgumentError(f"hflip does not support {type(image).__name__}")


def dft2(channel: GrayMap) -> Spectrum:
    """Unnormalised forward 2D DFT."""
    return Spectrum(np.fft.fft2(channel.values))


def idft2(spectrum: Spectrum) -> GrayMap:
    """Inverse 2D DFT (1/HW normalised); the real part is clamped to [0, 1]."""
    return GrayMap(np.clip(np.fft.ifft2(spectrum.coefficients).real, 0.0, 1.0))
