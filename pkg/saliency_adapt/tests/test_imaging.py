from __future__ import annotations

import numpy as np
import pytest

from saliency_adapt.core.errors import ImageDecodeError, InvalidArgumentError
from saliency_adapt.core.imaging import (
    BinaryMask,
    GrayMap,
    RgbaImage,
    RgbImage,
    dft2,
    hflip,
    idft2,
    interpolation_matrix,
    resize_bilinear,
    separable_apply,
)
from saliency_adapt.core.pngio import decode_png, encode_png


def test_resize_two_rows_to_single_pixel() -> None:
    gray = GrayMap(np.array([[0.0, 0.0], [1.0, 1.0]]))
    resized = resize_bilinear(gray, 1, 1)

    assert resized.dims == (1, 1)
    assert resized.values[0, 0] == pytest.approx(0.5)


def test_resize_same_dims_and_constant_maps() -> None:
    rng = np.random.default_rng(0)
    gray = GrayMap(rng.uniform(size=(7, 5)))
    assert np.array_equal(resize_bilinear(gray, 7, 5).values, gray.values)

    constant = GrayMap.full(9, 4, 0.37)
    assert np.all(resize_bilinear(constant, 31, 17).values == 0.37)

    image = RgbImage(rng.integers(0, 256, size=(6, 6, 3), dtype=np.uint8))
    assert np.array_equal(resize_bilinear(image, 6, 6).pixels, image.pixels)


def test_resize_stays_inside_input_range() -> None:
    rng = np.random.default_rng(1)
    values = rng.uniform(0.2, 0.7, size=(13, 11))
    for dims in [(1, 1), (5, 29), (40, 3)]:
        out = resize_bilinear(GrayMap(values), *dims).values
        assert out.shape == dims
        assert out.min() >= values.min()
        assert out.max() <= values.max()


def test_separable_apply_matches_per_channel_products() -> None:
    rng = np.random.default_rng(4)
    data = rng.normal(size=(9, 7, 5))
    rows = interpolation_matrix(9, 13)
    cols = rng.normal(size=(4, 7))

    out = separable_apply(rows, data, cols)

    assert out.shape == (13, 4, 5)
    assert out.flags["C_CONTIGUOUS"]
    for channel in range(5):
        assert np.allclose(out[:, :, channel], rows @ data[:, :, channel] @ cols.T, rtol=0, atol=1e-12)
    assert np.allclose(separable_apply(rows, data[:, :, 0], cols), out[:, :, 0], rtol=0, atol=1e-12)


def test_resize_rejects_zero_dimension() -> None:
    with pytest.raises(InvalidArgumentError):
        resize_bilinear(GrayMap.full(2, 2, 0.5), 0, 3)


def test_hflip_examples_and_involution() -> None:
    assert np.array_equal(hflip(GrayMap(np.array([[0.2, 0.9]]))).values, [[0.9, 0.2]])

    rng = np.random.default_rng(2)
    image = RgbImage(rng.integers(0, 256, size=(5, 8, 3), dtype=np.uint8))
    mask = BinaryMask(rng.integers(0, 2, size=(4, 3)))
    assert np.array_equal(hflip(hflip(image)).pixels, image.pixels)
    assert np.array_equal(hflip(hflip(mask)).values, mask.values)

    symmetric = GrayMap(np.array([[0.1, 0.5, 0.1], [0.3, 0.0, 0.3]]))
    assert np.array_equal(hflip(symmetric).values, symmetric.values)


def test_dft_of_constant_is_dc_only() -> None:
    spectrum = dft2(GrayMap.full(6, 4, 0.25)).coefficients

    assert spectrum[0, 0] == pytest.approx(0.25 * 24)
    rest = spectrum.copy()
    rest[0, 0] = 0
    assert np.abs(rest).max() < 1e-12


def test_dft_impulse_has_unit_magnitudes() -> None:
    impulse = np.zeros((8, 8))
    impulse[3, 5] = 1.0
    assert np.allclose(dft2(GrayMap(impulse)).amplitude, 1.0, atol=1e-12)


@pytest.mark.parametrize("dims", [(64, 64), (1, 1), (17, 31), (256, 8)])
def test_dft_round_trip_and_parseval(dims: tuple[int, int]) -> None:
    x = np.random.default_rng(3).uniform(size=dims)
    spectrum = dft2(GrayMap(x))

    assert np.abs(idft2(spectrum).values - x).max() <= 1e-9
    energy = np.sum(x**2) * x.size
    assert np.sum(spectrum.amplitude**2) == pytest.approx(energy, rel=1e-9)


def test_png_round_trips_are_lossless() -> None:
    rng = np.random.default_rng(4)
    rgb = RgbImage(rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8))
    rgba = RgbaImage(rng.integers(0, 256, size=(5, 6, 4), dtype=np.uint8))
    gray = GrayMap(rng.integers(0, 256, size=(4, 4)) / 255.0)

    assert np.array_equal(decode_png(encode_png(rgb)).pixels, rgb.pixels)
    assert np.array_equal(decode_png(encode_png(rgba)).pixels, rgba.pixels)
    assert np.array_equal(decode_png(encode_png(gray)).values, gray.values)


def test_png_label_mask_keeps_binary_levels() -> None:
    mask = BinaryMask(np.array([[0, 1, 1], [1, 0, 0]]))
    decoded = decode_png(encode_png(mask))

    assert isinstance(decoded, GrayMap)
    assert set(np.unique(decoded.values * 255)) == {0.0, 255.0}
    assert np.array_equal(BinaryMask.from_gray(decoded).values, mask.values)


def test_png_decode_errors_carry_offsets() -> None:
    payload = encode_png(RgbImage(np.zeros((4, 4, 3), dtype=np.uint8)))

    with pytest.raises(ImageDecodeError):
        decode_png(payload[: len(payload) // 2])

    corrupted = bytearray(payload)
    corrupted[20] ^= 0xFF
    with pytest.raises(ImageDecodeError) as excinfo:
        decode_png(bytes(corrupted))
    assert excinfo.value.offset == 8

    with pytest.raises(ImageDecodeError) as excinfo:
        decode_png(b"not a png at all")
    assert excinfo.value.offset == 0


def test_containers_validate_ranges() -> None:
    with pytest.raises(InvalidArgumentError):
        GrayMap(np.array([[1.5]]))
    with pytest.raises(InvalidArgumentError):
        BinaryMask(np.array([[2]]))
    with pytest.raises(InvalidArgumentError):
        RgbImage(np.zeros((0, 3, 3)))
