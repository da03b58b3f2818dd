from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest

from saliency_adapt.core.errors import CheckpointError, InvalidArgumentError
from saliency_adapt.core.imaging import RgbImage
from saliency_adapt.pipeline.predictor import (
    LAYERS,
    PredictorParams,
    SaliencyPredictor,
    backprop,
    decode_checkpoint,
    encode_checkpoint,
    forward,
    forward_trace,
    image_to_input,
    init_params,
    load_checkpoint,
    save_checkpoint,
)


def random_image(dims: tuple[int, int], seed: int = 0) -> RgbImage:
    return RgbImage(np.random.default_rng(seed).integers(0, 256, size=dims + (3,), dtype=np.uint8))


def test_layout_covers_every_layer() -> None:
    params = PredictorParams.zeros()
    expected = sum(layer.out_channels * layer.fan_in + layer.out_channels for layer in LAYERS)

    assert params.size == expected
    assert params.tensor("conv1.weight").shape == (16, 3, 3, 3)
    assert params.tensor("conv5.bias").shape == (1,)


def test_zero_parameters_predict_one_half() -> None:
    pred = forward(PredictorParams.zeros(), random_image((10, 7)))

    assert pred.dims == (10, 7)
    assert np.all(pred.values == 0.5)


@pytest.mark.parametrize("dims", [(16, 16), (15, 13), (2, 2), (64, 64)])
def test_random_parameters_predict_inside_unit_interval(dims: tuple[int, int]) -> None:
    pred = forward(init_params(1), random_image(dims, seed=2))

    assert pred.dims == dims
    assert np.all(pred.values > 0.0)
    assert np.all(pred.values < 1.0)


def test_forward_is_deterministic() -> None:
    params = init_params(5)
    image = random_image((12, 12))
    assert np.array_equal(forward(params, image).values, forward(params.copy(), image).values)


def test_training_pass_at_canvas_size_stays_fast() -> None:
    params = init_params(0)
    x = image_to_input(random_image((64, 64), seed=3))
    dlogits = np.random.default_rng(3).normal(size=(64, 64))

    def one_pass() -> float:
        start = time.perf_counter()
        backprop(params, forward_trace(params, x), dlogits)
        return time.perf_counter() - start

    one_pass()
    # A default adaptation run makes about 31k of these passes per arm and seed.
    assert min(one_pass() for _ in range(3)) < 0.2


def test_too_small_inputs_are_rejected() -> None:
    with pytest.raises(InvalidArgumentError):
        forward(init_params(0), random_image((1, 5)))


def test_init_params_bounds_and_reproducibility() -> None:
    params = init_params(3)
    assert params.checksum() == init_params(3).checksum()
    assert params.checksum() != init_params(4).checksum()
    for layer in LAYERS:
        bound = np.sqrt(6.0 / layer.fan_in)
        assert np.abs(params.tensor(f"{layer.name}.weight")).max() <= bound
        assert np.all(params.tensor(f"{layer.name}.bias") == 0.0)


def test_predictor_snapshot_is_read_only() -> None:
    params = init_params(0)
    predictor = SaliencyPredictor(params)
    params.theta[0] += 1.0

    assert predictor.checksum != params.checksum()
    with pytest.raises(ValueError):
        predictor.params.theta[0] = 0.0


def test_predict_resized_returns_native_grid() -> None:
    predictor = SaliencyPredictor(init_params(0))
    pred = predictor.predict_resized(random_image((20, 30)), (16, 16))
    assert pred.dims == (20, 30)


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    params = init_params(7)
    path = save_checkpoint(params, tmp_path / "nested" / "model.ckpt")
    restored = load_checkpoint(path)

    assert np.array_equal(restored.theta, params.theta)
    assert restored.checksum() == params.checksum()


def test_damaged_checkpoints_are_rejected(tmp_path: Path) -> None:
    payload = bytearray(encode_checkpoint(init_params(0)))
    payload[100] ^= 0x01
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(payload))

    with pytest.raises(CheckpointError):
        decode_checkpoint(b"PNG" + bytes(64))

    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")
