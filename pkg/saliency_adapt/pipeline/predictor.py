"""Compact fully-convolutional saliency predictor with analytic gradients.

Architecture (channels-last, 3x3 convolutions zero-padded to keep size)::

    conv1 3->16, relu
    conv2 16->16, relu
    2x average pool (floor)
    conv3 16->32, relu
    2x bilinear upsample back to the input size
    conv4 32->16, relu
    conv5 1x1 16->1, logistic

All parameters live in one flat float64 vector; ``ParamSlot`` entries give
each tensor's name, shape and offset.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from saliency_adapt.core.errors import CheckpointError, InvalidArgumentError, NumericalFailureError
from saliency_adapt.core.imaging import GrayMap, RgbImage, interpolation_matrix, resize_bilinear, separable_apply
from saliency_adapt.core.persistence import PersistentStore

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SALADPT\x00"
CHECKPOINT_VERSION = 1
MIN_INPUT_SIDE = 2


@dataclass(frozen=True, slots=True)
class LayerSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: int

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel


LAYERS: tuple[LayerSpec, ...] = (
    LayerSpec("conv1", 3, 16, 3),
    LayerSpec("conv2", 16, 16, 3),
    LayerSpec("conv3", 16, 32, 3),
    LayerSpec("conv4", 32, 16, 3),
    LayerSpec("conv5", 16, 1, 1),
)
_LAYER_BY_NAME = {layer.name: layer for layer in LAYERS}


@dataclass(frozen=True, slots=True)
class ParamSlot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def default_layout() -> tuple[ParamSlot, ...]:
    slots = []
    offset = 0
    for layer in LAYERS:
        for suffix, shape in (
            ("weight", (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)),
            ("bias", (layer.out_channels,)),
        ):
            slot = ParamSlot(f"{layer.name}.{suffix}", shape, offset)
            slots.append(slot)
            offset += slot.size
    return tuple(slots)


@dataclass(slots=True)
class PredictorParams:
    theta: np.ndarray
    layout: tuple[ParamSlot, ...] = field(default_factory=default_layout)

    def __post_init__(self) -> None:
        theta = np.asarray(self.theta, dtype=np.float64)
        expected = sum(slot.size for slot in self.layout)
        if theta.ndim != 1 or theta.size != expected:
            raise InvalidArgumentError(f"theta must be a flat vector of {expected} values, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise InvalidArgumentError("theta contains non-finite values")
        self.theta = theta

    @classmethod
    def zeros(cls) -> PredictorParams:
        layout = default_layout()
        return cls(np.zeros(sum(slot.size for slot in layout)), layout)

    @property
    def size(self) -> int:
        return int(self.theta.size)

    def slot(self, name: str) -> ParamSlot:
        for slot in self.layout:
            if slot.name == name:
                return slot
        raise KeyError(name)

    def tensor(self, name: str, vector: np.ndarray | None = None) -> np.ndarray:
        """View of parameter ``name`` inside ``vector`` (default: ``theta``)."""
        slot = self.slot(name)
        source = self.theta if vector is None else vector
        return source[slot.offset : slot.offset + slot.size].reshape(slot.shape)

    def copy(self) -> PredictorParams:
        return PredictorParams(self.theta.copy(), self.layout)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.theta, dtype="<f8").tobytes()).hexdigest()


def init_params(seed: int) -> PredictorParams:
    """Weights uniform in [-a, a] with a = sqrt(6 / fan_in); biases zero."""
    rng = np.random.default_rng(seed)
    params = PredictorParams.zeros()
    for slot in params.layout:
        layer_name, kind = slot.name.split(".")
        if kind == "weight":
            bound = np.sqrt(6.0 / _LAYER_BY_NAME[layer_name].fan_in)
            params.tensor(slot.name)[...] = rng.uniform(-bound, bound, size=slot.shape)
    return params


@lru_cache(maxsize=32)
def _pool_matrix(size: int) -> np.ndarray:
    out = size // 2
    matrix = np.zeros((out, size), dtype=np.float64)
    rows = np.arange(out)
    matrix[rows, 2 * rows] = 0.5
    matrix[rows, 2 * rows + 1] = 0.5
    matrix.setflags(write=False)
    return matrix


@lru_cache(maxsize=32)
def _upsample_matrix(small: int, size: int) -> np.ndarray:
    matrix = interpolation_matrix(small, size)
    matrix.setflags(write=False)
    return matrix


def _im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    height, width, channels = x.shape
    if kernel == 1:
        return x.reshape(height * width, channels)
    pad = kernel // 2
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    windows = sliding_window_view(padded, (kernel, kernel), axis=(0, 1))
    return windows.reshape(height * width, channels * kernel * kernel)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int], kernel: int) -> np.ndarray:
    height, width, channels = shape
    if kernel == 1:
        return dcols.reshape(height, width, channels)
    pad = kernel // 2
    grads = dcols.reshape(height, width, channels, kernel, kernel)
    padded = np.zeros((height + 2 * pad, width + 2 * pad, channels), dtype=np.float64)
    for i in range(kernel):
        for j in range(kernel):
            padded[i : i + height, j : j + width] += grads[:, :, :, i, j]
    return padded[pad : pad + height, pad : pad + width]


def _conv(params: PredictorParams, layer: LayerSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cols = _im2col(x, layer.kernel)
    weight = params.tensor(f"{layer.name}.weight").reshape(layer.out_channels, -1)
    out = cols @ weight.T + params.tensor(f"{layer.name}.bias")
    return out.reshape(x.shape[0], x.shape[1], layer.out_channels), cols


def _conv_backprop(
    params: PredictorParams,
    layer: LayerSpec,
    dout: np.ndarray,
    cols: np.ndarray,
    input_shape: tuple[int, int, int],
    grad: np.ndarray,
    *,
    need_input: bool = True,
) -> np.ndarray | None:
    flat = dout.reshape(-1, layer.out_channels)
    dweight = flat.T @ cols
    dbias = flat.sum(axis=0)
    if not (np.all(np.isfinite(dweight)) and np.all(np.isfinite(dbias))):
        raise NumericalFailureError(layer.name)
    params.tensor(f"{layer.name}.weight", grad)[...] = dweight.reshape(params.slot(f"{layer.name}.weight").shape)
    params.tensor(f"{layer.name}.bias", grad)[...] = dbias
    if not need_input:
        return None
    weight = params.tensor(f"{layer.name}.weight").reshape(layer.out_channels, -1)
    return _col2im(flat @ weight, input_shape, layer.kernel)


@dataclass(slots=True)
class ForwardTrace:
    """Intermediate activations of one forward pass, consumed by :func:`backprop`."""

    x: np.ndarray
    cols: list[np.ndarray]
    pre: list[np.ndarray]
    pooled: np.ndarray
    upsampled: np.ndarray
    act4: np.ndarray
    probs: np.ndarray


def _relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def forward_trace(params: PredictorParams, x: np.ndarray) -> ForwardTrace:
    """Forward pass on an (H, W, 3) float array scaled to [0, 1]."""
    if x.ndim != 3 or x.shape[2] != 3:
        raise InvalidArgumentError(f"Predictor input must be (H, W, 3), got {x.shape}")
    height, width = x.shape[:2]
    if height < MIN_INPUT_SIDE or width < MIN_INPUT_SIDE:
        raise InvalidArgumentError(f"Predictor input must be at least 2x2, got {height}x{width}")
    conv1, conv2, conv3, conv4, conv5 = LAYERS
    z1, c1 = _conv(params, conv1, x)
    z2, c2 = _conv(params, conv2, _relu(z1))
    pooled = separable_apply(_pool_matrix(height), _relu(z2), _pool_matrix(width))
    z3, c3 = _conv(params, conv3, pooled)
    upsampled = separable_apply(
        _upsample_matrix(height // 2, height),
        _relu(z3),
        _upsample_matrix(width // 2, width),
    )
    z4, c4 = _conv(params, conv4, upsampled)
    act4 = _relu(z4)
    z5, c5 = _conv(params, conv5, act4)
    return ForwardTrace(
        x=x,
        cols=[c1, c2, c3, c4, c5],
        pre=[z1, z2, z3, z4],
        pooled=pooled,
        upsampled=upsampled,
        act4=act4,
        probs=expit(z5[:, :, 0]),
    )


def backprop(params: PredictorParams, trace: ForwardTrace, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of a loss with respect to ``theta`` given its gradient at the output logits."""
    height, width = trace.x.shape[:2]
    if dlogits.shape != (height, width):
        raise InvalidArgumentError(f"dlogits shape {dlogits.shape} does not match output {(height, width)}")
    conv1, conv2, conv3, conv4, conv5 = LAYERS
    z1, z2, z3, z4 = trace.pre
    c1, c2, c3, c4, c5 = trace.cols
    grad = np.zeros(params.size, dtype=np.float64)

    d_act4 = _conv_backprop(params, conv5, dlogits[:, :, None], c5, trace.act4.shape, grad)
    d_up = _conv_backprop(params, conv4, d_act4 * (z4 > 0), c4, trace.upsampled.shape, grad)
    d_act3 = separable_apply(
        _upsample_matrix(height // 2, height).T,
        d_up,
        _upsample_matrix(width // 2, width).T,
    )
    d_pooled = _conv_backprop(params, conv3, d_act3 * (z3 > 0), c3, trace.pooled.shape, grad)
    d_act2 = separable_apply(_pool_matrix(height).T, d_pooled, _pool_matrix(width).T)
    d_act1 = _conv_backprop(params, conv2, d_act2 * (z2 > 0), c2, z1.shape, grad)
    _conv_backprop(params, conv1, d_act1 * (z1 > 0), c1, trace.x.shape, grad, need_input=False)
    return grad


def image_to_input(image: RgbImage) -> np.ndarray:
    return image.pixels.astype(np.float64) / 255.0


def forward(params: PredictorParams, image: RgbImage) -> GrayMap:
    return GrayMap(forward_trace(params, image_to_input(image)).probs)


class Predictor(Protocol):
    def predict(self, image: RgbImage) -> GrayMap: ...


class SaliencyPredictor:
    """Read-only predictor around a parameter snapshot."""

    def __init__(self, params: PredictorParams) -> None:
        self.params = params.copy()
        self.params.theta.setflags(write=False)

    @property
    def checksum(self) -> str:
        return self.params.checksum()

    def predict(self, image: RgbImage) -> GrayMap:
        return forward(self.params, image)

    def predict_resized(self, image: RgbImage, input_dims: tuple[int, int]) -> GrayMap:
        """Predict at ``input_dims`` and map the result back to the image's own grid."""
        resized = resize_bilinear(image, *input_dims)
        return resize_bilinear(self.predict(resized), *image.dims)


def encode_checkpoint(params: PredictorParams) -> bytes:
    header = json.dumps(
        [{"name": slot.name, "shape": list(slot.shape), "offset": slot.offset} for slot in params.layout],
        sort_keys=True,
    ).encode("utf-8")
    body = (
        CHECKPOINT_MAGIC
        + struct.pack("<II", CHECKPOINT_VERSION, len(header))
        + header
        + np.ascontiguousarray(params.theta, dtype="<f8").tobytes()
    )
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(payload: bytes) -> PredictorParams:
    prefix = len(CHECKPOINT_MAGIC)
    if len(payload) < prefix + 8 + 32 or payload[:prefix] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a saliency_adapt checkpoint (bad magic)")
    body, digest = payload[:-32], payload[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    version, header_len = struct.unpack("<II", body[prefix : prefix + 8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = prefix + 8
    try:
        header = json.loads(body[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    layout = tuple(ParamSlot(item["name"], tuple(item["shape"]), int(item["offset"])) for item in header)
    if layout != default_layout():
        raise CheckpointError("checkpoint layout does not match this predictor architecture")
    theta = np.frombuffer(body[start + header_len :], dtype="<f8").astype(np.float64)
    try:
        return PredictorParams(theta, layout)
    except InvalidArgumentError as exc:
        raise CheckpointError(str(exc)) from exc


def save_checkpoint(params: PredictorParams, path: Path) -> Path:
    path = Path(path)
    written = PersistentStore(path.parent).write_bytes(path.name, encode_checkpoint(params))
    logger.debug("Saved checkpoint %s (sha256 %s)", written, params.checksum()[:12])
    return written


def load_checkpoint(path: Path) -> PredictorParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
