"""8-bit PNG encode/decode for RGB, RGBA and grayscale rasters.

Binary masks serialise as {0, 255}; soft maps round to the nearest of 256
levels (quantisation error at most 1/510).
"""

from __future__ import annotations

import io
import struct
import zlib

import numpy as np
from PIL import Image, UnidentifiedImageError

from saliency_adapt.core.errors import ImageDecodeError, InvalidArgumentError
from saliency_adapt.core.imaging import BinaryMask, GrayMap, RgbaImage, RgbImage

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

DecodedImage = RgbImage | RgbaImage | GrayMap


def quantize_gray(gray: GrayMap) -> np.ndarray:
    return np.rint(gray.values * 255.0).astype(np.uint8)


def encode_png(image: RgbImage | RgbaImage | GrayMap | BinaryMask) -> bytes:
    if isinstance(image, (RgbImage, RgbaImage)):
        pil = Image.fromarray(image.pixels)
    elif isinstance(image, BinaryMask):
        pil = Image.fromarray(image.values * np.uint8(255))
    elif isinstance(image, GrayMap):
        pil = Image.fromarray(quantize_gray(image))
    else:
        raise InvalidArgumentError(f"Cannot encode {type(image).__name__} as PNG")
    buffer = io.BytesIO()
    pil.save(buffer, format="PNG")
    return buffer.getvalue()


def _validate_chunks(data: bytes) -> None:
    """Walk the chunk table so a damaged stream fails with a byte offset."""
    if len(data) < len(PNG_SIGNATURE) or data[: len(PNG_SIGNATURE)] != PNG_SIGNATURE:
        raise ImageDecodeError("missing PNG signature", offset=0)
    offset = len(PNG_SIGNATURE)
    while True:
        if offset + 8 > len(data):
            raise ImageDecodeError("truncated chunk header", offset=offset)
        length, chunk_type = struct.unpack(">I4s", data[offset : offset + 8])
        end = offset + 8 + length + 4
        if end > len(data):
            raise ImageDecodeError(f"truncated {chunk_type!r} chunk", offset=offset)
        body = data[offset + 4 : offset + 8 + length]
        (crc,) = struct.unpack(">I", data[end - 4 : end])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise ImageDecodeError(f"CRC mismatch in {chunk_type!r} chunk", offset=offset)
        if chunk_type == b"IEND":
            return
        offset = end


def decode_png(data: bytes) -> DecodedImage:
    _validate_chunks(data)
    try:
        with Image.open(io.BytesIO(data)) as pil:
            pil.load()
            mode = pil.mode
            if mode in ("1", "L"):
                array = np.asarray(pil.convert("L"), dtype=np.uint8)
                return GrayMap(array.astype(np.float64) / 255.0)
            if mode == "RGB":
                return RgbImage(np.asarray(pil, dtype=np.uint8))
            if mode in ("RGBA", "LA", "P", "PA"):
                converted = pil.convert("RGBA")
                if mode == "P" and "transparency" not in pil.info:
                    return RgbImage(np.asarray(pil.convert("RGB"), dtype=np.uint8))
                return RgbaImage(np.asarray(converted, dtype=np.uint8))
    except (OSError, SyntaxError, ValueError, UnidentifiedImageError) as exc:
        raise ImageDecodeError(f"undecodable PNG payload: {exc}", offset=len(PNG_SIGNATURE)) from exc
    raise ImageDecodeError(f"unsupported PNG mode {mode!r} (8-bit RGB, RGBA, grayscale only)", offset=0)
