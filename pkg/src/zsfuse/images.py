"""Image decoding, the fixed-size resize contract, and PNG re-encoding."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageDecodeError

IMAGE_SIZE = 224
RESIZE_POLICY = "bilinear-224x224-no-aspect"


def decode(data: bytes) -> np.ndarray:
    """Decode encoded raster bytes to an ``(H, W, 3)`` uint8 RGB array."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image: {exc}") from exc


def to_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def resize(pixels: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    if pixels.shape[0] == size and pixels.shape[1] == size:
        return pixels
    img = Image.fromarray(pixels).resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(img, dtype=np.uint8).copy()


def preprocess(data: bytes, size: int = IMAGE_SIZE) -> tuple[np.ndarray, bytes]:
    """Decode, resize to ``size`` x ``size`` (no aspect preservation), re-encode as PNG.

    Returns the resized pixels and the PNG bytes sent to the backends.
    """
    pixels = resize(decode(data), size)
    return pixels, to_png(pixels)


def read_image(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ImageDecodeError(f"cannot read image {path}: {exc}") from exc
