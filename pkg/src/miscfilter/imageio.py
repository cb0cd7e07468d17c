"""8-bit PNG input/output for ``3 x H x W`` float images in [0, 1]."""

import numpy as np
from PIL import Image

from .exceptions import InputError


def quantize(img):
    """Round to the nearest 8-bit level, keeping float64 in [0, 1]."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255) / 255


def to_uint8(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise InputError(f"expected 1 or 3 x H x W image, got {img.shape}")
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def write_png(path, img):
    arr = to_uint8(img)
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path, format="PNG")


def read_png_any(path):
    """Read any Pillow-supported image as ``3 x H x W`` float64."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_png(path):
    try:
        return read_png_any(path)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
