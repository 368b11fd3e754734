"""Raster helpers shared by the other modules: resampling, luma, PNG and
atomic file output."""

from __future__ import annotations

import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np


def _interp_axis(img, n_out, axis):
    n_in = img.shape[axis]
    if n_out == n_in:
        return img
    # pixel-centre alignment, edge clamped (same convention as OpenCV INTER_LINEAR)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (src - i0).astype(img.dtype)
    shape = [1] * img.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(img, i0, axis=axis) * (1 - w) + np.take(img, i1, axis=axis) * w


def resize_bilinear(img, shape):
    """Bilinear resize of the last two axes of ``img`` to ``shape`` (no antialiasing)."""
    img = np.asarray(img)
    h, w = shape
    if h < 1 or w < 1:
        raise ValueError(f"invalid target shape {shape}")
    out = _interp_axis(img, int(h), img.ndim - 2)
    return _interp_axis(out, int(w), img.ndim - 1)


def scaled_shape(shape, factor):
    return max(1, int(round(shape[0] * factor))), max(1, int(round(shape[1] * factor)))


def to_luma(img):
    """Rec.601 luma for H x W x 3 input; 2-D input is returned unchanged."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] >= 3:
        return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    raise ValueError(f"unsupported image shape {img.shape}")


def load_png(path):
    """Read an 8-bit PNG as float64 in [0, 1]; gray -> H x W, colour -> H x W x 3."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def to_uint8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


@contextmanager
def atomic_path(path):
    """Yield a temp path next to ``path``; rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_png(path, img):
    from PIL import Image

    arr = to_uint8(img)
    with atomic_path(path) as tmp:
        Image.fromarray(arr).save(tmp, format="PNG")


def write_text(path, text):
    with atomic_path(path) as tmp:
        Path(tmp).write_text(text)


def write_bytes(path, data):
    with atomic_path(path) as tmp:
        Path(tmp).write_bytes(data)
