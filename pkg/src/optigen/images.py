"""Binary PGM/PPM image export and grid panel assembly.

Grayscale goes out as 8-bit P5, three-channel as 8-bit P6, both row-major
with maxval 255.  Out-of-range inputs are clamped; the clamp count is
returned and logged as a warning.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import FormatError

__all__ = ["save_pgm", "save_ppm", "load_pgm", "tile_grid"]

log = logging.getLogger(__name__)


def _to_u8(values: np.ndarray) -> tuple[np.ndarray, int]:
    values = np.asarray(values, dtype=np.float64)
    clipped = np.clip(values, 0.0, 1.0)
    n_clamped = int(np.count_nonzero(clipped != values))
    if n_clamped:
        log.warning("clamped %d out-of-range pixel values on export", n_clamped)
    return np.rint(clipped * 255.0).astype(np.uint8), n_clamped


def save_pgm(path, image: np.ndarray) -> int:
    """Write a [h, w] image in [0, 1]; returns the clamped-pixel count."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"save_pgm expects a 2-D image, got {image.shape}")
    u8, clamped = _to_u8(image)
    h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())
    return clamped


def save_ppm(path, image: np.ndarray) -> int:
    """Write a [h, w, 3] or [3, h, w] color image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"save_ppm expects a 3-D image, got {image.shape}")
    if image.shape[0] == 3 and image.shape[2] != 3:
        image = np.moveaxis(image, 0, 2)
    if image.shape[2] != 3:
        raise ValueError(f"expected 3 channels, got shape {image.shape}")
    u8, clamped = _to_u8(image)
    h, w, _ = u8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())
    return clamped


def load_pgm(path) -> np.ndarray:
    """Read a binary P5 file back to [0, 1] floats (round-trip testing)."""
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (header {parts[0]!r})")
    w, h = (int(x) for x in parts[1].split())
    maxval = int(parts[2])
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=h * w)
    return pixels.reshape(h, w).astype(np.float64) / maxval


def tile_grid(images: np.ndarray, cols: int, gutter: int = 2,
              gutter_value: float = 1.0) -> np.ndarray:
    """Assemble [n, h, w] images into a grid with white gutters."""
    images = np.asarray(images)
    n, h, w = images.shape
    rows = -(-n // cols)
    canvas = np.full(
        (rows * h + (rows - 1) * gutter, cols * w + (cols - 1) * gutter),
        gutter_value, dtype=np.float64,
    )
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = r * (h + gutter), c * (w + gutter)
        canvas[y : y + h, x : x + w] = images[i]
    return canvas
