"""Dataset ingestion and resolution helpers.

IDX files follow the published big-endian layout (magic 0x00000803 for
images, 0x00000801 for labels); gzipped files are detected by their two
leading bytes.  Pixel values are scaled to [0, 1] by /255 on load.
"""

from __future__ import annotations

import gzip
import os
import struct

import numpy as np

from .errors import FormatError, TruncationError
from .rng import RngStream

__all__ = [
    "load_idx",
    "save_idx_images",
    "save_idx_labels",
    "load_dataset",
    "split_dataset",
    "upsample_to_sensor",
    "sensor_to_native",
    "default_data_dir",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            return gzip.decompress(f.read())
        return f.read()


def load_idx(path) -> np.ndarray:
    """Images as [count, rows, cols] float32 in [0, 1], labels as uint8."""
    blob = _read_bytes(path)
    if len(blob) < 8:
        raise TruncationError(f"{path}: only {len(blob)} bytes")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic == IMAGES_MAGIC:
        if len(blob) < 16:
            raise TruncationError(f"{path}: missing image dimensions")
        count, rows, cols = struct.unpack(">III", blob[4:16])
        expected = 16 + count * rows * cols
        if len(blob) != expected:
            raise TruncationError(
                f"{path}: {len(blob)} bytes, expected {expected} for "
                f"{count} x {rows} x {cols} images"
            )
        pixels = np.frombuffer(blob, dtype=np.uint8, offset=16)
        return (pixels.reshape(count, rows, cols).astype(np.float32)) / 255.0
    if magic == LABELS_MAGIC:
        (count,) = struct.unpack(">I", blob[4:8])
        expected = 8 + count
        if len(blob) != expected:
            raise TruncationError(
                f"{path}: {len(blob)} bytes, expected {expected} for {count} labels"
            )
        return np.frombuffer(blob, dtype=np.uint8, offset=8).copy()
    raise FormatError(
        f"{path}: bad IDX magic 0x{magic:08x} "
        f"(expected 0x{IMAGES_MAGIC:08x} images or 0x{LABELS_MAGIC:08x} labels)"
    )


def save_idx_images(path, images: np.ndarray) -> None:
    """Write [count, rows, cols] values in [0, 1] as big-endian IDX u8."""
    images = np.asarray(images)
    count, rows, cols = images.shape
    u8 = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, count, rows, cols))
        f.write(u8.tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def default_data_dir() -> str:
    env = os.environ.get("OPTIGEN_DATA_DIR")
    if env:
        return env
    here = os.path.dirname(os.path.abspath(__file__))
    for candidate in (
        os.path.join(os.getcwd(), "data", "mnist10k"),
        os.path.abspath(os.path.join(here, "..", "..", "data", "mnist10k")),
    ):
        if os.path.isdir(candidate):
            return candidate
    return os.path.join(os.getcwd(), "data", "mnist10k")


def load_dataset(data_dir: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Load the bundled handwritten-digit images and labels."""
    data_dir = data_dir or default_data_dir()
    images = labels = None
    for name in ("train-images-idx3-ubyte.gz", "train-images-idx3-ubyte"):
        p = os.path.join(data_dir, name)
        if os.path.exists(p):
            images = load_idx(p)
            break
    for name in ("train-labels-idx1-ubyte.gz", "train-labels-idx1-ubyte"):
        p = os.path.join(data_dir, name)
        if os.path.exists(p):
            labels = load_idx(p)
            break
    if images is None or labels is None:
        raise FileNotFoundError(f"no IDX dataset found under {data_dir!r}")
    return images, labels.astype(np.int64)


def split_dataset(images, labels, test_fraction: float = 0.2, seed: int = 0):
    """Deterministic shuffled train/test split."""
    n = images.shape[0]
    order = RngStream("dataset-split", seed).permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx, train_idx = order[:n_test], order[n_test:]
    return images[train_idx], labels[train_idx], images[test_idx], labels[test_idx]


def upsample_to_sensor(images: np.ndarray, sensor_n: int) -> np.ndarray:
    """Nearest-neighbor replicate images onto the sensor grid, centered,
    zero-padded where the integer-factor upsampled image does not cover."""
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    b, h, w = images.shape
    rep = max(1, sensor_n // h)
    big = np.repeat(np.repeat(images, rep, axis=1), rep, axis=2)
    out = np.zeros((b, sensor_n, sensor_n), dtype=images.dtype)
    o = (sensor_n - h * rep) // 2
    out[:, o : o + h * rep, o : o + w * rep] = big
    return out[0] if single else out


def sensor_to_native(images: np.ndarray, native_n: int) -> np.ndarray:
    """Inverse of upsample_to_sensor: crop the centered block and average
    each replication cell back to one native pixel."""
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    b, sn, _ = images.shape
    rep = max(1, sn // native_n)
    o = (sn - native_n * rep) // 2
    block = images[:, o : o + native_n * rep, o : o + native_n * rep]
    out = block.reshape(b, native_n, rep, native_n, rep).mean(axis=(2, 4))
    return out[0] if single else out
