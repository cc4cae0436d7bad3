"""Datasets: a Gaussian-cluster generator and a reader for IDX image/label files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Dataset, make_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXParseError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path, self.offset = str(path), offset


def generate_synthetic(
    num_classes: int,
    input_dim: int,
    samples_per_class: int,
    margin: float,
    seed: int,
    noise: float = 1.0,
) -> Dataset:
    """Unit-variance Gaussian clusters whose means sit at distance ``margin`` from the origin.

    Class means point along random orthonormal directions (or random unit
    directions when ``num_classes > input_dim``).  Rows are shuffled.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    rng = make_rng(seed)
    if num_classes <= input_dim:
        q, _ = np.linalg.qr(rng.standard_normal((input_dim, num_classes)))
        directions = q.T
    else:
        directions = rng.standard_normal((num_classes, input_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = margin * directions
    y = np.repeat(np.arange(num_classes), samples_per_class)
    x = means[y] + noise * rng.standard_normal((y.size, input_dim))
    order = rng.permutation(y.size)
    return Dataset(x[order], y[order])


def train_eval_split(data: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 <= eval_fraction < 1:
        raise ValueError("eval_fraction must lie in [0, 1)")
    order = make_rng(seed, 1).permutation(len(data))
    cut = len(data) - int(round(eval_fraction * len(data)))
    return data.subset(order[:cut]), data.subset(order[cut:])


def _read_header(path, raw: bytes, magic: int, ndims: int):
    if len(raw) < 4:
        raise IDXParseError(path, len(raw), "file too short for the magic number")
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise IDXParseError(path, 0, f"bad magic 0x{found:08x}, expected 0x{magic:08x}")
    end = 4 + 4 * ndims
    if len(raw) < end:
        raise IDXParseError(path, len(raw), f"header truncated, need {end} bytes")
    return struct.unpack_from(f">{ndims}I", raw, 4), end


def _read_body(path, raw: bytes, start: int, count: int) -> np.ndarray:
    if len(raw) < start + count:
        raise IDXParseError(path, len(raw), f"payload truncated, expected {count} bytes after offset {start}")
    if len(raw) > start + count:
        raise IDXParseError(path, start + count, f"{len(raw) - start - count} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=start)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an unsigned-byte IDX image file and its label file.

    Images become flattened rows scaled to ``[0, 1]``.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_raw = images_path.read_bytes()
    lab_raw = labels_path.read_bytes()
    (n_img, rows, cols), img_start = _read_header(images_path, img_raw, IMAGES_MAGIC, 3)
    (n_lab,), lab_start = _read_header(labels_path, lab_raw, LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise IDXParseError(labels_path, 4, f"label count {n_lab} does not match image count {n_img}")
    pixels = _read_body(images_path, img_raw, img_start, n_img * rows * cols)
    labels = _read_body(labels_path, lab_raw, lab_start, n_lab)
    x = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64))


def write_idx(images_path, labels_path, images, labels) -> None:
    """Write ``uint8`` images ``(n, rows, cols)`` and labels ``(n,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", LABELS_MAGIC, labels.size) + labels.tobytes())
