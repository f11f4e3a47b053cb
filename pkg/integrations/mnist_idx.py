"""
Reader for the MNIST IDX format (big-endian headers, unsigned byte payload).
"""
import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from logic.data_plane import Dataset
from logic.errors import IdxFormatError

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803  # 2051
LABELS_MAGIC = 0x00000801  # 2049

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _header(data: bytes, words: int, path) -> list:
    if len(data) < 4 * words:
        raise IdxFormatError(f"{path}: truncated header")
    return [int(v) for v in np.frombuffer(data[:4 * words], dtype=">u4")]


def read_idx_images(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, count, rows, cols = _header(data, 4, path)
    if magic != IMAGES_MAGIC:
        raise IdxFormatError(f"{path}: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")
    expected = 16 + count * rows * cols
    if len(data) < expected:
        raise IdxFormatError(f"{path}: truncated, {len(data)} bytes for {count} images of {rows}x{cols}")
    if count == 0:
        return np.zeros((0, rows, cols), dtype=np.uint8)
    pixels = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, count = _header(data, 2, path)
    if magic != LABELS_MAGIC:
        raise IdxFormatError(f"{path}: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")
    if len(data) < 8 + count:
        raise IdxFormatError(f"{path}: truncated, {len(data)} bytes for {count} labels")
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    logger.info("loaded %d samples of %dx%d from %s", *images.shape, images_path)
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def load_mnist(directory: Union[str, Path]) -> Tuple[Dataset, Dataset]:
    """(train, test) from a directory holding the four standard IDX files."""
    directory = Path(directory)
    train = load_idx(directory / TRAIN_FILES[0], directory / TRAIN_FILES[1])
    test = load_idx(directory / TEST_FILES[0], directory / TEST_FILES[1])
    return train, test


def write_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
              images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, rows, cols) and labels (N,) in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(
        np.array([IMAGES_MAGIC, count, rows, cols], dtype=">u4").tobytes() + images.tobytes())
    Path(labels_path).write_bytes(np.array([LABELS_MAGIC, len(labels)], dtype=">u4").tobytes() + labels.tobytes())
