import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Tuple, Union

import numpy as np
import torch
from torch import Tensor

pylogger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

PathLike = Union[str, Path]


class IdxFormatError(ValueError):
    pass


def _fail(message: str) -> None:
    pylogger.error(message)
    raise IdxFormatError(message)


@dataclass
class ImageDataset:
    """Images as (N, 1, H, W) floats in [0, 1], labels as (N,) int64."""

    images: Tensor
    labels: Tensor

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, indices: Tensor) -> "ImageDataset":
        return ImageDataset(images=self.images[indices], labels=self.labels[indices])


def _open(path: Path) -> IO[bytes]:
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: PathLike, expected_magic: int) -> np.ndarray:
    """Parse one IDX file: big-endian 32-bit magic, one big-endian 32-bit size per dimension, unsigned bytes.

    :param path: plain or gzipped IDX file
    :param expected_magic: 0x00000803 for images, 0x00000801 for labels

    :return uint8 array with the dimensions declared in the header
    """
    path = Path(path)
    with _open(path) as f:
        raw = f.read()

    if len(raw) < 4:
        _fail(f"<{path}> is truncated: no IDX header")

    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        _fail(f"<{path}> has magic 0x{magic:08x}, expected 0x{expected_magic:08x}")

    ndim = magic & 0xFF
    header_size = 4 * (1 + ndim)
    if len(raw) < header_size:
        _fail(f"<{path}> is truncated inside the dimension header")

    shape = struct.unpack(f">{ndim}I", raw[4:header_size])
    expected_size = int(np.prod(shape))
    payload = raw[header_size:]
    if len(payload) != expected_size:
        _fail(f"<{path}> declares {expected_size} bytes of data for shape {shape}, found {len(payload)}")

    return np.frombuffer(payload, dtype=np.uint8).reshape(shape)


def load_mnist_idx(images_path: PathLike, labels_path: PathLike) -> ImageDataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)

    if images.ndim != 3:
        _fail(f"<{images_path}> must hold (N, H, W) images, got shape {images.shape}")
    if images.shape[0] != labels.shape[0]:
        _fail(f"<{images_path}> holds {images.shape[0]} images but <{labels_path}> holds {labels.shape[0]} labels")

    pixels = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    return ImageDataset(images=pixels, labels=torch.from_numpy(labels.astype(np.int64)))


def _resolve(dataset_dir: Path, name: str) -> Path:
    for candidate in (dataset_dir / name, dataset_dir / f"{name}.gz"):
        if candidate.exists():
            return candidate
    message = f"Missing MNIST file <{name}> (or <{name}.gz>) in <{dataset_dir}>"
    pylogger.error(message)
    raise FileNotFoundError(message)


def load_mnist(dataset_dir: PathLike) -> Tuple[ImageDataset, ImageDataset]:
    """
    :param dataset_dir: directory with the four standard MNIST IDX files, optionally gzipped

    :return train and test sets
    """
    dataset_dir = Path(dataset_dir)
    splits = []
    for split in ("train", "test"):
        images_name, labels_name = MNIST_FILES[split]
        dataset = load_mnist_idx(_resolve(dataset_dir, images_name), _resolve(dataset_dir, labels_name))
        pylogger.info(f"Loaded <{split}> MNIST split with {len(dataset)} images from <{dataset_dir}>")
        splits.append(dataset)
    return splits[0], splits[1]
