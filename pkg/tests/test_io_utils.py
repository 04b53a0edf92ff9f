import gzip
import struct

import numpy as np
import pytest
import torch

from tests.conftest import FAKE_MNIST_SIZE, FAKE_MNIST_TEST, FAKE_MNIST_TRAIN, write_idx

from contnorm.data.io_utils import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    IdxFormatError,
    load_mnist,
    load_mnist_idx,
    read_idx,
)


@pytest.fixture
def tiny_images():
    return np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)


def test_read_idx(tmp_path, tiny_images):
    path = write_idx(tmp_path / "images", IDX_IMAGES_MAGIC, tiny_images)

    parsed = read_idx(path, IDX_IMAGES_MAGIC)
    assert parsed.shape == (2, 3, 4)
    assert parsed.dtype == np.uint8
    assert np.array_equal(parsed, tiny_images)


def test_read_gzipped_idx(tmp_path, tiny_images):
    plain = write_idx(tmp_path / "images", IDX_IMAGES_MAGIC, tiny_images)
    zipped = tmp_path / "images.gz"
    zipped.write_bytes(gzip.compress(plain.read_bytes()))

    assert np.array_equal(read_idx(zipped, IDX_IMAGES_MAGIC), tiny_images)


def test_wrong_magic(tmp_path, tiny_images):
    path = write_idx(tmp_path / "images", IDX_IMAGES_MAGIC, tiny_images)
    with pytest.raises(IdxFormatError, match="magic"):
        read_idx(path, IDX_LABELS_MAGIC)


def test_little_endian_header_is_rejected(tmp_path, tiny_images):
    path = tmp_path / "images"
    path.write_bytes(struct.pack("<I", IDX_IMAGES_MAGIC) + struct.pack("<3I", 2, 3, 4) + tiny_images.tobytes())
    with pytest.raises(IdxFormatError):
        read_idx(path, IDX_IMAGES_MAGIC)


@pytest.mark.parametrize("cut", [2, 10, 30])
def test_truncated_file(tmp_path, tiny_images, cut):
    path = write_idx(tmp_path / "images", IDX_IMAGES_MAGIC, tiny_images)
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(IdxFormatError, match="truncated|declares"):
        read_idx(path, IDX_IMAGES_MAGIC)


def test_trailing_bytes(tmp_path, tiny_images):
    path = write_idx(tmp_path / "images", IDX_IMAGES_MAGIC, tiny_images)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(IdxFormatError):
        read_idx(path, IDX_IMAGES_MAGIC)


def test_image_label_count_mismatch(tmp_path, tiny_images):
    images = write_idx(tmp_path / "images", IDX_IMAGES_MAGIC, tiny_images)
    labels = write_idx(tmp_path / "labels", IDX_LABELS_MAGIC, np.array([1, 2, 3]))
    with pytest.raises(IdxFormatError, match="labels"):
        load_mnist_idx(images, labels)


def test_pixels_are_scaled_to_unit_interval(tmp_path):
    pixels = np.array([[[0, 255], [51, 102]]], dtype=np.uint8)
    images = write_idx(tmp_path / "images", IDX_IMAGES_MAGIC, pixels)
    labels = write_idx(tmp_path / "labels", IDX_LABELS_MAGIC, np.array([7]))

    dataset = load_mnist_idx(images, labels)
    assert dataset.images.shape == (1, 1, 2, 2)
    assert torch.allclose(dataset.images[0, 0], torch.tensor([[0.0, 1.0], [0.2, 0.4]]))
    assert dataset.labels.dtype == torch.int64
    assert dataset.labels.tolist() == [7]


def test_load_mnist(mnist_dir):
    train, test = load_mnist(mnist_dir)

    assert train.images.shape == (FAKE_MNIST_TRAIN, 1, FAKE_MNIST_SIZE, FAKE_MNIST_SIZE)
    assert len(test) == FAKE_MNIST_TEST
    assert set(train.labels.tolist()) == set(range(10))
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0


def test_load_mnist_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)
