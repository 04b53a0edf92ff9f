import shutil
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import pytest
import torch
from hydra import compose, initialize
from omegaconf import DictConfig, OmegaConf
from pytest import FixtureRequest, TempPathFactory

from contnorm.config import ExperimentConfig  # noqa registers the schema
from contnorm.data.io_utils import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, MNIST_FILES
from contnorm.modules.norms.base import NormLayerSpec
from contnorm.modules.norms.factory import build_norm
from contnorm.runner import run_experiment

torch.manual_seed(42)

FAKE_MNIST_SIZE = 6
FAKE_MNIST_TRAIN = 200
FAKE_MNIST_TEST = 60


#
# Fake MNIST
#
def write_idx(path: Path, magic: int, array: np.ndarray) -> Path:
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    path.write_bytes(header + array.astype(np.uint8).tobytes())
    return path


def fake_mnist_split(n: int, rng: np.random.Generator) -> Sequence[np.ndarray]:
    """Class c lights up row c mod 6 of a 6x6 canvas, plus uniform noise; every label 0..9 appears."""
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = rng.integers(0, 60, size=(n, FAKE_MNIST_SIZE, FAKE_MNIST_SIZE))
    images[np.arange(n), labels % FAKE_MNIST_SIZE, :] = 255
    images[np.arange(n), :, labels // FAKE_MNIST_SIZE] = 200
    return images, labels


@pytest.fixture(scope="package")
def mnist_dir(tmp_path_factory: TempPathFactory) -> Path:
    directory = tmp_path_factory.mktemp("fake_mnist")
    rng = np.random.default_rng(0)

    for split, size in (("train", FAKE_MNIST_TRAIN), ("test", FAKE_MNIST_TEST)):
        images_name, labels_name = MNIST_FILES[split]
        images, labels = fake_mnist_split(size, rng)
        write_idx(directory / images_name, IDX_IMAGES_MAGIC, images)
        write_idx(directory / labels_name, IDX_LABELS_MAGIC, labels)

    yield directory
    shutil.rmtree(directory)


#
# Base configurations
#
def compose_config(config_name: str, overrides: Sequence[str] = ()) -> DictConfig:
    with initialize(config_path="../conf"):
        return compose(config_name=config_name, overrides=list(overrides))


@pytest.fixture(scope="package")
def cfg(tmp_path_factory: TempPathFactory, mnist_dir: Path) -> DictConfig:
    test_cfg_tmpdir = tmp_path_factory.mktemp("test_train_tmpdir")

    cfg = compose_config(
        "default",
        overrides=[
            # Force the storage dir to be in the temp folder
            f"core.storage_dir={test_cfg_tmpdir}",
            f"nn.data.dataset_dir={mnist_dir}",
        ],
    )
    yield cfg

    shutil.rmtree(test_cfg_tmpdir)


@pytest.fixture(scope="package")
def cfg_simple_train(cfg: DictConfig) -> DictConfig:
    cfg = OmegaConf.create(cfg)

    # Add test tag
    cfg.core.tags = ["testing"]

    # Minimize the amount of work in test training
    cfg.nn.data.n_tasks = 3
    cfg.nn.data.train_per_task = 40
    cfg.nn.data.test_per_task = 20
    cfg.nn.model.hidden_dim = 16
    cfg.train.seeds = [0, 1]
    cfg.train.eval_batch_size = 64

    return cfg


@pytest.fixture(scope="package")
def cfg_replay(cfg_simple_train: DictConfig) -> DictConfig:
    cfg = OmegaConf.create(cfg_simple_train)

    # Replay with every diagnostic switched on
    cfg.train.strategy.kind = "er"
    cfg.train.bn_star = True
    cfg.train.drift_tracking = True
    cfg.train.plot_drift = True
    cfg.train.checkpoint = True
    return cfg


#
# Training configurations aggregations
#
@pytest.fixture(
    scope="package",
    params=[
        "cfg_simple_train",
        "cfg_replay",
    ],
)
def cfg_all(request: FixtureRequest):
    return request.getfixturevalue(request.param)


#
# Training fixtures
#
@pytest.fixture(
    scope="package",
)
def run_trainings(cfg_all: DictConfig) -> Path:
    yield run_experiment(cfg=cfg_all)


def with_overrides(cfg: DictConfig, *overrides: str) -> DictConfig:
    """Copy of cfg with dotted overrides applied, e.g. `train.strategy.kind=er`."""
    cfg = OmegaConf.merge(cfg, OmegaConf.from_dotlist(list(overrides)))
    OmegaConf.set_struct(cfg, True)
    return cfg


#
# Layers
#
def make_norm(kind: str, channels: int = 4, dtype: torch.dtype = torch.float64, **fields):
    return build_norm(NormLayerSpec(kind=kind, channels=channels, **fields), dtype=dtype)


@pytest.fixture
def generator() -> torch.Generator:
    return torch.Generator().manual_seed(0)


def feature_map(shape, generator: torch.Generator, scale: float = 1.0, shift: float = 0.0) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=torch.float64) * scale + shift
