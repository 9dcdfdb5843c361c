"""
Pytest configuration and shared fixtures for masklet tests.

Networks and task streams here are deliberately tiny (a handful of inputs,
two binary tasks) so that full training runs finish in well under a second.
"""

from collections.abc import Generator
import gzip
import logging
from pathlib import Path
from unittest.mock import patch

import numpy as np
import numpy.typing as npt
import pytest
from rich.console import Console
from typer.testing import CliRunner

from masklet.config import TrainConfig
from masklet.datasets import IMAGE_MAGIC
from masklet.datasets import LABEL_MAGIC
from masklet.datasets import MnistSplits
from masklet.datasets import Split
from masklet.datasets import TaskDataset
from masklet.datasets import pad_and_flatten
from masklet.exceptions import CheckpointCorruptionError
from masklet.exceptions import CheckpointVersionError
from masklet.exceptions import ConfigError
from masklet.exceptions import ContractError
from masklet.exceptions import DataFormatError
from masklet.exceptions import DatasetNotFoundError
from masklet.exceptions import DegenerateCovarianceError
from masklet.exceptions import DivergenceError
from masklet.exceptions import MaskletError
from masklet.exceptions import NormalizationError
from masklet.exceptions import ShapeError
from masklet.trainer import TrainedState
from masklet.trainer import train_sequence


INPUT_DIM = 6


# ==============================================================================
# Helpers
# ==============================================================================


def blobs(
    rng: np.random.Generator, task: int, count: int, dim: int = INPUT_DIM
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.int64]]:
    """Two well separated classes per task: a bump on one coordinate each."""
    labels = np.arange(count, dtype=np.int64) % 2
    x = rng.normal(0.0, 0.3, size=(count, dim))
    x[np.arange(count), (2 * task + labels) % dim] += 3.0
    return x, labels


def make_task(task: int, rng: np.random.Generator, dim: int = INPUT_DIM) -> TaskDataset:
    """Binary task with 40 train, 8 validation and 20 test samples."""
    return TaskDataset(
        task_id=task,
        train=Split.from_arrays(*blobs(rng, task, 40, dim)),
        validation=Split.from_arrays(*blobs(rng, task, 8, dim)),
        test=Split.from_arrays(*blobs(rng, task, 20, dim)),
        global_classes=(2 * task, 2 * task + 1),
    )


def write_idx(path: Path, magic: int, array: npt.NDArray[np.uint8], *, compress: bool = False) -> Path:
    """Write ``array`` as an IDX file (big-endian header, raw uint8 body)."""
    header = magic.to_bytes(4, "big") + b"".join(d.to_bytes(4, "big") for d in array.shape)
    payload = header + np.ascontiguousarray(array, dtype=np.uint8).tobytes()
    path.write_bytes(gzip.compress(payload) if compress else payload)
    return path


def fake_digits(
    rng: np.random.Generator, per_digit: int
) -> tuple[npt.NDArray[np.uint8], npt.NDArray[np.uint8]]:
    """Random 28x28 images, ``per_digit`` of each digit 0-9, label-shaded."""
    labels = np.repeat(np.arange(10, dtype=np.uint8), per_digit)
    images = rng.integers(0, 64, size=(labels.size, 28, 28)).astype(np.uint8)
    images[:, 10:18, 10:18] += (labels * 19)[:, None, None].astype(np.uint8)
    return images, labels


# ==============================================================================
# Configuration and training fixtures
# ==============================================================================


@pytest.fixture
def tiny_config() -> TrainConfig:
    """Two binary tasks, networks small enough to train instantly."""
    return TrainConfig(
        dataset="split-mnist",
        tasks=2,
        iterations=40,
        batch_size=16,
        learning_rate=0.01,
        beta=0.01,
        lam=0.001,
        sparsity=30.0,
        embedding_dim=4,
        hnet_hidden=(6,),
        target_hidden=(5,),
        seed=3,
        validation_size=8,
        validation_interval=10,
        eval_batch_size=16,
        workers=2,
        log_interval=20,
    )


@pytest.fixture
def tiny_tasks() -> list[TaskDataset]:
    """Two separable binary tasks over six inputs."""
    rng = np.random.default_rng(11)
    return [make_task(t, rng) for t in range(2)]


@pytest.fixture
def trained_state(tiny_config: TrainConfig, tiny_tasks: list[TaskDataset]) -> TrainedState:
    """Both tiny tasks trained in order."""
    return train_sequence(tiny_tasks, tiny_config)


# ==============================================================================
# MNIST fixtures
# ==============================================================================


@pytest.fixture
def fake_mnist() -> MnistSplits:
    """In-memory MNIST stand-in: 20 train and 5 test images per digit."""
    rng = np.random.default_rng(5)
    train_images, train_labels = fake_digits(rng, 20)
    test_images, test_labels = fake_digits(rng, 5)
    return MnistSplits(
        pad_and_flatten(train_images / 255.0),
        train_labels.astype(np.int64),
        pad_and_flatten(test_images / 255.0),
        test_labels.astype(np.int64),
    )


@pytest.fixture
def mnist_dir(tmp_path: Path) -> Path:
    """Directory holding the four MNIST IDX files (training images gzipped)."""
    rng = np.random.default_rng(5)
    root = tmp_path / "mnist"
    root.mkdir()
    train_images, train_labels = fake_digits(rng, 20)
    test_images, test_labels = fake_digits(rng, 5)
    write_idx(root / "train-images-idx3-ubyte.gz", IMAGE_MAGIC, train_images, compress=True)
    write_idx(root / "train-labels-idx1-ubyte", LABEL_MAGIC, train_labels)
    write_idx(root / "t10k-images-idx3-ubyte", IMAGE_MAGIC, test_images)
    write_idx(root / "t10k-labels-idx1-ubyte", LABEL_MAGIC, test_labels)
    return root


# ==============================================================================
# CLI fixtures
# ==============================================================================


@pytest.fixture
def cli_runner() -> Generator[CliRunner, None, None]:
    """CLI runner with a console wide enough that tables never wrap."""
    with patch("masklet.cli.console", Console(width=200)):
        yield CliRunner()


@pytest.fixture(autouse=True)
def _reset_masklet_logger() -> Generator[None, None, None]:
    """Undo the handler the CLI installs so ``caplog`` keeps working."""
    yield
    logger = logging.getLogger("masklet")
    logger.handlers.clear()
    logger.setLevel(logging.NOTSET)
    logger.propagate = True


# ==============================================================================
# Exception fixtures
# ==============================================================================


@pytest.fixture
def all_exceptions() -> list[MaskletError]:
    """One instance of every masklet exception."""
    return [
        MaskletError("base"),
        ShapeError("shape", (2, 3), (3, 2)),
        ContractError("contract"),
        ConfigError("config", "beta"),
        DatasetNotFoundError("/data", ["train-images-idx3-ubyte"]),
        DataFormatError("format", "/data/file"),
        DivergenceError(0, 7),
        DegenerateCovarianceError("degenerate", 3),
        NormalizationError("norm"),
        CheckpointVersionError(2, 1, "/ckpt"),
        CheckpointCorruptionError("phi/layer0.weight", "/ckpt"),
    ]
