"""
MNIST ingestion and task-stream construction.

IDX files are read directly (plain or gzip-compressed, detected by their
magic bytes). Images are scaled to ``[0, 1]``, zero-padded to 32x32 and
flattened to 1024 inputs. Two streams are built on top:

- Permuted MNIST: every task is the full 10-way problem with its own pixel
  permutation (the first task unpermuted by default).
- Split MNIST: five binary tasks over the digit pairs (0,1) ... (8,9).
"""

from collections.abc import Sequence
from dataclasses import dataclass
import gzip
import logging
from pathlib import Path
from typing import Final
import zlib

import numpy as np
import numpy.typing as npt

from .autodiff import FloatArray
from .config import TrainConfig
from .exceptions import ConfigError
from .exceptions import DataError
from .exceptions import DataFormatError
from .exceptions import DatasetNotFoundError
from .exceptions import ShapeError


logger = logging.getLogger(__name__)

IMAGE_MAGIC: Final[int] = 0x00000803
LABEL_MAGIC: Final[int] = 0x00000801
GZIP_MAGIC: Final[bytes] = b"\x1f\x8b"
IMAGE_SIDE: Final[int] = 28
PAD: Final[int] = 2
INPUT_DIM: Final[int] = (IMAGE_SIDE + 2 * PAD) ** 2

MNIST_FILES: Final[dict[str, tuple[str, str]]] = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

IntArray = npt.NDArray[np.int64]


@dataclass(slots=True, frozen=True)
class RawDataset:
    """Images of shape ``(count, 28, 28)`` in ``[0, 1]`` and their labels."""

    images: FloatArray
    labels: IntArray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def _read_bytes(path: Path) -> bytes:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DataFormatError(f"Cannot read IDX file: {e}", str(path)) from e
    if payload[:2] == GZIP_MAGIC:
        try:
            payload = gzip.decompress(payload)
        except (OSError, EOFError, zlib.error) as e:
            raise DataFormatError("Truncated or corrupt gzip stream", str(path)) from e
    return payload


def _parse_idx(payload: bytes, magic: int, ndim: int, path: Path) -> npt.NDArray[np.uint8]:
    header_size = 4 + 4 * ndim
    if len(payload) < header_size:
        raise DataFormatError("IDX header is truncated", str(path))
    found = int.from_bytes(payload[:4], "big")
    if found != magic:
        raise DataFormatError(
            f"Bad magic number 0x{found:08x}, expected 0x{magic:08x}", str(path)
        )
    dims = tuple(
        int.from_bytes(payload[4 + 4 * k : 8 + 4 * k], "big") for k in range(ndim)
    )
    expected = int(np.prod(dims))
    body = payload[header_size:]
    if len(body) != expected:
        raise DataFormatError(
            f"IDX body has {len(body)} bytes, header announces {expected}", str(path)
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path: Path, labels_path: Path) -> RawDataset:
    """
    Read an IDX image file and its label file.

    Parameters
    ----------
    images_path : Path
        File with magic ``0x00000803`` and ``(count, rows, cols)`` header.
    labels_path : Path
        File with magic ``0x00000801`` and ``(count,)`` header.

    Returns
    -------
    RawDataset
        Images divided by 255 and integer labels.

    Raises
    ------
    DataFormatError
        On a bad magic number, a truncated file or differing counts. Nothing
        is returned on error.
    """
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", str(labels_path)
        )
    logger.debug("Loaded %d samples from %s", labels.shape[0], images_path)
    return RawDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def pad_and_flatten(images: FloatArray) -> FloatArray:
    """
    Zero-pad 28x28 images by two pixels per side and flatten row-major.

    Raises
    ------
    ShapeError
        If the images are not ``(count, 28, 28)``.
    """
    if images.ndim != 3 or images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise ShapeError(
            "Images must be 28x28", (images.shape[0] if images.ndim else 0, 28, 28), images.shape
        )
    padded = np.pad(images, ((0, 0), (PAD, PAD), (PAD, PAD)))
    return padded.reshape(images.shape[0], INPUT_DIM)


@dataclass(slots=True, frozen=True)
class MnistSplits:
    """Padded MNIST train and test inputs with their digit labels."""

    train_inputs: FloatArray
    train_labels: IntArray
    test_inputs: FloatArray
    test_labels: IntArray


def _locate(root: Path, stem: str) -> Path | None:
    for name in (stem, f"{stem}.gz"):
        candidate = root / name
        if candidate.is_file():
            return candidate
    return None


def load_mnist(root: Path) -> MnistSplits:
    """
    Load the four standard MNIST IDX files from ``root``.

    Each file may be plain or gzip-compressed (``.gz`` suffix).

    Raises
    ------
    DatasetNotFoundError
        Listing the files that are missing.
    """
    root = Path(root)
    located: dict[str, Path] = {}
    missing: list[str] = []
    for stems in MNIST_FILES.values():
        for stem in stems:
            path = _locate(root, stem)
            if path is None:
                missing.append(stem)
            else:
                located[stem] = path
    if missing:
        raise DatasetNotFoundError(str(root), missing)

    train_images, train_labels = MNIST_FILES["train"]
    test_images, test_labels = MNIST_FILES["test"]
    train = load_idx(located[train_images], located[train_labels])
    test = load_idx(located[test_images], located[test_labels])
    logger.info("MNIST: %d train / %d test samples from %s", len(train), len(test), root)
    return MnistSplits(
        pad_and_flatten(train.images),
        train.labels,
        pad_and_flatten(test.images),
        test.labels,
    )


@dataclass(slots=True, frozen=True)
class Split:
    """
    One split of a task: rows of a shared input matrix plus local labels.

    The task permutation is applied when inputs are materialized, so tasks
    share the base image matrix instead of holding permuted copies.
    """

    base: FloatArray
    rows: IntArray
    labels: IntArray
    permutation: IntArray | None = None

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    def batch(self, index: npt.ArrayLike) -> tuple[FloatArray, IntArray]:
        """Inputs and labels of the samples at positions ``index``."""
        positions = np.asarray(index, dtype=np.int64)
        inputs = self.base[self.rows[positions]]
        if self.permutation is not None:
            inputs = inputs[:, self.permutation]
        return inputs, self.labels[positions]

    def inputs(self) -> FloatArray:
        """All inputs of the split."""
        return self.batch(np.arange(len(self)))[0]

    def chunks(self, size: int) -> list[tuple[FloatArray, IntArray]]:
        """Split the samples into consecutive batches of at most ``size``."""
        return [
            self.batch(np.arange(start, min(start + size, len(self))))
            for start in range(0, len(self), size)
        ]

    @classmethod
    def from_arrays(
        cls,
        inputs: npt.ArrayLike,
        labels: npt.ArrayLike,
        permutation: npt.ArrayLike | None = None,
    ) -> "Split":
        """Wrap in-memory arrays as a split."""
        base = np.asarray(inputs, dtype=np.float64)
        perm = None if permutation is None else np.asarray(permutation, dtype=np.int64)
        return cls(
            base,
            np.arange(base.shape[0], dtype=np.int64),
            np.asarray(labels, dtype=np.int64),
            perm,
        )


@dataclass(slots=True, frozen=True)
class TaskDataset:
    """
    Train, validation and test splits of one task.

    Attributes
    ----------
    task_id : int
        Zero-based task index.
    train, validation, test : Split
        Disjoint splits with local labels in ``[0, classes_per_task)``.
    global_classes : tuple[int, ...]
        Global class id of every local label.
    """

    task_id: int
    train: Split
    validation: Split
    test: Split
    global_classes: tuple[int, ...]

    @property
    def classes_per_task(self) -> int:
        """Number of local labels."""
        return len(self.global_classes)

    @property
    def permutation(self) -> IntArray | None:
        """Pixel permutation of the task, if any."""
        return self.train.permutation

    def split(self, name: str) -> Split:
        """Return the split called ``train``, ``validation`` or ``test``."""
        if name not in ("train", "validation", "test"):
            raise ConfigError(f"Unknown split '{name}'", "split")
        return getattr(self, name)


def _holdout(count: int, val_size: int, rng: np.random.Generator) -> tuple[IntArray, IntArray]:
    if val_size >= count:
        raise ConfigError(
            f"Validation size {val_size} leaves no training samples out of {count}",
            "validation_size",
        )
    order = rng.permutation(count)
    cut = count - val_size
    return np.sort(order[:cut]), np.sort(order[cut:])


def build_permuted_tasks(
    mnist: MnistSplits,
    num_tasks: int,
    seed: int,
    val_size: int = 5000,
    *,
    identity_first: bool = True,
) -> list[TaskDataset]:
    """
    Build the Permuted MNIST stream.

    Parameters
    ----------
    mnist : MnistSplits
        Padded MNIST.
    num_tasks : int
        Number of tasks ``T >= 1``.
    seed : int
        Seed of the permutation and validation generator.
    val_size : int, default 5000
        Validation samples carved from the tail of a seeded shuffle.
    identity_first : bool, default True
        Leave task 0 unpermuted.

    Returns
    -------
    list[TaskDataset]
        One 10-way task per permutation; all tasks share the validation rows.

    Raises
    ------
    ConfigError
        If ``num_tasks < 1`` or ``val_size`` is not smaller than the train set.
    """
    if num_tasks < 1:
        raise ConfigError("At least one task is required", "tasks")
    rng = np.random.default_rng(seed)
    train_rows, val_rows = _holdout(mnist.train_inputs.shape[0], val_size, rng)
    test_rows = np.arange(mnist.test_inputs.shape[0], dtype=np.int64)

    tasks: list[TaskDataset] = []
    for t in range(num_tasks):
        perm: IntArray | None
        if t == 0 and identity_first:
            perm = None
        else:
            perm = rng.permutation(INPUT_DIM).astype(np.int64)
        tasks.append(
            TaskDataset(
                task_id=t,
                train=Split(mnist.train_inputs, train_rows, mnist.train_labels[train_rows], perm),
                validation=Split(mnist.train_inputs, val_rows, mnist.train_labels[val_rows], perm),
                test=Split(mnist.test_inputs, test_rows, mnist.test_labels, perm),
                global_classes=tuple(range(t * 10, t * 10 + 10)),
            )
        )
    logger.info(
        "Built %d Permuted MNIST task(s): %d train / %d validation / %d test each",
        num_tasks,
        train_rows.size,
        val_rows.size,
        test_rows.size,
    )
    return tasks


SPLIT_PAIRS: Final[tuple[tuple[int, int], ...]] = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))


def _pair_rows(labels: IntArray, pair: Sequence[int], split: str) -> tuple[IntArray, IntArray]:
    rows = np.flatnonzero(np.isin(labels, pair)).astype(np.int64)
    for digit in pair:
        if not np.any(labels[rows] == digit):
            raise DataError(f"Digit {digit} is missing from the {split} split")
    local = (labels[rows] == pair[1]).astype(np.int64)
    return rows, local


def build_split_tasks(
    mnist: MnistSplits,
    val_size: int = 1000,
    seed: int = 0,
    num_tasks: int = 5,
) -> list[TaskDataset]:
    """
    Build the Split MNIST stream over the digit pairs.

    Task ``t`` holds digits ``2t`` (local label 0) and ``2t + 1`` (local
    label 1). ``val_size`` samples per task are held out from training.

    Raises
    ------
    DataError
        If a digit of a requested pair is absent.
    ConfigError
        If ``num_tasks`` is outside ``[1, 5]`` or ``val_size`` is too large.
    """
    if not 1 <= num_tasks <= len(SPLIT_PAIRS):
        raise ConfigError(f"Split MNIST has 1 to 5 tasks, got {num_tasks}", "tasks")
    rng = np.random.default_rng(seed)
    tasks: list[TaskDataset] = []
    for t, pair in enumerate(SPLIT_PAIRS[:num_tasks]):
        rows, local = _pair_rows(mnist.train_labels, pair, "train")
        keep, held = _holdout(rows.size, val_size, rng)
        test_rows, test_local = _pair_rows(mnist.test_labels, pair, "test")
        tasks.append(
            TaskDataset(
                task_id=t,
                train=Split(mnist.train_inputs, rows[keep], local[keep]),
                validation=Split(mnist.train_inputs, rows[held], local[held]),
                test=Split(mnist.test_inputs, test_rows, test_local),
                global_classes=tuple(pair),
            )
        )
        logger.debug("Split MNIST task %d: digits %s, %d train samples", t + 1, pair, keep.size)
    return tasks


def build_tasks(cfg: TrainConfig, mnist: MnistSplits) -> list[TaskDataset]:
    """Build the task stream named by ``cfg.dataset``."""
    if cfg.dataset == "permuted-mnist":
        return build_permuted_tasks(
            mnist,
            cfg.tasks,
            cfg.seed,
            cfg.validation_size,
            identity_first=cfg.identity_first_permutation,
        )
    if cfg.dataset == "split-mnist":
        return build_split_tasks(mnist, cfg.validation_size, cfg.seed, cfg.tasks)
    raise ConfigError(f"Unknown dataset '{cfg.dataset}'", "dataset")
