"""
Accuracy bookkeeping, forgetting measures and target-weight drift.
"""

from collections.abc import Mapping
from collections.abc import Sequence
from dataclasses import dataclass
import logging
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pandas as pd

from .autodiff import FloatArray
from .exceptions import ContractError
from .exceptions import ShapeError


logger = logging.getLogger(__name__)

Snapshot = Mapping[str, FloatArray]


@dataclass(slots=True)
class AccuracyMatrix:
    """
    Test accuracy (percent) on task ``i`` after training task ``j``.

    ``values[j, i]`` is defined for ``i <= j`` and NaN elsewhere. Rows are
    filled in training order.
    """

    values: FloatArray

    @classmethod
    def empty(cls, num_tasks: int) -> "AccuracyMatrix":
        """All-NaN matrix for ``num_tasks`` tasks."""
        return cls(np.full((num_tasks, num_tasks), np.nan))

    @classmethod
    def from_rows(
        cls, rows: Sequence[Sequence[float]], num_tasks: int | None = None
    ) -> "AccuracyMatrix":
        """Build a matrix from lower-triangular rows (row ``j`` has ``j + 1`` entries)."""
        matrix = cls.empty(num_tasks if num_tasks is not None else len(rows))
        for j, row in enumerate(rows):
            matrix.record_row(j, row)
        return matrix

    @property
    def num_tasks(self) -> int:
        """Size of the matrix."""
        return int(self.values.shape[0])

    @property
    def completed(self) -> int:
        """Number of recorded rows."""
        return int(np.count_nonzero(~np.isnan(np.diag(self.values))))

    def record_row(self, task: int, accuracies: Sequence[float]) -> None:
        """
        Store the accuracies on tasks ``0..task`` measured after ``task``.

        Raises
        ------
        ContractError
            If the row is out of order, has the wrong length or a value lies
            outside ``[0, 100]``.
        """
        if task != self.completed:
            raise ContractError(f"Expected row {self.completed}, got {task}")
        if task >= self.num_tasks:
            raise ContractError(f"Row {task} exceeds the {self.num_tasks} tasks of the matrix")
        row = np.asarray(accuracies, dtype=np.float64)
        if row.shape != (task + 1,):
            raise ContractError(f"Row {task} needs {task + 1} accuracies, got {row.size}")
        if np.any((row < 0.0) | (row > 100.0)):
            raise ContractError(f"Accuracies must lie in [0, 100], got {row.tolist()}")
        self.values[task, : task + 1] = row

    def final_row(self) -> FloatArray:
        """Accuracies after the last recorded task."""
        last = self.completed - 1
        if last < 0:
            raise ContractError("No accuracy row recorded yet")
        return self.values[last, : last + 1].copy()

    def to_frame(self) -> pd.DataFrame:
        """Recorded rows as a table with columns ``after_task, task_1..task_T``."""
        done = self.completed
        frame = pd.DataFrame(
            self.values[:done],
            columns=[f"task_{i + 1}" for i in range(self.num_tasks)],
        )
        frame.insert(0, "after_task", np.arange(1, done + 1))
        return frame

    def to_csv(self, path: Path) -> None:
        """Write :meth:`to_frame`; undefined entries are left empty."""
        self.to_frame().to_csv(path, index=False)

    def to_list(self) -> list[list[float | None]]:
        """Nested lists with ``None`` for undefined entries."""
        return [
            [None if np.isnan(v) else float(v) for v in row] for row in self.values
        ]

    @classmethod
    def from_list(cls, rows: Sequence[Sequence[float | None]]) -> "AccuracyMatrix":
        """Inverse of :meth:`to_list`."""
        return cls(
            np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64)
        )


def backward_transfer(matrix: AccuracyMatrix) -> float:
    """
    Mean change of earlier-task accuracy after the final task.

    ``BWT = mean_{i < T} (A[T, i] - A[i, i])`` over the recorded rows;
    negative values mean forgetting.

    Raises
    ------
    ContractError
        If fewer than two rows are recorded.
    """
    done = matrix.completed
    if done < 2:
        raise ContractError("Backward transfer needs at least two trained tasks")
    last = matrix.values[done - 1, : done - 1]
    diagonal = np.diag(matrix.values)[: done - 1]
    return float(np.mean(last - diagonal))


def mean_final_accuracy(matrix: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks after the last recorded task."""
    return float(np.mean(matrix.final_row()))


def fecam_protocol_accuracy(stages: Sequence[float]) -> tuple[float, float]:
    """
    Summarize per-stage task-agnostic accuracies.

    Parameters
    ----------
    stages : Sequence[float]
        ``Acc_j``: accuracy on the union of the test sets of tasks ``0..j``
        after stage ``j``.

    Returns
    -------
    tuple[float, float]
        ``(last, average)``.

    Raises
    ------
    ContractError
        If ``stages`` is empty.
    """
    if len(stages) == 0:
        raise ContractError("No stage accuracies given")
    values = np.asarray(stages, dtype=np.float64)
    return float(values[-1]), float(values.mean())


def _layer_vector(snapshot: Snapshot, layer: int) -> FloatArray:
    prefix = f"layer{layer}."
    parts = [np.ravel(v) for name, v in snapshot.items() if name.startswith(prefix)]
    if not parts:
        raise ContractError(f"Snapshot has no parameters for layer {layer}")
    return np.concatenate(parts)


def target_weight_drift(snapshots: Sequence[Snapshot], layer: int) -> FloatArray:
    """
    Pairwise L1 distance of one target layer across task snapshots.

    Parameters
    ----------
    snapshots : Sequence[Mapping[str, FloatArray]]
        Target parameters after each task, same layout throughout.
    layer : int
        Layer index; weights and bias of ``layer{k}`` count together.

    Returns
    -------
    FloatArray
        Symmetric matrix ``D[i, j] = sum |w_i - w_j|`` with a zero diagonal.

    Raises
    ------
    ShapeError
        If the snapshots differ in layout.
    """
    if not snapshots:
        return np.zeros((0, 0))
    layouts = [[(n, np.shape(v)) for n, v in s.items()] for s in snapshots]
    if any(lay != layouts[0] for lay in layouts[1:]):
        raise ShapeError("Target snapshots differ in layout")
    vectors = [_layer_vector(s, layer) for s in snapshots]
    drift = np.zeros((len(vectors), len(vectors)))
    for i in range(len(vectors)):
        for j in range(i + 1, len(vectors)):
            drift[i, j] = drift[j, i] = np.abs(vectors[i] - vectors[j]).sum()
    return drift


def _layer_indices(snapshot: Snapshot) -> list[int]:
    return sorted({int(name.split(".", 1)[0].removeprefix("layer")) for name in snapshot})


def drift_report(history: Sequence[Snapshot]) -> dict[int, pd.DataFrame]:
    """
    Drift matrices of every target layer as labelled tables.

    Rows and columns are named ``after_task_1..after_task_T``.
    """
    if not history:
        return {}
    labels = [f"after_task_{j + 1}" for j in range(len(history))]
    return {
        k: pd.DataFrame(target_weight_drift(history, k), index=labels, columns=labels)
        for k in _layer_indices(history[0])
    }


def drift_is_monotone(drift: npt.ArrayLike) -> bool:
    """Whether the distance from the first snapshot never decreases."""
    first_row = np.asarray(drift, dtype=np.float64)[0]
    return bool(np.all(np.diff(first_row) >= 0.0))


def check_drift_monotone(history: Sequence[Snapshot]) -> bool:
    """
    Soft check that every layer keeps drifting away from its first snapshot.

    Logs a warning per layer that does not; never raises.
    """
    ok = True
    for k, frame in drift_report(history).items():
        if not drift_is_monotone(frame.to_numpy()):
            ok = False
            logger.warning(
                "Target layer %d drift from task 1 is not monotone: %s",
                k,
                np.round(frame.to_numpy()[0], 4).tolist(),
            )
    return ok
