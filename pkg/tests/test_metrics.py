"""
Tests for masklet.metrics module.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from masklet.exceptions import ContractError
from masklet.exceptions import ShapeError
from masklet.metrics import AccuracyMatrix
from masklet.metrics import backward_transfer
from masklet.metrics import check_drift_monotone
from masklet.metrics import drift_is_monotone
from masklet.metrics import drift_report
from masklet.metrics import fecam_protocol_accuracy
from masklet.metrics import mean_final_accuracy
from masklet.metrics import target_weight_drift


def _snapshot(w0: list[float], w1: list[float]) -> dict[str, np.ndarray]:
    return {
        "layer0.weight": np.array(w0),
        "layer0.bias": np.zeros(1),
        "layer1.weight": np.array(w1),
        "layer1.bias": np.zeros(1),
    }


class TestAccuracyMatrix:
    """Test accuracy bookkeeping."""

    def test_rows_in_order(self) -> None:
        """Test lower-triangular filling."""
        matrix = AccuracyMatrix.from_rows([[99.0], [98.0, 97.0]], num_tasks=3)
        assert matrix.completed == 2
        assert matrix.values[1, 0] == 98.0
        assert np.isnan(matrix.values[0, 1])
        assert matrix.final_row().tolist() == [98.0, 97.0]

    def test_out_of_order_row(self) -> None:
        """Test recording row 1 before row 0."""
        with pytest.raises(ContractError):
            AccuracyMatrix.empty(2).record_row(1, [50.0, 50.0])

    def test_wrong_row_length(self) -> None:
        """Test a row with too many entries."""
        with pytest.raises(ContractError):
            AccuracyMatrix.empty(2).record_row(0, [50.0, 50.0])

    def test_value_out_of_range(self) -> None:
        """Test accuracies above 100."""
        with pytest.raises(ContractError):
            AccuracyMatrix.empty(1).record_row(0, [100.5])

    def test_final_row_needs_a_row(self) -> None:
        """Test the empty matrix."""
        with pytest.raises(ContractError):
            AccuracyMatrix.empty(2).final_row()

    def test_csv(self, tmp_path: Path) -> None:
        """Test the CSV layout with one-based task columns."""
        path = tmp_path / "accuracy.csv"
        AccuracyMatrix.from_rows([[90.0], [80.0, 85.0]], num_tasks=3).to_csv(path)
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["after_task", "task_1", "task_2", "task_3"]
        assert frame["after_task"].tolist() == [1, 2]
        assert frame.loc[1, "task_2"] == 85.0
        assert np.isnan(frame.loc[0, "task_2"])

    def test_list_round_trip(self) -> None:
        """Test None stands for undefined entries."""
        matrix = AccuracyMatrix.from_rows([[90.0]], num_tasks=2)
        assert matrix.to_list() == [[90.0, None], [None, None]]
        restored = AccuracyMatrix.from_list(matrix.to_list())
        np.testing.assert_array_equal(restored.values, matrix.values)


class TestBackwardTransfer:
    """Test forgetting measures."""

    def test_no_change(self) -> None:
        """Test a constant matrix gives zero."""
        matrix = AccuracyMatrix.from_rows([[90.0], [90.0, 90.0], [90.0, 90.0, 90.0]])
        assert backward_transfer(matrix) == 0.0

    def test_one_point_forgetting(self) -> None:
        """Test diagonal 100 and final row 99 gives -1."""
        matrix = AccuracyMatrix.from_rows([[100.0], [99.5, 100.0], [99.0, 99.0, 100.0]])
        assert backward_transfer(matrix) == pytest.approx(-1.0)

    def test_improvement_is_positive(self) -> None:
        """Test final accuracies above the diagonal give BWT >= 0."""
        rng = np.random.default_rng(0)
        for _ in range(20):
            diagonal = rng.uniform(50, 90, size=4)
            rows = [list(diagonal[: j + 1]) for j in range(3)]
            rows.append([*(diagonal[:3] + rng.uniform(0, 10, size=3)), diagonal[3]])
            assert backward_transfer(AccuracyMatrix.from_rows(rows)) >= 0.0

    def test_single_task(self) -> None:
        """Test T = 1 is undefined."""
        with pytest.raises(ContractError):
            backward_transfer(AccuracyMatrix.from_rows([[90.0]]))

    def test_mean_final_accuracy(self) -> None:
        """Test the mean of the last row."""
        matrix = AccuracyMatrix.from_rows([[90.0], [80.0, 100.0]])
        assert mean_final_accuracy(matrix) == 90.0


class TestProtocolAccuracy:
    """Test the (last, average) summary of stage accuracies."""

    def test_all_perfect(self) -> None:
        """Test every stage at 100."""
        assert fecam_protocol_accuracy([100.0] * 5) == (100.0, 100.0)

    def test_decreasing(self) -> None:
        """Test (80, 60, 40, 30, 20) gives (20, 46)."""
        last, average = fecam_protocol_accuracy([80.0, 60.0, 40.0, 30.0, 20.0])
        assert last == 20.0
        assert average == pytest.approx(46.0)

    def test_empty(self) -> None:
        """Test no stages."""
        with pytest.raises(ContractError):
            fecam_protocol_accuracy([])


class TestTargetWeightDrift:
    """Test pairwise L1 distances of layer snapshots."""

    def test_identical_snapshots(self) -> None:
        """Test all-zero matrix."""
        snap = _snapshot([1.0, 2.0], [3.0])
        assert not np.any(target_weight_drift([snap, snap, snap], 0))

    def test_hand_computed(self) -> None:
        """Test {1, 2} vs {1.5, 1} gives 1.5."""
        drift = target_weight_drift([_snapshot([1.0, 2.0], [0.0]), _snapshot([1.5, 1.0], [0.0])], 0)
        assert drift[0, 1] == pytest.approx(1.5)
        assert drift[1, 0] == pytest.approx(1.5)

    def test_metric_properties(self) -> None:
        """Test symmetry, zero diagonal and the triangle inequality."""
        rng = np.random.default_rng(1)
        history = [_snapshot(list(rng.normal(size=3)), list(rng.normal(size=2))) for _ in range(5)]
        drift = target_weight_drift(history, 1)
        np.testing.assert_array_equal(drift, drift.T)
        assert not np.any(np.diag(drift))
        for i in range(5):
            for j in range(5):
                for k in range(5):
                    assert drift[i, k] <= drift[i, j] + drift[j, k] + 1e-12

    def test_layout_mismatch(self) -> None:
        """Test snapshots of different architectures."""
        with pytest.raises(ShapeError):
            target_weight_drift([_snapshot([1.0], [1.0]), _snapshot([1.0, 2.0], [1.0])], 0)

    def test_unknown_layer(self) -> None:
        """Test a layer index without parameters."""
        with pytest.raises(ContractError):
            target_weight_drift([_snapshot([1.0], [1.0])], 4)

    def test_report_labels(self) -> None:
        """Test one labelled frame per layer."""
        report = drift_report([_snapshot([1.0], [1.0]), _snapshot([2.0], [1.0])])
        assert sorted(report) == [0, 1]
        assert list(report[0].index) == ["after_task_1", "after_task_2"]
        assert report[0].loc["after_task_1", "after_task_2"] == 1.0


class TestDriftMonotone:
    """Test the soft monotonicity check."""

    def test_monotone(self) -> None:
        """Test a steadily drifting layer."""
        assert drift_is_monotone([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]])

    def test_warning_logged(self, caplog: pytest.LogCaptureFixture) -> None:
        """Test a layer returning to its first snapshot logs a warning."""
        history = [_snapshot([0.0], [0.0]), _snapshot([1.0], [1.0]), _snapshot([0.0], [2.0])]
        with caplog.at_level(logging.WARNING, logger="masklet.metrics"):
            assert check_drift_monotone(history) is False
        assert "layer 0" in caplog.text
        assert "layer 1" not in caplog.text
