"""
Prediction without a given task identity.

Two selectors are provided:

- **entropy**: run every trained task's mask and head, pick the task whose
  softmax output has the lowest entropy, and predict within its head.
- **prototypes**: extract last-hidden-layer features under every task mask
  and pick the (class, task) pair with the smallest squared Mahalanobis
  distance to a class prototype. Prototypes hold the class mean and the
  inverse of its normalized, twice-shrunk covariance.

Ties are always resolved towards the lowest index.
"""

from collections.abc import Mapping
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field
import logging
from typing import Final

import numpy as np
import numpy.typing as npt
import pandas as pd

from .autodiff import FloatArray
from .autodiff import softmax
from .config import INFERENCE_MODES
from .datasets import TaskDataset
from .exceptions import ConfigError
from .exceptions import ContractError
from .exceptions import DegenerateCovarianceError
from .exceptions import NormalizationError
from .exceptions import ShapeError
from .metrics import fecam_protocol_accuracy
from .networks import hidden_features
from .networks import target_forward
from .trainer import TrainedState


logger = logging.getLogger(__name__)

LOG_FLOOR: Final[float] = 1e-12
MODES: Final[tuple[str, ...]] = INFERENCE_MODES

IntArray = npt.NDArray[np.int64]


def entropy_of(probs: npt.ArrayLike) -> FloatArray | float:
    """
    Shannon entropy (natural log) of probability vectors along the last axis.

    Exact zeros contribute nothing (``0 * log 0 = 0``).

    Raises
    ------
    ContractError
        If an entry is negative.
    """
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise ContractError("Probabilities must be non-negative")
    logs = np.log(np.where(p > 0, p, LOG_FLOOR))
    h = -(p * logs).sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


@dataclass(slots=True, frozen=True)
class InferenceResult:
    """
    Task-agnostic predictions for a batch.

    Attributes
    ----------
    predicted_class : IntArray
        Global class per sample.
    selected_task : IntArray
        Winning task per sample.
    scores : FloatArray
        Per-task score, shape ``(batch, tasks)``: entropies, or the smallest
        distance over classes.
    """

    predicted_class: IntArray
    selected_task: IntArray
    scores: FloatArray


def _candidate_tasks(state: TrainedState, num_tasks: int | None) -> int:
    count = state.trained_tasks if num_tasks is None else num_tasks
    if count < 1 or count > state.trained_tasks:
        raise ContractError(
            f"Inference needs 1 to {state.trained_tasks} trained task(s), got {count}"
        )
    return count


def _entropy_scores(
    state: TrainedState, x: FloatArray, num_tasks: int
) -> tuple[FloatArray, IntArray]:
    theta = state.theta.detach()
    entropies = np.empty((x.shape[0], num_tasks))
    local = np.empty((x.shape[0], num_tasks), dtype=np.int64)
    for t in range(num_tasks):
        logits = target_forward(x, theta, state.task_mask(t), t, state.target_spec).data
        probs = softmax(logits)
        entropies[:, t] = entropy_of(probs)
        local[:, t] = np.argmax(probs, axis=1)
    return entropies, local


def _entropy_winner(
    entropies: FloatArray, local: IntArray, classes_per_task: int
) -> tuple[IntArray, IntArray]:
    rows = np.arange(entropies.shape[0])
    task = np.argmin(entropies, axis=1)
    return task * classes_per_task + local[rows, task], task


def infer_entropy(
    state: TrainedState, x: npt.ArrayLike, num_tasks: int | None = None
) -> InferenceResult:
    """
    Select the task whose head is most confident, by minimum entropy.

    Parameters
    ----------
    state : TrainedState
        Trained run.
    x : array_like
        Inputs of shape ``(batch, input_dim)``.
    num_tasks : int, optional
        Only consider tasks ``0..num_tasks-1`` (default: all trained).

    Returns
    -------
    InferenceResult
        Global class ``t* * classes_per_task + argmax``; scores are entropies.
    """
    count = _candidate_tasks(state, num_tasks)
    inputs = np.asarray(x, dtype=np.float64)
    entropies, local = _entropy_scores(state, inputs, count)
    predicted, task = _entropy_winner(entropies, local, state.target_spec.classes_per_task)
    return InferenceResult(predicted, task, entropies)


def shrink_covariance(cov: npt.ArrayLike) -> FloatArray:
    """
    Add the mean diagonal entry on the diagonal and the mean off-diagonal entry elsewhere.

    Raises
    ------
    ShapeError
        If the matrix is not square.
    """
    s = np.asarray(cov, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"Covariance must be square, got shape {s.shape}")
    d = s.shape[0]
    eye = np.eye(d)
    d1 = float(np.mean(np.diag(s)))
    d2 = float((s.sum() - np.trace(s)) / (d * d - d)) if d > 1 else 0.0
    return s + d1 * eye + d2 * (1.0 - eye)


def normalize_covariance(cov: npt.ArrayLike) -> FloatArray:
    """
    Scale a covariance to unit diagonal: ``S[i, j] / sqrt(S[i, i] * S[j, j])``.

    Raises
    ------
    DegenerateCovarianceError
        If a diagonal entry is not strictly positive.
    """
    s = np.asarray(cov, dtype=np.float64)
    diag = np.diag(s)
    if np.any(diag <= 0):
        raise DegenerateCovarianceError("Covariance diagonal is not strictly positive")
    scale = np.sqrt(np.outer(diag, diag))
    return s / scale


@dataclass(slots=True, frozen=True)
class ClassPrototype:
    """
    Class mean and precision used by the Mahalanobis classifier.

    Attributes
    ----------
    class_id : int
        Global class.
    mean : FloatArray
        Mean feature vector.
    precision : FloatArray
        Inverse of the normalized, twice-shrunk covariance.
    count : int
        Number of samples the prototype was built from.
    """

    class_id: int
    mean: FloatArray
    precision: FloatArray
    count: int


def prototype_from_features(class_id: int, features: FloatArray) -> ClassPrototype:
    """
    Build one prototype from the features of a class.

    Raises
    ------
    DegenerateCovarianceError
        With fewer than two samples, or when the shrunk covariance cannot be
        normalized or inverted.
    """
    count = features.shape[0]
    if count < 2:
        raise DegenerateCovarianceError(
            f"Need at least 2 samples for a covariance, got {count}", class_id
        )
    mean = features.mean(axis=0)
    cov = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
    shrunk = shrink_covariance(shrink_covariance(cov))
    try:
        normalized = normalize_covariance(shrunk)
        precision = np.linalg.inv(normalized)
    except DegenerateCovarianceError as e:
        raise DegenerateCovarianceError(str(e), class_id) from e
    except np.linalg.LinAlgError as e:
        raise DegenerateCovarianceError("Covariance is singular", class_id) from e
    return ClassPrototype(class_id, mean, precision, count)


def _task_features(state: TrainedState, data: TaskDataset) -> FloatArray:
    theta = state.theta.detach()
    mask = state.task_mask(data.task_id)
    chunks = [
        hidden_features(x, theta, mask, state.target_spec).data
        for x, _ in data.train.chunks(state.config.eval_batch_size)
    ]
    return np.concatenate(chunks)


def build_prototypes(
    state: TrainedState,
    tasks: Sequence[TaskDataset],
    existing: Mapping[int, ClassPrototype] | None = None,
) -> dict[int, ClassPrototype]:
    """
    Build class prototypes from the training data of the trained tasks.

    Features of each task's samples are extracted under that task's own mask.
    Classes already present in ``existing`` are reused, not recomputed.

    Parameters
    ----------
    state : TrainedState
        Trained run.
    tasks : Sequence[TaskDataset]
        Task data; only the first ``state.trained_tasks`` are used.
    existing : Mapping[int, ClassPrototype], optional
        Prototypes from an earlier call.

    Returns
    -------
    dict[int, ClassPrototype]
        Prototypes keyed by global class, sorted.

    Raises
    ------
    ContractError
        If no task is trained or a task has no training data.
    """
    if state.trained_tasks < 1:
        raise ContractError("Prototypes need at least one trained task")
    prototypes: dict[int, ClassPrototype] = dict(existing or {})
    cpt = state.target_spec.classes_per_task
    for data in tasks[: state.trained_tasks]:
        t = data.task_id
        wanted = [c for c in range(cpt) if t * cpt + c not in prototypes]
        if not wanted:
            continue
        if len(data.train) == 0:
            raise ContractError(f"Task {t + 1} has no training data for prototypes")
        features = _task_features(state, data)
        labels = data.train.labels
        with ThreadPoolExecutor(max_workers=state.config.workers) as pool:
            built = list(
                pool.map(
                    prototype_from_features,
                    [t * cpt + c for c in wanted],
                    [features[labels == c] for c in wanted],
                )
            )
        for p in built:
            prototypes[p.class_id] = p
            logger.debug("Prototype for class %d from %d samples", p.class_id, p.count)
        logger.info("Task %d: built %d prototype(s)", t + 1, len(built))
    return dict(sorted(prototypes.items()))


def _unit_rows(values: FloatArray, what: str) -> FloatArray:
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError(f"Cannot normalize a zero-norm {what}")
    return values / norms


def mahalanobis_sq(feature: npt.ArrayLike, prototype: ClassPrototype) -> float:
    """
    Squared Mahalanobis distance between L2-normalized feature and class mean.

    Raises
    ------
    NormalizationError
        If the feature or the prototype mean has zero norm.
    """
    phi = _unit_rows(np.asarray(feature, dtype=np.float64), "feature")
    mu = _unit_rows(prototype.mean, "prototype mean")
    u = phi - mu
    return float(u @ prototype.precision @ u)


def _fecam_scores(
    state: TrainedState,
    protos: Sequence[ClassPrototype],
    x: FloatArray,
    num_tasks: int,
) -> FloatArray:
    theta = state.theta.detach()
    means = _unit_rows(np.stack([p.mean for p in protos]), "prototype mean")
    dists = np.empty((x.shape[0], len(protos), num_tasks))
    for t in range(num_tasks):
        feats = hidden_features(x, theta, state.task_mask(t), state.target_spec).data
        feats = _unit_rows(feats, "feature")
        for k, proto in enumerate(protos):
            u = feats - means[k]
            dists[:, k, t] = ((u @ proto.precision) * u).sum(axis=1)
    return dists


def _fecam_winner(dists: FloatArray) -> tuple[IntArray, IntArray]:
    batch, classes, tasks = dists.shape
    flat = np.argmin(dists.reshape(batch, classes * tasks), axis=1)
    return flat // tasks, flat % tasks


def classify_fecam(
    state: TrainedState,
    prototypes: Mapping[int, ClassPrototype],
    x: npt.ArrayLike,
    num_tasks: int | None = None,
) -> InferenceResult:
    """
    Classify by the nearest prototype over every candidate task mask.

    Parameters
    ----------
    state : TrainedState
        Trained run.
    prototypes : Mapping[int, ClassPrototype]
        Prototypes of all seen classes.
    x : array_like
        Inputs of shape ``(batch, input_dim)``.
    num_tasks : int, optional
        Only use the masks of tasks ``0..num_tasks-1``.

    Returns
    -------
    InferenceResult
        The (class, task) pair of minimum distance, lowest class id then
        lowest task on ties; scores are the per-task minimum distances.
    """
    count = _candidate_tasks(state, num_tasks)
    if not prototypes:
        raise ContractError("No prototypes available")
    ids = sorted(prototypes)
    protos = [prototypes[c] for c in ids]
    inputs = np.asarray(x, dtype=np.float64)

    size = state.config.eval_batch_size
    starts = range(0, inputs.shape[0], size)
    with ThreadPoolExecutor(max_workers=state.config.workers) as pool:
        parts = list(
            pool.map(lambda s: _fecam_scores(state, protos, inputs[s : s + size], count), starts)
        )
    dists = np.concatenate(parts) if parts else np.empty((0, len(protos), count))
    k, task = _fecam_winner(dists)
    return InferenceResult(np.asarray(ids, dtype=np.int64)[k], task, dists.min(axis=1))


@dataclass(slots=True)
class TaskAgnosticReport:
    """
    Per-stage results of task-agnostic evaluation.

    Stage ``j`` is scored right after task ``j`` has been trained, with the
    tasks ``0..j`` as candidates (and, for prototypes, the classes of those
    tasks) and the test samples of those tasks. ``first_stage`` is the
    zero-based stage of the first entry; earlier stages were not recorded.
    """

    mode: str
    stage_accuracy: list[float] = field(default_factory=list)
    stage_task_selection: list[float] = field(default_factory=list)
    first_stage: int = 0

    @property
    def stages(self) -> list[int]:
        """One-based stage numbers of the entries."""
        start = self.first_stage + 1
        return list(range(start, start + len(self.stage_accuracy)))

    @property
    def overall_accuracy(self) -> float:
        """Accuracy of the final stage."""
        return self.stage_accuracy[-1]

    @property
    def task_selection_accuracy(self) -> float:
        """Fraction (percent) of final-stage samples whose task was selected correctly."""
        return self.stage_task_selection[-1]

    def protocol(self) -> tuple[float, float]:
        """``(last, average)`` of the stage accuracies."""
        return fecam_protocol_accuracy(self.stage_accuracy)

    def to_frame(self) -> pd.DataFrame:
        """One row per stage."""
        return pd.DataFrame(
            {
                "stage": self.stages,
                "accuracy": self.stage_accuracy,
                "task_selection": self.stage_task_selection,
            }
        )


def _stage_counts(
    predicted: npt.NDArray[np.int64],
    selected: npt.NDArray[np.int64],
    y_global: npt.NDArray[np.int64],
    task: int,
) -> tuple[int, int]:
    return (
        int(np.count_nonzero(predicted == y_global)),
        int(np.count_nonzero(selected == task)),
    )


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"Unknown inference mode '{mode}'. Supported: {', '.join(MODES)}", "mode")


def score_stage(
    state: TrainedState,
    tasks: Sequence[TaskDataset],
    mode: str,
    prototypes: Mapping[int, ClassPrototype] | None = None,
) -> tuple[float, float]:
    """
    Task-agnostic accuracy of the model as it is now.

    Every trained task is a candidate and the test samples of every trained
    task are scored.

    Parameters
    ----------
    state : TrainedState
        Run state.
    tasks : Sequence[TaskDataset]
        Task data; the first ``state.trained_tasks`` test splits are used.
    mode : str
        ``entropy`` or ``fecam``.
    prototypes : Mapping[int, ClassPrototype], optional
        Prototypes for ``fecam``. Without them, prototypes of the classes
        missing from ``state.prototypes`` are built from the training splits
        and stored there.

    Returns
    -------
    tuple[float, float]
        Accuracy and task-selection accuracy, in percent.

    Raises
    ------
    ConfigError
        If ``mode`` is unknown.
    ContractError
        If a trained task has no data, no test samples or no prototypes.
    """
    _check_mode(mode)
    count = _candidate_tasks(state, None)
    if len(tasks) < count:
        raise ContractError(f"{count} trained task(s) but data for {len(tasks)}")
    cpt = state.target_spec.classes_per_task

    protos: list[ClassPrototype] = []
    ids = np.empty(0, dtype=np.int64)
    if mode == "fecam":
        if prototypes:
            chosen = dict(prototypes)
        else:
            chosen = build_prototypes(state, tasks, existing=state.prototypes)
            state.prototypes = chosen
        missing = [c for c in range(count * cpt) if c not in chosen]
        if missing:
            raise ContractError(f"No prototype for class(es) {missing}")
        protos = [chosen[c] for c in sorted(chosen) if c < count * cpt]
        ids = np.asarray([p.class_id for p in protos], dtype=np.int64)

    def score_chunk(job: tuple[int, FloatArray, IntArray]) -> tuple[int, int]:
        task, x, y_local = job
        y_global = task * cpt + y_local
        if mode == "entropy":
            entropies, local = _entropy_scores(state, x, count)
            predicted, selected = _entropy_winner(entropies, local, cpt)
        else:
            k, selected = _fecam_winner(_fecam_scores(state, protos, x, count))
            predicted = ids[k]
        return _stage_counts(predicted, selected, y_global, task)

    jobs: list[tuple[int, FloatArray, IntArray]] = []
    for data in tasks[:count]:
        if len(data.test) == 0:
            raise ContractError(f"Task {data.task_id + 1} has no test samples")
        chunks = data.test.chunks(state.config.eval_batch_size)
        jobs.extend((data.task_id, x, y) for x, y in chunks)
    seen = sum(len(y) for _, _, y in jobs)

    with ThreadPoolExecutor(max_workers=state.config.workers) as pool:
        counts = list(pool.map(score_chunk, jobs))
    correct = sum(hits for hits, _ in counts)
    picked = sum(picks for _, picks in counts)
    return 100.0 * correct / seen, 100.0 * picked / seen


def record_stage(
    state: TrainedState, tasks: Sequence[TaskDataset]
) -> dict[str, tuple[float, float]]:
    """
    Score and store the stage that ended with the last trained task.

    Every mode of ``state.config.stage_modes`` is scored and written to
    ``state.stage_results``. Prototype mode adds the prototypes of the new
    classes to ``state.prototypes``.
    """
    stage = state.trained_tasks - 1
    results: dict[str, tuple[float, float]] = {}
    for mode in state.config.stage_modes:
        results[mode] = score_stage(state, tasks, mode)
        state.stage_results.setdefault(mode, {})[stage] = results[mode]
        logger.info(
            "Stage %d (%s): accuracy %.2f, task selection %.2f",
            stage + 1,
            mode,
            *results[mode],
        )
    return results


def evaluate_task_agnostic(
    state: TrainedState,
    tasks: Sequence[TaskDataset],
    mode: str,
    prototypes: Mapping[int, ClassPrototype] | None = None,
) -> TaskAgnosticReport:
    """
    Report task-agnostic accuracy stage by stage on the test splits.

    Stages recorded during training are taken from ``state.stage_results``;
    the final stage is scored now unless it was recorded and no
    ``prototypes`` are given. Stages before the last unrecorded one cannot
    be reconstructed from the final model and are left out of the report.

    Parameters
    ----------
    state : TrainedState
        Trained run.
    tasks : Sequence[TaskDataset]
        Task data; the first ``state.trained_tasks`` test splits are used.
    mode : str
        ``entropy`` or ``fecam``.
    prototypes : Mapping[int, ClassPrototype], optional
        Prototypes for scoring the final stage in ``fecam`` mode.

    Raises
    ------
    ConfigError
        If ``mode`` is unknown.
    ContractError
        If nothing is trained, or ``fecam`` has neither prototypes nor
        training data.
    """
    _check_mode(mode)
    final = _candidate_tasks(state, None) - 1
    recorded = dict(state.stage_results.get(mode, {}))
    if final not in recorded or prototypes:
        recorded[final] = score_stage(state, tasks, mode, prototypes)

    first = final
    while first > 0 and first - 1 in recorded:
        first -= 1
    if first > 0:
        logger.warning(
            "No %s result recorded after task %d; reporting stages %d to %d only",
            mode,
            first,
            first + 1,
            final + 1,
        )
    report = TaskAgnosticReport(
        mode,
        [recorded[j][0] for j in range(first, final + 1)],
        [recorded[j][1] for j in range(first, final + 1)],
        first_stage=first,
    )
    logger.info(
        "Task-agnostic (%s): accuracy %.2f, task selection %.2f",
        mode,
        report.overall_accuracy,
        report.task_selection_accuracy,
    )
    return report
