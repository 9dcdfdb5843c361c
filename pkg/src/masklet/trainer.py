"""
Sequential task training.

Each task runs a fixed number of Adam iterations over mini-batches sampled
with replacement. On every task after the first, the hypernetwork (and, when
trainable, the target) is snapshotted at task start and the unsparsified
masks of all previous tasks are stored; the regularizers keep the live
networks close to these references while the new task is learned. The task
embedding is frozen once its task ends.
"""

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field
import logging
import math
import time
from typing import TYPE_CHECKING
from typing import Protocol

import numpy as np

from .autodiff import FloatArray
from .autodiff import ParameterSet
from .autodiff import Tensor
from .config import TrainConfig
from .datasets import INPUT_DIM
from .datasets import Split
from .datasets import TaskDataset
from .exceptions import ContractError
from .exceptions import DivergenceError
from .exceptions import NonFiniteError
from .losses import LossParts
from .losses import RegularizationTargets
from .losses import current_loss
from .losses import output_regularizer
from .losses import target_regularizer
from .losses import total_loss
from .masking import SemiBinaryMask
from .masking import SparsitySchedule
from .metrics import AccuracyMatrix
from .metrics import check_drift_monotone
from .networks import HypernetworkSpec
from .networks import TargetSpec
from .networks import TaskEmbedding
from .networks import hyper_forward
from .networks import hyper_raw
from .networks import init_embedding
from .networks import init_parameters
from .networks import target_forward
from .optim import AdamState
from .optim import optimizer_step


if TYPE_CHECKING:
    from .inference import ClassPrototype

logger = logging.getLogger(__name__)


@dataclass(slots=True, frozen=True)
class LossRecord:
    """Loss terms of one training iteration."""

    task: int
    iteration: int
    total: float
    current: float
    output: float | None
    target: float | None
    learning_rate: float


class ReportSink(Protocol):
    """Receiver of training progress (the CLI renders it)."""

    def on_iteration(self, record: LossRecord) -> None:
        """Handle one iteration's losses."""
        ...

    def on_task_end(self, task: int, accuracies: list[float]) -> None:
        """Handle the accuracy row recorded after ``task``."""
        ...


@dataclass(slots=True)
class TrainedState:
    """
    Everything a run produces and needs to continue.

    Attributes
    ----------
    config : TrainConfig
        Configuration of the run.
    target_spec, hnet_spec : TargetSpec, HypernetworkSpec
        Architectures.
    phi, theta : ParameterSet
        Live hypernetwork and target parameters.
    embeddings : list[TaskEmbedding]
        One embedding per task; embeddings of trained tasks are frozen.
    stored_masks : dict[int, FloatArray]
        Flat unsparsified masks of the trained tasks.
    rng : numpy.random.Generator
        Run generator (batch sampling continues from it).
    accuracy : AccuracyMatrix
        Known-task test accuracies after each task.
    trained_tasks : int
        Number of completed tasks.
    loss_log : list[LossRecord]
        Per-iteration losses.
    task_seconds : list[float]
        Wall-clock training time per task.
    target_history : list[dict[str, FloatArray]]
        Target parameters after each task (drift report).
    prototypes : dict[int, ClassPrototype]
        Class prototypes for task-agnostic inference, keyed by global class.
    stage_results : dict[str, dict[int, tuple[float, float]]]
        Task-agnostic accuracy and task-selection accuracy per mode, keyed by
        the zero-based stage after which they were scored.
    optimizer : AdamState
        Adam moments.
    """

    config: TrainConfig
    target_spec: TargetSpec
    hnet_spec: HypernetworkSpec
    phi: ParameterSet
    theta: ParameterSet
    embeddings: list[TaskEmbedding]
    rng: np.random.Generator
    accuracy: AccuracyMatrix
    stored_masks: dict[int, FloatArray] = field(default_factory=dict)
    trained_tasks: int = 0
    loss_log: list[LossRecord] = field(default_factory=list)
    task_seconds: list[float] = field(default_factory=list)
    target_history: list[dict[str, FloatArray]] = field(default_factory=list)
    prototypes: "dict[int, ClassPrototype]" = field(default_factory=dict)
    stage_results: dict[str, dict[int, tuple[float, float]]] = field(default_factory=dict)
    optimizer: AdamState = field(default_factory=AdamState)

    def task_mask(self, task: int) -> SemiBinaryMask:
        """Constant mask of ``task`` at full sparsity, for evaluation."""
        return hyper_forward(
            Tensor(self.embeddings[task].vector.data),
            self.phi.detach(),
            self.hnet_spec,
            SparsitySchedule.at_full(self.config.sparsity),
        )

    def global_class(self, task: int, local: np.ndarray) -> np.ndarray:
        """Map local labels of ``task`` to global class ids."""
        return task * self.target_spec.classes_per_task + local


def build_specs(
    cfg: TrainConfig, input_dim: int = INPUT_DIM
) -> tuple[TargetSpec, HypernetworkSpec]:
    """Target and hypernetwork architectures described by ``cfg``."""
    target_spec = TargetSpec(
        input_dim,
        tuple(cfg.target_hidden),
        cfg.tasks,
        cfg.classes_per_task,
        cfg.target_activation,
    )
    hnet_spec = HypernetworkSpec(
        cfg.embedding_dim, tuple(cfg.hnet_hidden), target_spec.layout(), cfg.hnet_activation
    )
    return target_spec, hnet_spec


def init_state(cfg: TrainConfig, *, input_dim: int = INPUT_DIM) -> TrainedState:
    """
    Initialize networks and embeddings from ``cfg.seed``.

    The run generator draws, in order: the hypernetwork, the target network,
    all task embeddings. Batch sampling continues from the same generator.
    """
    rng = np.random.default_rng(cfg.seed)
    target_spec, hnet_spec = build_specs(cfg, input_dim)
    phi = init_parameters(hnet_spec.layout(), rng)
    theta = init_parameters(target_spec.layout(), rng, requires_grad=cfg.target_trainable)
    embeddings = [init_embedding(t, cfg.embedding_dim, rng) for t in range(cfg.tasks)]
    logger.info(
        "Initialized hypernetwork (%d parameters) and target (%d parameters)",
        phi.num_parameters,
        theta.num_parameters,
    )
    return TrainedState(
        config=cfg,
        target_spec=target_spec,
        hnet_spec=hnet_spec,
        phi=phi,
        theta=theta,
        embeddings=embeddings,
        rng=rng,
        accuracy=AccuracyMatrix.empty(cfg.tasks),
    )


def _trainable(state: TrainedState, task: int) -> dict[str, Tensor]:
    params = {f"phi/{name}": t for name, t in state.phi.items()}
    params[f"embedding/{task}"] = state.embeddings[task].vector
    if state.config.target_trainable:
        params.update({f"theta/{name}": t for name, t in state.theta.items()})
    return params


def _flat_mask(state: TrainedState, task: int) -> FloatArray:
    vector = Tensor(state.embeddings[task].vector.data)
    return hyper_raw(vector, state.phi.detach(), state.hnet_spec).data[0].copy()


def validation_loss(state: TrainedState, task: int, split: Split) -> float:
    """
    Cross-entropy of ``task`` on ``split`` with the mask at full sparsity.

    Uses the live embedding, so it works while the task is being trained.
    """
    if len(split) == 0:
        raise ContractError("Validation split is empty")
    mask = state.task_mask(task)
    theta = state.theta.detach()
    total = 0.0
    for x, y in split.chunks(state.config.eval_batch_size):
        logits = target_forward(x, theta, mask, task, state.target_spec)
        total += current_loss(logits, y).item() * len(y)
    return total / len(split)


def _iteration_loss(
    state: TrainedState,
    task: int,
    x: FloatArray,
    y: np.ndarray,
    schedule: SparsitySchedule,
    reg: RegularizationTargets | None,
) -> tuple[Tensor, LossParts]:
    cfg = state.config
    mask = hyper_forward(state.embeddings[task], state.phi, state.hnet_spec, schedule)
    logits = target_forward(x, state.theta, mask, task, state.target_spec)
    parts = LossParts(current_loss(logits, y))
    if task > 0 and reg is not None:
        parts.output = output_regularizer(state.phi, reg, task, state.hnet_spec)
        if cfg.target_trainable:
            parts.target = target_regularizer(
                state.theta, reg, mask, cfg.masked_l1, absolute=cfg.l1_mask_absolute
            )
    return total_loss(parts, cfg.beta, cfg.lam, cfg.target_trainable, task), parts


def train_task(
    state: TrainedState,
    task: int,
    data: TaskDataset,
    sink: ReportSink | None = None,
) -> TrainedState:
    """
    Train one task and freeze its embedding.

    Parameters
    ----------
    state : TrainedState
        Run state with tasks ``0..task-1`` trained; mutated in place.
    task : int
        Zero-based task index.
    data : TaskDataset
        Task splits; mini-batches are sampled from ``data.train``.
    sink : ReportSink, optional
        Receives every :class:`LossRecord`.

    Returns
    -------
    TrainedState
        The same ``state``.

    Raises
    ------
    ContractError
        If ``task`` is not the next untrained task.
    DivergenceError
        If an iteration or a validation pass produces non-finite values.
    """
    if task != state.trained_tasks:
        raise ContractError(
            f"Task {task + 1} cannot be trained after {state.trained_tasks} task(s)"
        )
    if task >= len(state.embeddings):
        raise ContractError(f"Task {task + 1} exceeds the configured {len(state.embeddings)} tasks")
    if len(data.train) == 0:
        raise ContractError(f"Task {task + 1} has no training samples")

    cfg = state.config
    started = time.perf_counter()
    if cfg.reset_optimizer or task == 0:
        state.optimizer.reset()

    reg: RegularizationTargets | None = None
    if task > 0:
        frozen = {t: state.embeddings[t].vector.data for t in range(task)}
        reg = RegularizationTargets.capture(
            state.phi,
            frozen,
            state.hnet_spec,
            state.theta if cfg.target_trainable else None,
        )
        state.stored_masks.update(reg.stored_masks)

    logger.info("Training task %d/%d (%d iterations)", task + 1, cfg.tasks, cfg.iterations)
    params = _trainable(state, task)
    lr = cfg.learning_rate
    track_validation = (
        cfg.model_selection == "best-validation-loss" or cfg.lr_patience > 0
    ) and len(data.validation) > 0
    best_loss = math.inf
    best: dict[str, FloatArray] | None = None
    stale = 0

    for i in range(1, cfg.iterations + 1):
        idx = state.rng.integers(0, len(data.train), size=cfg.batch_size)
        x, y = data.train.batch(idx)
        schedule = SparsitySchedule(cfg.sparsity, cfg.iterations, task, i)
        for t in params.values():
            t.zero_grad()
        try:
            loss, parts = _iteration_loss(state, task, x, y, schedule, reg)
            loss.backward()
        except NonFiniteError as e:
            raise DivergenceError(task, i) from e

        optimizer_step(
            {k: t.data for k, t in params.items()},
            {k: t.grad for k, t in params.items()},
            state.optimizer,
            lr,
        )
        values = parts.values()
        record = LossRecord(
            task=task,
            iteration=i,
            total=loss.item(),
            current=values["current"],
            output=values.get("output"),
            target=values.get("target"),
            learning_rate=lr,
        )
        state.loss_log.append(record)
        if sink is not None:
            sink.on_iteration(record)
        if i % cfg.log_interval == 0:
            logger.info(
                "task %d iter %d: loss %.5f (current %.5f, output %s, target %s)",
                task + 1,
                i,
                record.total,
                record.current,
                "-" if record.output is None else f"{record.output:.3e}",
                "-" if record.target is None else f"{record.target:.3e}",
            )

        if track_validation and (i % cfg.validation_interval == 0 or i == cfg.iterations):
            try:
                v_loss = validation_loss(state, task, data.validation)
            except NonFiniteError as e:
                raise DivergenceError(task, i) from e
            logger.debug("task %d iter %d: validation loss %.5f", task + 1, i, v_loss)
            if v_loss < best_loss:
                best_loss = v_loss
                stale = 0
                if cfg.model_selection == "best-validation-loss":
                    best = {k: t.data.copy() for k, t in params.items()}
            else:
                stale += 1
                if cfg.lr_patience and stale >= cfg.lr_patience:
                    reduced = max(lr * cfg.lr_factor, cfg.lr_min)
                    if reduced < lr:
                        logger.info(
                            "task %d iter %d: learning rate %.2e -> %.2e",
                            task + 1,
                            i,
                            lr,
                            reduced,
                        )
                        lr = reduced
                    stale = 0

    if best is not None:
        for k, t in params.items():
            np.copyto(t.data, best[k])
        logger.info("Task %d: restored model with validation loss %.5f", task + 1, best_loss)

    state.embeddings[task].freeze()
    for t in params.values():
        t.zero_grad()
    state.stored_masks[task] = _flat_mask(state, task)
    if cfg.track_drift:
        state.target_history.append({n: a.copy() for n, a in state.theta.arrays().items()})
    state.trained_tasks += 1
    state.task_seconds.append(time.perf_counter() - started)
    logger.info("Task %d done in %.1fs", task + 1, state.task_seconds[-1])
    return state


def evaluate(state: TrainedState, task: int, split: Split) -> float:
    """
    Known-task accuracy (percent) of head ``task`` on ``split``.

    Raises
    ------
    ContractError
        If ``task`` has not been trained or the split is empty.
    """
    if not 0 <= task < state.trained_tasks:
        raise ContractError(f"Task {task + 1} has not been trained")
    if len(split) == 0:
        raise ContractError(f"Task {task + 1} has an empty evaluation split")
    mask = state.task_mask(task)
    theta = state.theta.detach()
    correct = 0
    for x, y in split.chunks(state.config.eval_batch_size):
        logits = target_forward(x, theta, mask, task, state.target_spec).data
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == y))
    return 100.0 * correct / len(split)


def evaluate_all(
    state: TrainedState, tasks: Sequence[TaskDataset], split: str = "test"
) -> list[float]:
    """Accuracy on every given task, evaluated on worker threads, in task order."""
    with ThreadPoolExecutor(max_workers=state.config.workers) as pool:
        return list(
            pool.map(lambda d: evaluate(state, d.task_id, d.split(split)), tasks)
        )


def train_sequence(
    tasks: Sequence[TaskDataset],
    cfg: TrainConfig,
    *,
    state: TrainedState | None = None,
    sink: ReportSink | None = None,
) -> TrainedState:
    """
    Train all tasks in order, recording results after each.

    After every task the known-task accuracy row is recorded, and each mode
    of ``cfg.stage_modes`` is scored task-agnostically on the tasks seen so
    far (see :func:`masklet.inference.record_stage`).

    Parameters
    ----------
    tasks : Sequence[TaskDataset]
        Task stream, at most ``cfg.tasks`` long.
    cfg : TrainConfig
        Run configuration.
    state : TrainedState, optional
        Pre-initialized state (defaults to :func:`init_state`). Training
        continues after its ``trained_tasks`` completed tasks.
    sink : ReportSink, optional
        Progress receiver.

    Raises
    ------
    ContractError
        If ``tasks`` is empty or longer than ``cfg.tasks``.
    """
    from .inference import record_stage

    if not tasks:
        raise ContractError("At least one task is required")
    if len(tasks) > cfg.tasks:
        raise ContractError(f"{len(tasks)} tasks given, configured for {cfg.tasks}")
    if state is None:
        input_dim = tasks[0].train.base.shape[1]
        state = init_state(cfg, input_dim=input_dim)
    elif state.trained_tasks:
        logger.info("Resuming after %d trained task(s)", state.trained_tasks)

    for t in range(state.trained_tasks, len(tasks)):
        train_task(state, t, tasks[t], sink)
        row = evaluate_all(state, tasks[: t + 1])
        state.accuracy.record_row(t, row)
        logger.info(
            "After task %d: %s",
            t + 1,
            ", ".join(f"{a:.2f}" for a in row),
        )
        record_stage(state, tasks)
        if sink is not None:
            sink.on_task_end(t, row)

    if cfg.track_drift and len(state.target_history) > 1 and cfg.target_trainable:
        check_drift_monotone(state.target_history)
    return state
