"""
Loss terms: classification, output regularization and target regularization.

The training objective for task ``t > 0`` is::

    L = L_current + beta * L_output + [target trainable] * lam * L_target

On the first task only ``L_current`` is used.
"""

from dataclasses import dataclass
from dataclasses import field
import logging

import numpy as np
import numpy.typing as npt

from .autodiff import FloatArray
from .autodiff import ParameterSet
from .autodiff import Tensor
from .autodiff import softmax_cross_entropy
from .exceptions import ConfigError
from .exceptions import ContractError
from .masking import SemiBinaryMask
from .networks import HypernetworkSpec
from .networks import hyper_raw


logger = logging.getLogger(__name__)


@dataclass(slots=True)
class RegularizationTargets:
    """
    Frozen references captured at the start of a task.

    Attributes
    ----------
    phi_star : ParameterSet
        Hypernetwork snapshot.
    stored_masks : dict[int, FloatArray]
        Flat unsparsified masks ``H(e_t', 0; phi_star)`` per previous task.
    embeddings : dict[int, FloatArray]
        Frozen embeddings of the previous tasks.
    theta_star : ParameterSet or None
        Target snapshot; present only when the target is trainable.
    """

    phi_star: ParameterSet
    stored_masks: dict[int, FloatArray] = field(default_factory=dict)
    embeddings: dict[int, FloatArray] = field(default_factory=dict)
    theta_star: ParameterSet | None = None

    @classmethod
    def capture(
        cls,
        phi: ParameterSet,
        embeddings: dict[int, FloatArray],
        spec: HypernetworkSpec,
        theta: ParameterSet | None = None,
    ) -> "RegularizationTargets":
        """
        Snapshot ``phi`` (and ``theta``) and compute the stored masks.

        Parameters
        ----------
        phi : ParameterSet
            Live hypernetwork parameters.
        embeddings : dict[int, FloatArray]
            Frozen embeddings of every previously trained task.
        spec : HypernetworkSpec
            Hypernetwork architecture.
        theta : ParameterSet, optional
            Live target parameters, snapshotted when given.
        """
        phi_star = phi.snapshot()
        frozen = {t: np.array(e, dtype=np.float64) for t, e in sorted(embeddings.items())}
        stored: dict[int, FloatArray] = {}
        if frozen:
            stacked = Tensor(np.stack(list(frozen.values())))
            raw = hyper_raw(stacked, phi_star, spec).data
            stored = {t: raw[row].copy() for row, t in enumerate(frozen)}
        return cls(
            phi_star=phi_star,
            stored_masks=stored,
            embeddings=frozen,
            theta_star=theta.snapshot() if theta is not None else None,
        )


@dataclass(slots=True)
class LossParts:
    """The three loss terms of one iteration; absent terms are ``None``."""

    current: Tensor
    output: Tensor | None = None
    target: Tensor | None = None

    def values(self) -> dict[str, float]:
        """Return the scalar value of every present term."""
        out = {"current": self.current.item()}
        if self.output is not None:
            out["output"] = self.output.item()
        if self.target is not None:
            out["target"] = self.target.item()
        return out


def current_loss(logits: Tensor, labels: npt.ArrayLike) -> Tensor:
    """Cross-entropy of the current task head."""
    return softmax_cross_entropy(logits, labels)


def output_regularizer(
    phi: ParameterSet,
    reg: RegularizationTargets,
    task: int,
    spec: HypernetworkSpec,
) -> Tensor:
    """
    Mean squared distance between stored and current unsparsified masks.

    Parameters
    ----------
    phi : ParameterSet
        Live hypernetwork parameters.
    reg : RegularizationTargets
        Stored masks and frozen embeddings of tasks ``0..task-1``.
    task : int
        Zero-based index of the task being trained.
    spec : HypernetworkSpec
        Hypernetwork architecture.

    Returns
    -------
    Tensor
        ``sum_t' ||H(e_t', 0; phi_star) - H(e_t', 0; phi)||^2 / task``.
        Gradients reach ``phi`` only; frozen embeddings enter as constants.

    Raises
    ------
    ContractError
        On the first task, or when a previous task has no stored mask.
    """
    if task < 1:
        raise ContractError("Output regularization needs at least one previous task")
    previous = list(range(task))
    missing = [t for t in previous if t not in reg.stored_masks]
    if missing:
        raise ContractError(f"No stored mask for task(s) {missing}")
    stacked = Tensor(np.stack([reg.embeddings[t] for t in previous]))
    stored = Tensor(np.stack([reg.stored_masks[t] for t in previous]))
    diff = hyper_raw(stacked, phi, spec) - stored
    return (diff * diff).sum() * (1.0 / task)


def target_regularizer(
    theta: ParameterSet,
    reg: RegularizationTargets,
    mask: SemiBinaryMask | None,
    masked: bool,
    *,
    absolute: bool = False,
) -> Tensor:
    """
    L1 distance of the target from its task-start snapshot.

    Parameters
    ----------
    theta : ParameterSet
        Live target parameters.
    reg : RegularizationTargets
        Must hold ``theta_star``.
    mask : SemiBinaryMask or None
        Current task mask, required when ``masked`` is true.
    masked : bool
        Weight every entry by the mask value.
    absolute : bool, default False
        Use ``|m|`` instead of the signed mask values.

    Returns
    -------
    Tensor
        ``sum |theta_star - theta|`` or ``sum m * |theta_star - theta|``.

    Raises
    ------
    ContractError
        If ``theta_star`` is missing, or a masked variant has no mask.
    """
    if reg.theta_star is None:
        raise ContractError("Target regularization needs a target snapshot")
    if masked and mask is None:
        raise ContractError("Masked target regularization needs the current mask")

    total: Tensor | None = None
    for name, param in theta.items():
        distance = (reg.theta_star[name] - param).abs()
        if masked and mask is not None:
            weight = mask.layers[name].abs() if absolute else mask.layers[name]
            distance = weight * distance
        term = distance.sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def total_loss(
    parts: LossParts,
    beta: float,
    lam: float,
    target_trainable: bool,
    task: int,
) -> Tensor:
    """
    Combine the loss terms for one iteration.

    Raises
    ------
    ConfigError
        If ``beta`` or ``lam`` is negative.
    ContractError
        If a term required on a later task is missing.
    """
    if beta < 0:
        raise ConfigError(f"beta must be non-negative, got {beta}", "beta")
    if lam < 0:
        raise ConfigError(f"lam must be non-negative, got {lam}", "lam")
    if task == 0:
        return parts.current

    if parts.output is None:
        raise ContractError("Output regularization term missing for a later task")
    loss = parts.current + parts.output * beta
    if target_trainable:
        if parts.target is None:
            raise ContractError("Target regularization term missing for a trainable target")
        loss = loss + parts.target * lam
    return loss
