"""
Semi-binary masks: percentile thresholding and elementwise modulation.

A hypernetwork emits one tanh-activated value per target parameter. Per target
layer, the entries whose magnitude does not exceed the ``r``-th percentile of
the layer's magnitudes are set to exactly zero; the remaining entries keep
their signed value. On the first task ``r`` ramps linearly from 0 to ``p``
over the task's iterations; afterwards it stays at ``p``.
"""

from dataclasses import dataclass
import logging
import math
from typing import Final

import numpy as np
import numpy.typing as npt

from .autodiff import FloatArray
from .autodiff import ParameterSet
from .autodiff import Tensor
from .exceptions import ContractError
from .exceptions import ShapeError


logger = logging.getLogger(__name__)

#: Threshold meaning "zero nothing": ``|w| <= -inf`` never holds.
KEEP_ALL: Final[float] = -math.inf


@dataclass(slots=True, frozen=True)
class SparsitySchedule:
    """
    Sparsity ratio in effect at one training iteration.

    Attributes
    ----------
    sparsity : float
        Target ratio ``p`` in percent, ``0 <= p <= 100``.
    iterations : int
        Iterations per task ``n``.
    task : int
        Zero-based task index; task 0 uses the ramp.
    iteration : int
        One-based iteration index ``i`` within the task.
    """

    sparsity: float
    iterations: int
    task: int
    iteration: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.sparsity <= 100.0:
            raise ContractError(f"Sparsity must lie in [0, 100], got {self.sparsity}")
        if self.iterations < 1:
            raise ContractError(f"Iterations must be positive, got {self.iterations}")

    @property
    def effective_ratio(self) -> float:
        """Ratio ``p`` after the first task, ``(i / n) * p`` during it, clamped."""
        if self.task > 0:
            return self.sparsity
        ramp = self.iteration / self.iterations * self.sparsity
        return min(max(ramp, 0.0), self.sparsity)

    @classmethod
    def at_full(cls, sparsity: float) -> "SparsitySchedule":
        """Schedule whose ramp has completed (used for evaluation)."""
        return cls(sparsity=sparsity, iterations=1, task=0, iteration=1)


@dataclass(slots=True)
class SemiBinaryMask:
    """
    Per-layer multipliers for the target parameters.

    Attributes
    ----------
    layers : dict[str, Tensor]
        One tensor per target parameter, in target layout order.
    sparsity_applied : float
        Ratio (percent) used to zero entries; 0 means nothing was zeroed.
    """

    layers: dict[str, Tensor]
    sparsity_applied: float = 0.0

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Return the ``(name, shape)`` layout."""
        return [(name, t.shape) for name, t in self.layers.items()]

    def flat(self) -> FloatArray:
        """Concatenate every layer into one vector."""
        return np.concatenate([t.data.reshape(-1) for t in self.layers.values()])

    def zero_fraction(self) -> float:
        """Fraction of entries that are exactly zero."""
        values = self.flat()
        return float(np.count_nonzero(values == 0.0) / values.size)

    @classmethod
    def filled(
        cls, layout: list[tuple[str, tuple[int, ...]]], value: float
    ) -> "SemiBinaryMask":
        """Constant mask over ``layout`` (all ones is the identity mask)."""
        return cls({name: Tensor(np.full(shape, value)) for name, shape in layout})


def percentile_threshold(values: Tensor | npt.ArrayLike, ratio: float) -> float:
    """
    Threshold below or at which mask entries are zeroed.

    Parameters
    ----------
    values : Tensor or array_like
        One mask layer.
    ratio : float
        Percentile in ``[0, 100]``.

    Returns
    -------
    float
        The ``ratio``-th percentile of ``|values|`` with linear interpolation
        between order statistics, or :data:`KEEP_ALL` when ``ratio == 0``.

    Raises
    ------
    ContractError
        If the layer is empty or the ratio is out of range.
    """
    data = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    if data.size == 0:
        raise ContractError("Cannot threshold an empty mask layer")
    if not 0.0 <= ratio <= 100.0:
        raise ContractError(f"Percentile ratio must lie in [0, 100], got {ratio}")
    if ratio == 0.0:
        return KEEP_ALL
    return float(np.percentile(np.abs(data), ratio, method="linear"))


def apply_threshold(raw: Tensor, threshold: float) -> Tensor:
    """Zero the entries with ``|w| <= threshold``; pass the others through."""
    if threshold == KEEP_ALL:
        return raw
    keep = (np.abs(raw.data) > threshold).astype(np.float64)
    return raw * Tensor(keep)


def apply_sigma_p(raw: Tensor, schedule: SparsitySchedule) -> Tensor:
    """
    Sparsify one tanh-activated hypernetwork output layer.

    Parameters
    ----------
    raw : Tensor
        Hypernetwork output for one target layer.
    schedule : SparsitySchedule
        Provides the effective ratio for the current task and iteration.

    Returns
    -------
    Tensor
        ``raw`` with entries at or below the percentile threshold zeroed.
        Gradients flow through the kept entries only.
    """
    return apply_threshold(raw, percentile_threshold(raw, schedule.effective_ratio))


def modulate(target: ParameterSet, mask: SemiBinaryMask) -> ParameterSet:
    """
    Multiply target parameters by the mask, entry by entry.

    Raises
    ------
    ShapeError
        If the mask layout differs from the target layout.
    """
    if target.layout() != mask.layout():
        raise ShapeError(
            "Mask layout does not match target layout: "
            f"{mask.layout()} vs {target.layout()}"
        )
    return ParameterSet({name: t * mask.layers[name] for name, t in target.items()})
