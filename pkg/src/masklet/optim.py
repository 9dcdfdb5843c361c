"""
Adam optimizer over named parameter arrays.
"""

from collections.abc import Mapping
from collections.abc import MutableMapping
from dataclasses import dataclass
from dataclasses import field
import logging

import numpy as np

from .autodiff import FloatArray
from .exceptions import ShapeError


logger = logging.getLogger(__name__)


@dataclass(slots=True)
class AdamState:
    """
    Moment estimates and step counter of one Adam run.

    Attributes
    ----------
    beta1, beta2 : float
        Exponential decay rates of the first and second moments.
    epsilon : float
        Denominator guard.
    step : int
        Number of updates applied so far.
    first_moment, second_moment : dict[str, FloatArray]
        Moments per parameter name, created lazily on the first update.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, FloatArray] = field(default_factory=dict)
    second_moment: dict[str, FloatArray] = field(default_factory=dict)

    def reset(self) -> None:
        """Forget all moments and restart the step counter."""
        self.step = 0
        self.first_moment.clear()
        self.second_moment.clear()


def optimizer_step(
    params: MutableMapping[str, FloatArray],
    grads: Mapping[str, FloatArray | None],
    state: AdamState,
    lr: float,
) -> None:
    """
    Apply one bias-corrected Adam update in place.

    Parameters
    ----------
    params : MutableMapping[str, FloatArray]
        Parameter arrays, updated in place.
    grads : Mapping[str, FloatArray or None]
        Gradient per parameter name; a missing or ``None`` gradient counts as
        zero, so the moments still decay.
    state : AdamState
        Moments, mutated in place.
    lr : float
        Learning rate.

    Raises
    ------
    ShapeError
        If a gradient shape differs from its parameter shape.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step

    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        elif grad.shape != value.shape:
            raise ShapeError(f"Gradient for '{name}' has the wrong shape", value.shape, grad.shape)

        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None or v is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v

        m_hat = m / correction1
        v_hat = v / correction2
        value -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
