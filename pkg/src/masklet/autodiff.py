"""
Minimal reverse-mode differentiation over dense float64 tensors.

The graph is built on the fly (define-by-run): every operation returns a new
:class:`Tensor` holding its value, the parent tensors and a closure mapping
the upstream gradient to one gradient per parent. :meth:`Tensor.backward`
walks the graph once in reverse topological order and accumulates gradients
into leaf tensors (``+=``, never overwrite), so a subgraph shared by several
consumers receives the sum of their contributions.

Classes
-------
Tensor
    Value, gradient accumulator and graph node in one object.
ParameterSet
    Ordered, named collection of tensors (network weights, snapshots).

Functions
---------
matmul, elementwise, softmax_cross_entropy
    Differentiable operations used by the networks and losses.
softmax
    Row-wise softmax on plain arrays (evaluation only).
grad_check
    Central finite-difference check of analytic gradients.
"""

from collections.abc import Callable
from collections.abc import Iterator
from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field
import logging
from typing import Any
from typing import Final

import numpy as np
import numpy.typing as npt

from .exceptions import ContractError
from .exceptions import LabelRangeError
from .exceptions import NonFiniteError
from .exceptions import ShapeError
from .exceptions import UnsupportedOpError


logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
GradFn = Callable[[FloatArray], tuple[FloatArray | None, ...]]


def _as_float_array(data: Any) -> FloatArray:
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = arr.copy()
    return arr


class Tensor:
    """
    A dense float64 array that records how it was computed.

    Parameters
    ----------
    data : array_like
        Value of the tensor; converted to a C-contiguous float64 array.
    requires_grad : bool, default False
        Whether gradients should be accumulated into ``grad`` for this leaf.

    Attributes
    ----------
    data : FloatArray
        Row-major value.
    grad : FloatArray or None
        Gradient accumulator, same shape as ``data``; only leaves keep it.
    op : str
        Tag of the operation that produced the tensor (``"leaf"`` for inputs).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_grad_fn")

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        grad_fn: GradFn | None = None,
    ) -> None:
        self.data: FloatArray = _as_float_array(data)
        self.grad: FloatArray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._grad_fn = grad_fn

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, op={self.op!r}, "
            f"requires_grad={self.requires_grad})"
        )

    @property
    def shape(self) -> tuple[int, ...]:
        """Dimension sizes of the tensor."""
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        """Number of dimensions."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Total number of entries (product of ``shape``)."""
        return int(self.data.size)

    def item(self) -> float:
        """Return the value of a single-entry tensor as a Python float."""
        if self.size != 1:
            raise ContractError(f"item() needs a single entry, tensor has {self.size}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        """Drop the accumulated gradient."""
        self.grad = None

    def detach(self) -> "Tensor":
        """Return a constant tensor sharing this tensor's data."""
        return Tensor(self.data)

    # --- graph traversal ----------------------------------------------------

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: FloatArray | None = None) -> None:
        """
        Accumulate gradients of this tensor into every reachable leaf.

        Parameters
        ----------
        grad : FloatArray, optional
            Seed gradient. Required unless the tensor holds a single entry,
            in which case it defaults to one.

        Raises
        ------
        ContractError
            If no seed is given for a non-scalar tensor.
        """
        if grad is None:
            if self.size != 1:
                raise ContractError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        pending: dict[int, FloatArray] = {id(self): _as_float_array(grad)}
        for node in reversed(self._topological_order()):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._grad_fn(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = (
                    parent_grad if key not in pending else pending[key] + parent_grad
                )

    # --- operator sugar -----------------------------------------------------

    def __add__(self, other: Any) -> "Tensor":
        return elementwise("add", self, _lift(other))

    def __radd__(self, other: Any) -> "Tensor":
        return elementwise("add", _lift(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return elementwise("sub", self, _lift(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return elementwise("sub", _lift(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return elementwise("mul", self, _lift(other))

    def __rmul__(self, other: Any) -> "Tensor":
        return elementwise("mul", _lift(other), self)

    def __neg__(self) -> "Tensor":
        return elementwise("mul", self, Tensor(-1.0))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        shape = self.data.shape
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)

        def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
            full = np.zeros(shape, dtype=np.float64)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            return (full,)

        return _result(np.array(self.data[index]), "getitem", (self,), grad_fn)

    def reshape(self, *shape: int) -> "Tensor":
        """Return the same entries viewed with a new shape."""
        original = self.data.shape
        try:
            value = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"Cannot reshape {original} into {shape}") from e

        def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
            return (g.reshape(original),)

        return _result(value.copy(), "reshape", (self,), grad_fn)

    def sum(self, axis: int | None = None) -> "Tensor":
        """Sum all entries, or along one axis."""
        shape = self.data.shape

        def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _result(np.asarray(self.data.sum(axis=axis)), "sum", (self,), grad_fn)

    def mean(self, axis: int | None = None) -> "Tensor":
        """Average all entries, or along one axis."""
        count = self.size if axis is None else self.data.shape[axis]
        return self.sum(axis) * (1.0 / count)

    def tanh(self) -> "Tensor":
        """Elementwise hyperbolic tangent."""
        return elementwise("tanh", self)

    def elu(self) -> "Tensor":
        """Elementwise ELU with alpha = 1."""
        return elementwise("elu", self)

    def relu(self) -> "Tensor":
        """Elementwise rectifier."""
        return elementwise("relu", self)

    def abs(self) -> "Tensor":
        """Elementwise absolute value (subgradient 0 at 0)."""
        return elementwise("abs", self)


def _lift(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    value: FloatArray, op: str, parents: tuple[Tensor, ...], grad_fn: GradFn
) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    if any(p.requires_grad for p in parents):
        return Tensor(
            value, requires_grad=True, op=op, parents=parents, grad_fn=grad_fn
        )
    return Tensor(value, op=op)


def _unbroadcast(g: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return
    raise ShapeError(f"Operands of '{op}' do not broadcast", a.shape, b.shape)


# --- differentiable operations ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of two 2-D tensors.

    Parameters
    ----------
    a : Tensor
        Left operand, shape ``(m, k)``.
    b : Tensor
        Right operand, shape ``(k, n)``.

    Returns
    -------
    Tensor
        Product of shape ``(m, n)``.

    Raises
    ------
    ShapeError
        If either operand is not 2-D or the inner dimensions differ.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("Inner dimensions of matmul do not agree", a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return g @ b_data.T, a_data.T @ g

    return _result(a_data @ b_data, "matmul", (a, b), grad_fn)


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), grad_fn)


def _sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), grad_fn)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    a_data, b_data = a.data, b.data

    def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _result(a_data * b_data, "mul", (a, b), grad_fn)


def _tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return (g * (1.0 - out * out),)

    return _result(out, "tanh", (a,), grad_fn)


ELU_ALPHA: Final[float] = 1.0


def _elu(a: Tensor) -> Tensor:
    x = a.data
    negative = np.minimum(x, 0.0)
    out = np.where(x > 0, x, ELU_ALPHA * np.expm1(negative))

    def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return (g * np.where(x > 0, 1.0, ELU_ALPHA * np.exp(negative)),)

    return _result(out, "elu", (a,), grad_fn)


def _relu(a: Tensor) -> Tensor:
    x = a.data

    def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return (g * (x > 0),)

    return _result(np.maximum(x, 0.0), "relu", (a,), grad_fn)


def _abs(a: Tensor) -> Tensor:
    x = a.data

    def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return (g * np.sign(x),)

    return _result(np.abs(x), "abs", (a,), grad_fn)


_UNARY_OPS: Final[dict[str, Callable[[Tensor], Tensor]]] = {
    "tanh": _tanh,
    "elu": _elu,
    "relu": _relu,
    "abs": _abs,
}

_BINARY_OPS: Final[dict[str, Callable[[Tensor, Tensor], Tensor]]] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
}


def elementwise(op_tag: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """
    Apply a registered elementwise operation.

    Parameters
    ----------
    op_tag : str
        One of ``add``, ``sub``, ``mul`` (binary) or ``tanh``, ``elu``,
        ``relu``, ``abs`` (unary).
    a : Tensor
        First operand.
    b : Tensor, optional
        Second operand for binary tags. Shapes must be equal, or one operand
        must match the other without its leading (batch) dimension, or be a
        scalar.

    Returns
    -------
    Tensor
        Result tensor wired into the graph.

    Raises
    ------
    UnsupportedOpError
        If ``op_tag`` is not registered.
    ContractError
        If a binary tag is called without a second operand.
    ShapeError
        If binary operands do not broadcast.
    """
    if op_tag in _UNARY_OPS:
        return _UNARY_OPS[op_tag](a)
    if op_tag in _BINARY_OPS:
        if b is None:
            raise ContractError(f"Operation '{op_tag}' needs two operands")
        return _BINARY_OPS[op_tag](a, b)
    raise UnsupportedOpError(op_tag, sorted([*_UNARY_OPS, *_BINARY_OPS]))


def softmax(logits: FloatArray) -> FloatArray:
    """Row-wise softmax of a plain array, stabilized by max-subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: npt.ArrayLike) -> Tensor:
    """
    Mean negative log-likelihood of integer labels under softmax(logits).

    Parameters
    ----------
    logits : Tensor
        Scores of shape ``(batch, classes)``.
    labels : array_like of int
        Class index per row, each in ``[0, classes)``.

    Returns
    -------
    Tensor
        Scalar loss.

    Raises
    ------
    ShapeError
        If ``logits`` is not 2-D or labels do not match the batch size.
    LabelRangeError
        If a label is outside ``[0, classes)``.
    """
    if logits.ndim != 2:
        raise ShapeError("Logits must be 2-D (batch x classes)")
    batch, classes = logits.shape
    label_idx = np.asarray(labels, dtype=np.int64)
    if label_idx.shape != (batch,):
        raise ShapeError("Labels do not match the batch", (batch,), label_idx.shape)
    out_of_range = (label_idx < 0) | (label_idx >= classes)
    if out_of_range.any():
        raise LabelRangeError(int(label_idx[out_of_range][0]), classes)

    rows = np.arange(batch)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    value = np.asarray((log_norm - shifted[rows, label_idx]).mean())

    def grad_fn(g: FloatArray) -> tuple[FloatArray | None, ...]:
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, label_idx] -= 1.0
        return (g * probs / batch,)

    return _result(value, "softmax_cross_entropy", (logits,), grad_fn)


# --- parameter collections --------------------------------------------------


@dataclass(slots=True)
class ParameterSet:
    """
    Ordered collection of named tensors.

    Used for hypernetwork weights, target weights and their frozen snapshots.
    Iteration order is insertion order and defines the parameter layout.
    """

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def items(self) -> Iterator[tuple[str, Tensor]]:
        """Iterate over ``(name, tensor)`` pairs in layout order."""
        return iter(self.tensors.items())

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Return the ``(name, shape)`` layout."""
        return [(name, t.shape) for name, t in self.tensors.items()]

    @property
    def num_parameters(self) -> int:
        """Total number of scalar entries."""
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, FloatArray]:
        """Return the underlying arrays (shared, not copied)."""
        return {name: t.data for name, t in self.tensors.items()}

    def snapshot(self) -> "ParameterSet":
        """Return a frozen deep copy: constant tensors with copied data."""
        return ParameterSet({n: Tensor(t.data.copy()) for n, t in self.tensors.items()})

    def detach(self) -> "ParameterSet":
        """Return constant tensors sharing this set's data."""
        return ParameterSet({n: t.detach() for n, t in self.tensors.items()})

    def zero_grad(self) -> None:
        """Drop every accumulated gradient."""
        for t in self.tensors.values():
            t.zero_grad()

    @classmethod
    def from_arrays(
        cls, arrays: Mapping[str, npt.ArrayLike], *, requires_grad: bool = False
    ) -> "ParameterSet":
        """Build a set of leaf tensors from named arrays."""
        return cls(
            {
                name: Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad)
                for name, value in arrays.items()
            }
        )


def grad_check(
    f: Callable[[], Tensor], params: ParameterSet, eps: float = 1e-5
) -> float:
    """
    Compare analytic gradients with central finite differences.

    Parameters
    ----------
    f : callable
        Builds a fresh graph from the current values of ``params`` and returns
        a scalar tensor. Called ``2 * params.num_parameters + 1`` times.
    params : ParameterSet
        Leaves to check. Their data is perturbed in place and restored.
    eps : float, default 1e-5
        Finite-difference step.

    Returns
    -------
    float
        ``max |analytic - cd| / max(|analytic|, |cd|, 1e-12)`` over all entries.

    Raises
    ------
    ContractError
        If ``f`` does not return a single-entry tensor.
    """
    params.zero_grad()
    out = f()
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()

    worst = 0.0
    for name, tensor in params.items():
        analytic = (
            tensor.grad.reshape(-1)
            if tensor.grad is not None
            else np.zeros(tensor.size)
        )
        flat = tensor.data.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + eps
            plus = f().item()
            flat[k] = original - eps
            minus = f().item()
            flat[k] = original
            numeric = (plus - minus) / (2.0 * eps)
            scale = max(abs(analytic[k]), abs(numeric), 1e-12)
            error = abs(analytic[k] - numeric) / scale
            if error > worst:
                logger.debug("grad_check %s[%d]: rel. error %.3e", name, k, error)
                worst = error
    params.zero_grad()
    return worst
