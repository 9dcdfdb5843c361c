"""
Hypernetwork and multi-head target MLP.

The hypernetwork maps a task embedding to one tanh-activated value per target
parameter; the flat output is cut into tensors following the target layout and
sparsified per layer. The target network is an MLP whose every parameter
(weights and biases) is multiplied by the mask before the forward pass. Its
output layer holds one head of ``classes_per_task`` logits per task.

Parameter names follow ``layer{k}.weight`` (shape ``(fan_in, fan_out)``) and
``layer{k}.bias`` (shape ``(fan_out,)``) for both networks.
"""

from dataclasses import dataclass
import logging
import math

import numpy as np

from .autodiff import FloatArray
from .autodiff import ParameterSet
from .autodiff import Tensor
from .autodiff import elementwise
from .exceptions import ContractError
from .exceptions import ShapeError
from .masking import SemiBinaryMask
from .masking import SparsitySchedule
from .masking import apply_sigma_p
from .masking import modulate


logger = logging.getLogger(__name__)

Layout = tuple[tuple[str, tuple[int, ...]], ...]


def dense_layout(input_dim: int, hidden: tuple[int, ...], output_dim: int) -> Layout:
    """Return the ``(name, shape)`` layout of an MLP."""
    sizes = (input_dim, *hidden, output_dim)
    layout: list[tuple[str, tuple[int, ...]]] = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layout.append((f"layer{k}.weight", (fan_in, fan_out)))
        layout.append((f"layer{k}.bias", (fan_out,)))
    return tuple(layout)


@dataclass(slots=True, frozen=True)
class TargetSpec:
    """
    Architecture of the target classifier.

    Attributes
    ----------
    input_dim : int
        Flattened input size (1024 for padded MNIST).
    hidden : tuple[int, ...]
        Hidden layer widths.
    num_tasks : int
        Number of output heads.
    classes_per_task : int
        Width of each head.
    activation : str
        Hidden nonlinearity tag (``elu`` by default).
    """

    input_dim: int
    hidden: tuple[int, ...]
    num_tasks: int
    classes_per_task: int
    activation: str = "elu"

    @property
    def output_dim(self) -> int:
        """Width of the output layer, one slice per head."""
        return self.num_tasks * self.classes_per_task

    @property
    def num_layers(self) -> int:
        """Number of dense layers."""
        return len(self.hidden) + 1

    def layout(self) -> Layout:
        """Return the target parameter layout."""
        return dense_layout(self.input_dim, self.hidden, self.output_dim)

    def head_slice(self, task: int) -> slice:
        """Columns of the output layer belonging to ``task``."""
        if not 0 <= task < self.num_tasks:
            raise ContractError(f"Task {task} has no output head ({self.num_tasks} heads)")
        start = task * self.classes_per_task
        return slice(start, start + self.classes_per_task)


@dataclass(slots=True, frozen=True)
class HypernetworkSpec:
    """
    Architecture of the mask-generating hypernetwork.

    Attributes
    ----------
    embedding_dim : int
        Size ``N`` of the task embeddings.
    hidden : tuple[int, ...]
        Hidden layer widths; may be empty.
    output_layout : Layout
        Target parameter layout the output is reshaped into.
    activation : str
        Hidden nonlinearity tag.
    """

    embedding_dim: int
    hidden: tuple[int, ...]
    output_layout: Layout
    activation: str = "elu"

    @property
    def output_dim(self) -> int:
        """Number of output neurons (total target parameter count)."""
        return sum(math.prod(shape) for _, shape in self.output_layout)

    @property
    def num_layers(self) -> int:
        """Number of dense layers."""
        return len(self.hidden) + 1

    def layout(self) -> Layout:
        """Return the hypernetwork parameter layout."""
        return dense_layout(self.embedding_dim, self.hidden, self.output_dim)


@dataclass(slots=True)
class TaskEmbedding:
    """
    Trainable vector identifying one task.

    Frozen embeddings stop requiring gradients, so no optimizer ever sees them.
    """

    task: int
    vector: Tensor
    frozen: bool = False

    def freeze(self) -> None:
        """Stop training this embedding."""
        self.frozen = True
        self.vector.requires_grad = False
        self.vector.zero_grad()


def init_parameters(
    layout: Layout, rng: np.random.Generator, *, requires_grad: bool = True
) -> ParameterSet:
    """
    Initialize dense layers with uniform fan-in scaling.

    Weights are drawn from ``U(-sqrt(6 / fan_in), sqrt(6 / fan_in))``; biases
    start at zero. Layers are drawn in layout order.
    """
    params = ParameterSet()
    for name, shape in layout:
        if name.endswith(".weight"):
            bound = math.sqrt(6.0 / shape[0])
            value: FloatArray = rng.uniform(-bound, bound, size=shape)
        else:
            value = np.zeros(shape, dtype=np.float64)
        params.tensors[name] = Tensor(value, requires_grad=requires_grad)
    return params


def init_embedding(task: int, dim: int, rng: np.random.Generator) -> TaskEmbedding:
    """Draw a task embedding from a standard normal distribution."""
    return TaskEmbedding(task, Tensor(rng.standard_normal(dim), requires_grad=True))


def _mlp(
    x: Tensor, params: ParameterSet, num_layers: int, activation: str
) -> tuple[Tensor, Tensor]:
    """Run an MLP; return (last hidden activation, output pre-activation)."""
    h = x
    for k in range(num_layers - 1):
        h = elementwise(
            activation, h @ params[f"layer{k}.weight"] + params[f"layer{k}.bias"]
        )
    last = num_layers - 1
    out = h @ params[f"layer{last}.weight"] + params[f"layer{last}.bias"]
    return h, out


def hyper_raw(embeddings: Tensor, phi: ParameterSet, spec: HypernetworkSpec) -> Tensor:
    """
    Unsparsified hypernetwork output for one or more embeddings.

    Parameters
    ----------
    embeddings : Tensor
        Shape ``(N,)`` or ``(k, N)``.
    phi : ParameterSet
        Hypernetwork parameters.
    spec : HypernetworkSpec
        Architecture.

    Returns
    -------
    Tensor
        ``tanh`` output of shape ``(k, output_dim)``.
    """
    if embeddings.shape[-1] != spec.embedding_dim:
        raise ShapeError(
            "Embedding does not match the hypernetwork input",
            (spec.embedding_dim,),
            embeddings.shape,
        )
    batch = embeddings if embeddings.ndim == 2 else embeddings.reshape(1, spec.embedding_dim)
    _, out = _mlp(batch, phi, spec.num_layers, spec.activation)
    return out.tanh()


def split_output(flat: Tensor, layout: Layout) -> dict[str, Tensor]:
    """Cut a flat output row into tensors following ``layout``."""
    layers: dict[str, Tensor] = {}
    offset = 0
    for name, shape in layout:
        size = math.prod(shape)
        layers[name] = flat[offset : offset + size].reshape(*shape)
        offset += size
    return layers


def hyper_forward(
    embedding: TaskEmbedding | Tensor,
    phi: ParameterSet,
    spec: HypernetworkSpec,
    schedule: SparsitySchedule | None,
) -> SemiBinaryMask:
    """
    Generate the semi-binary mask for one task.

    Parameters
    ----------
    embedding : TaskEmbedding or Tensor
        Task embedding ``e``.
    phi : ParameterSet
        Hypernetwork parameters.
    spec : HypernetworkSpec
        Architecture, including the target layout.
    schedule : SparsitySchedule or None
        Sparsity in effect; ``None`` leaves every entry (``p = 0``).

    Returns
    -------
    SemiBinaryMask
        Mask tensors shaped like the target parameters, values in
        ``(-1, 1)`` with the thresholded entries exactly zero.
    """
    vector = embedding.vector if isinstance(embedding, TaskEmbedding) else embedding
    layers = split_output(hyper_raw(vector, phi, spec)[0], spec.output_layout)
    if schedule is None:
        return SemiBinaryMask(layers, 0.0)
    sparse = {name: apply_sigma_p(raw, schedule) for name, raw in layers.items()}
    return SemiBinaryMask(sparse, schedule.effective_ratio)


def _check_input(x: Tensor, spec: TargetSpec) -> None:
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(
            "Input batch does not match the target network",
            (x.shape[0] if x.ndim else 0, spec.input_dim),
            x.shape,
        )


def target_forward(
    x: Tensor | FloatArray,
    theta: ParameterSet,
    mask: SemiBinaryMask,
    task: int,
    spec: TargetSpec,
) -> Tensor:
    """
    Logits of one task head under the masked target parameters.

    Parameters
    ----------
    x : Tensor or FloatArray
        Input batch of shape ``(batch, input_dim)``.
    theta : ParameterSet
        Target parameters.
    mask : SemiBinaryMask
        Mask with the target layout.
    task : int
        Head to read.
    spec : TargetSpec
        Architecture.

    Returns
    -------
    Tensor
        Logits of shape ``(batch, classes_per_task)``.

    Raises
    ------
    ContractError
        If ``task`` has no head.
    """
    head = spec.head_slice(task)
    inputs = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(inputs, spec)
    _, out = _mlp(inputs, modulate(theta, mask), spec.num_layers, spec.activation)
    return out[:, head]


def hidden_features(
    x: Tensor | FloatArray,
    theta: ParameterSet,
    mask: SemiBinaryMask,
    spec: TargetSpec,
) -> Tensor:
    """Last hidden activation (the input to the output layer) under the mask."""
    inputs = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(inputs, spec)
    hidden, _ = _mlp(inputs, modulate(theta, mask), spec.num_layers, spec.activation)
    return hidden
