"""masklet: continual learning with hypernetwork-generated semi-binary masks.

A hypernetwork maps a trainable task embedding to one mask value per
parameter of a shared target network. Masks are sparsified per layer by a
percentile threshold and multiplied into the target weights, so every task
trains its own subnetwork while regularizers keep earlier tasks' masks and
the shared weights in place.

Main capabilities:
- Minimal reverse-mode differentiation engine over numpy arrays
- Permuted and Split MNIST task streams read from IDX files
- Known-task evaluation, backward transfer and target-weight drift
- Task-agnostic inference by entropy or class-prototype distance
- CLI toolkit with Rich-powered terminal output and config presets
"""

__all__ = [
    "TrainConfig",
    "TrainedState",
    "build_tasks",
    "evaluate",
    "evaluate_task_agnostic",
    "get_preset",
    "list_presets",
    "load_mnist",
    "read_checkpoint",
    "resolve_config",
    "train_sequence",
    "train_task",
    "write_checkpoint",
]

__version__ = "0.3.0"

from .checkpoint import read_checkpoint
from .checkpoint import write_checkpoint
from .config import TrainConfig
from .config import get_preset
from .config import list_presets
from .config import resolve_config
from .datasets import build_tasks
from .datasets import load_mnist
from .inference import evaluate_task_agnostic
from .trainer import TrainedState
from .trainer import evaluate
from .trainer import train_sequence
from .trainer import train_task
