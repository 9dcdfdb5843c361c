"""
Training configuration, presets and ``key = value`` config files.

A run is configured in three layers, each overriding the previous one:

1. a named preset (see :func:`list_presets`),
2. an optional config file of ``key = value`` lines,
3. command-line overrides.

Values read from text are coerced to the type of the field's default.
Additional presets can be registered via :func:`register_preset`.
"""

from collections.abc import Mapping
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from dataclasses import replace
import logging
from pathlib import Path
from typing import Any
from typing import Final

from .exceptions import ConfigError
from .exceptions import UnknownPresetError


logger = logging.getLogger(__name__)

DATASETS: Final[dict[str, int]] = {"permuted-mnist": 10, "split-mnist": 2}
"""Supported task streams and their classes per task."""

SPLIT_MNIST_TASKS: Final[int] = 5
ACTIVATIONS: Final[tuple[str, ...]] = ("elu", "relu", "tanh")
MODEL_SELECTION: Final[tuple[str, ...]] = ("last-iterate", "best-validation-loss")
INFERENCE_MODES: Final[tuple[str, ...]] = ("entropy", "fecam")

_TRUE: Final[frozenset[str]] = frozenset({"1", "true", "yes", "on"})
_FALSE: Final[frozenset[str]] = frozenset({"0", "false", "no", "off"})


@dataclass(slots=True)
class TrainConfig:
    """
    Every switch of a training run.

    Attributes
    ----------
    dataset : str
        ``permuted-mnist`` or ``split-mnist``.
    tasks : int
        Number of tasks in the stream.
    iterations : int
        Optimizer steps per task.
    batch_size : int
        Training mini-batch size.
    learning_rate : float
        Adam learning rate.
    beta : float
        Weight of the output regularizer.
    lam : float
        Weight of the target regularizer.
    sparsity : float
        Percentage ``p`` of mask entries zeroed per layer.
    masked_l1 : bool
        Weight the target regularizer by the current mask.
    l1_mask_absolute : bool
        Use ``|m|`` instead of the signed mask in the masked regularizer.
    target_trainable : bool
        Update the target network (``False`` keeps it at initialization).
    seed : int
        Seed of the run generator (initialization, permutations, batches).
    embedding_dim : int
        Task embedding size.
    hnet_hidden, target_hidden : tuple[int, ...]
        Hidden layer widths.
    hnet_activation, target_activation : str
        Hidden nonlinearities.
    validation_size : int
        Training samples held out per task.
    model_selection : str
        ``last-iterate`` or ``best-validation-loss``.
    validation_interval : int
        Iterations between validation-loss checks.
    lr_patience : int
        Checks without improvement before the learning rate is reduced;
        0 disables the plateau hook.
    lr_factor, lr_min : float
        Reduction factor and floor of the plateau hook.
    reset_optimizer : bool
        Reset the Adam moments at every task boundary.
    identity_first_permutation : bool
        Leave the first Permuted MNIST task unpermuted.
    augment : bool
        Data augmentation (not implemented; must stay off).
    eval_batch_size : int
        Batch size of evaluation passes.
    workers : int
        Threads used by evaluation fan-out.
    log_interval : int
        Iterations between loss log lines.
    track_drift : bool
        Keep a target snapshot after every task for the drift report.
    stage_inference : str
        Comma-separated task-agnostic modes scored after every task
        (``entropy``, ``fecam``); empty or ``none`` records no stages.
    """

    dataset: str = "split-mnist"
    tasks: int = 5
    iterations: int = 2000
    batch_size: int = 128
    learning_rate: float = 0.001
    beta: float = 0.001
    lam: float = 0.001
    sparsity: float = 30.0
    masked_l1: bool = True
    l1_mask_absolute: bool = False
    target_trainable: bool = True
    seed: int = 1
    embedding_dim: int = 64
    hnet_hidden: tuple[int, ...] = (10, 10)
    target_hidden: tuple[int, ...] = (100, 100)
    hnet_activation: str = "elu"
    target_activation: str = "elu"
    validation_size: int = 1000
    model_selection: str = "last-iterate"
    validation_interval: int = 100
    lr_patience: int = 0
    lr_factor: float = 0.5
    lr_min: float = 1e-6
    reset_optimizer: bool = True
    identity_first_permutation: bool = True
    augment: bool = False
    eval_batch_size: int = 1000
    workers: int = 4
    log_interval: int = 100
    track_drift: bool = True
    stage_inference: str = "entropy,fecam"

    @property
    def classes_per_task(self) -> int:
        """Width of one output head."""
        return DATASETS.get(self.dataset, 0)

    @property
    def stage_modes(self) -> tuple[str, ...]:
        """Task-agnostic modes recorded after every task."""
        names = [m.strip() for m in self.stage_inference.split(",")]
        return tuple(m for m in names if m and m != "none")

    def validate(self) -> "TrainConfig":
        """
        Check every value and return ``self``.

        Raises
        ------
        ConfigError
            Naming the first offending key.
        """
        if self.dataset not in DATASETS:
            raise ConfigError(
                f"Unknown dataset '{self.dataset}'. Supported: {', '.join(DATASETS)}",
                "dataset",
            )
        for key in (
            "tasks",
            "iterations",
            "batch_size",
            "embedding_dim",
            "validation_interval",
            "eval_batch_size",
            "workers",
            "log_interval",
        ):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}", key)
        if self.dataset == "split-mnist" and self.tasks > SPLIT_MNIST_TASKS:
            raise ConfigError(
                f"Split MNIST has at most {SPLIT_MNIST_TASKS} tasks, got {self.tasks}", "tasks"
            )
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive", "learning_rate")
        for key in ("beta", "lam", "lr_min"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative, got {getattr(self, key)}", key)
        if not 0.0 <= self.sparsity <= 100.0:
            raise ConfigError(f"sparsity must lie in [0, 100], got {self.sparsity}", "sparsity")
        if not self.target_hidden:
            raise ConfigError("The target network needs at least one hidden layer", "target_hidden")
        for key in ("hnet_hidden", "target_hidden"):
            if any(width < 1 for width in getattr(self, key)):
                raise ConfigError("Layer widths must be positive", key)
        for key in ("hnet_activation", "target_activation"):
            if getattr(self, key) not in ACTIVATIONS:
                raise ConfigError(
                    f"Unknown activation '{getattr(self, key)}'. "
                    f"Supported: {', '.join(ACTIVATIONS)}",
                    key,
                )
        if self.model_selection not in MODEL_SELECTION:
            raise ConfigError(
                f"Unknown model selection '{self.model_selection}'. "
                f"Supported: {', '.join(MODEL_SELECTION)}",
                "model_selection",
            )
        if self.validation_size < 0:
            raise ConfigError("validation_size must be non-negative", "validation_size")
        needs_validation = self.model_selection == "best-validation-loss" or self.lr_patience > 0
        if needs_validation and self.validation_size == 0:
            raise ConfigError(
                "Validation-based selection and the plateau hook need a validation split",
                "validation_size",
            )
        if self.lr_patience < 0:
            raise ConfigError("lr_patience must be non-negative", "lr_patience")
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError("lr_factor must lie in (0, 1)", "lr_factor")
        unknown = [m for m in self.stage_modes if m not in INFERENCE_MODES]
        if unknown:
            raise ConfigError(
                f"Unknown inference mode(s) {unknown}. "
                f"Supported: {', '.join(INFERENCE_MODES)}",
                "stage_inference",
            )
        if self.augment:
            raise ConfigError("Data augmentation is not implemented", "augment")
        return self

    def to_dict(self) -> dict[str, Any]:
        """Return the fields as a JSON-friendly dict (tuples become lists)."""
        return {
            k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()
        }

    @classmethod
    def from_mapping(
        cls, values: Mapping[str, Any], base: "TrainConfig | None" = None
    ) -> "TrainConfig":
        """
        Build a config from ``base`` with ``values`` applied on top.

        Keys may use dashes or underscores. String values are coerced to the
        type of the field they set; other values are taken as they are
        (lists become tuples).

        Raises
        ------
        ConfigError
            If a key is unknown or a value cannot be coerced.
        """
        start = base if base is not None else cls()
        known = {f.name for f in fields(cls)}
        updates: dict[str, Any] = {}
        for raw_key, value in values.items():
            key = raw_key.strip().replace("-", "_")
            if key not in known:
                raise ConfigError(f"Unknown configuration key '{raw_key}'", raw_key)
            updates[key] = _coerce(key, value, getattr(start, key))
        return replace(start, **updates)


def _coerce(key: str, value: Any, default: Any) -> Any:
    if not isinstance(value, str):
        if isinstance(default, tuple):
            return tuple(int(v) for v in value)
        return value
    text = value.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise ConfigError(
            f"Cannot read '{text}' as {type(default).__name__}", key
        ) from e
    return text


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def load_config_file(path: Path) -> dict[str, str]:
    """
    Read a flat ``key = value`` file.

    Blank lines and text after ``#`` are ignored.

    Raises
    ------
    ConfigError
        If a line has no ``=`` or the file cannot be read.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e

    values: dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"{path}:{number}: expected 'key = value', got '{content}'")
        key, value = content.split("=", 1)
        values[key.strip()] = value.strip()
    logger.debug("Read %d key(s) from %s", len(values), path)
    return values


def dump_config(cfg: TrainConfig, path: Path) -> None:
    """Write ``cfg`` as a ``key = value`` file that :func:`load_config_file` reads back."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(slots=True, frozen=True)
class Preset:
    """
    A named, ready-to-run configuration.

    Parameters
    ----------
    name : str
        Canonical preset name.
    config : TrainConfig
        The configuration it stands for.
    aliases : tuple[str, ...], default ()
        Other names that resolve to this preset.
    description : str, default ""
        One-line summary shown by ``masklet presets``.
    """

    name: str
    config: TrainConfig
    aliases: tuple[str, ...] = field(default_factory=tuple)
    description: str = ""


_PRESETS: Final[dict[str, Preset]] = {}


def register_preset(preset: Preset) -> None:
    """
    Register a preset under its name and every alias.

    Later registrations override earlier ones with the same name.
    """
    for name in (preset.name, *preset.aliases):
        _PRESETS[name.lower()] = preset


def list_presets() -> list[Preset]:
    """Return each registered preset once, sorted by name."""
    seen: dict[str, Preset] = {}
    for p in _PRESETS.values():
        seen[p.name] = p
    return sorted(seen.values(), key=lambda p: p.name)


def get_preset(name: str) -> Preset:
    """
    Look up a preset by name or alias (case-insensitive).

    Raises
    ------
    UnknownPresetError
        If no preset is registered under ``name``.
    """
    key = name.lower()
    if key not in _PRESETS:
        raise UnknownPresetError(name, sorted(_PRESETS))
    return _PRESETS[key]


def resolve_config(
    preset: str | None,
    config_path: Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> TrainConfig:
    """
    Layer preset, config file and overrides into a validated config.

    Parameters
    ----------
    preset : str or None
        Preset name; ``None`` starts from the :class:`TrainConfig` defaults.
    config_path : Path, optional
        ``key = value`` file applied on top of the preset.
    overrides : Mapping[str, Any], optional
        Final overrides, typically from the command line.

    Returns
    -------
    TrainConfig
        The validated configuration.
    """
    cfg = get_preset(preset).config if preset else TrainConfig()
    if config_path is not None:
        cfg = TrainConfig.from_mapping(load_config_file(config_path), base=cfg)
    if overrides:
        cfg = TrainConfig.from_mapping(overrides, base=cfg)
    return cfg.validate()


_PERMUTED_MNIST: Final[TrainConfig] = TrainConfig(
    dataset="permuted-mnist",
    tasks=10,
    iterations=5000,
    batch_size=128,
    learning_rate=0.001,
    beta=0.0005,
    lam=0.001,
    sparsity=0.0,
    masked_l1=True,
    embedding_dim=24,
    hnet_hidden=(100, 100),
    target_hidden=(1000, 1000),
    validation_size=5000,
)

_SPLIT_MNIST: Final[TrainConfig] = TrainConfig(
    dataset="split-mnist",
    tasks=5,
    iterations=2000,
    batch_size=128,
    learning_rate=0.001,
    beta=0.001,
    lam=0.001,
    sparsity=30.0,
    masked_l1=True,
    embedding_dim=128,
    hnet_hidden=(25, 25),
    target_hidden=(400, 400),
    validation_size=1000,
)

register_preset(
    Preset(
        "permuted-mnist-10",
        _PERMUTED_MNIST,
        aliases=("permuted-mnist",),
        description="Permuted MNIST, 10 tasks, full architecture",
    )
)
register_preset(
    Preset(
        "permuted-mnist-100",
        replace(_PERMUTED_MNIST, tasks=100, stage_inference="entropy"),
        description="Permuted MNIST, 100 tasks, full architecture",
    )
)
register_preset(
    Preset(
        "split-mnist",
        _SPLIT_MNIST,
        description="Split MNIST, 5 digit-pair tasks, full architecture",
    )
)
register_preset(
    Preset(
        "permuted-mnist-small",
        replace(
            _PERMUTED_MNIST,
            iterations=2000,
            hnet_hidden=(50, 50),
            target_hidden=(256, 256),
        ),
        description="Permuted MNIST, 10 tasks, CPU-sized networks",
    )
)
register_preset(
    Preset(
        "split-mnist-small",
        replace(
            _SPLIT_MNIST,
            embedding_dim=64,
            hnet_hidden=(10, 10),
            target_hidden=(100, 100),
        ),
        description="Split MNIST, 5 tasks, CPU-sized networks",
    )
)
register_preset(
    Preset(
        "permuted-mnist-fixed",
        replace(_PERMUTED_MNIST, target_trainable=False, beta=0.0001),
        description="Permuted MNIST with the target frozen at initialization",
    )
)
register_preset(
    Preset(
        "split-mnist-fixed",
        replace(_SPLIT_MNIST, target_trainable=False, beta=0.0001),
        description="Split MNIST with the target frozen at initialization",
    )
)
