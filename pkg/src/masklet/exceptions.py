"""
Custom exceptions for masklet training, inference and I/O.
"""


class MaskletError(Exception):
    """Base exception for all masklet-related errors."""

    def __init__(self, message: str, path: str | None = None) -> None:
        self.path = path
        if path:
            super().__init__(f"{message} (file: {path})")
        else:
            super().__init__(message)


class ShapeError(MaskletError):
    """Raised when tensor shapes or parameter layouts do not agree."""

    def __init__(
        self,
        message: str,
        expected: tuple[int, ...] | None = None,
        found: tuple[int, ...] | None = None,
    ) -> None:
        if expected is not None and found is not None:
            full_message = f"{message}. Expected shape: {expected}, found: {found}"
        else:
            full_message = message
        super().__init__(full_message)
        self.expected = expected
        self.found = found


class UnsupportedOpError(MaskletError):
    """Raised when an elementwise operation tag is not registered."""

    def __init__(self, op_tag: str, supported: list[str]) -> None:
        message = (
            f"Operation '{op_tag}' is not supported. "
            f"Supported operations: {', '.join(supported)}"
        )
        super().__init__(message)
        self.op_tag = op_tag


class ContractError(MaskletError):
    """Raised when a caller violates an operation's precondition."""


class LabelRangeError(ContractError, IndexError):
    """Raised when a class label falls outside ``[0, num_classes)``."""

    def __init__(self, label: int, num_classes: int) -> None:
        super().__init__(f"Label {label} is out of range [0, {num_classes})")
        self.label = label
        self.num_classes = num_classes


class NonFiniteError(MaskletError):
    """Raised when an operation produces NaN or infinite values."""

    def __init__(self, op_tag: str) -> None:
        super().__init__(f"Operation '{op_tag}' produced non-finite values")
        self.op_tag = op_tag


class ConfigError(MaskletError):
    """Raised when a configuration key or value is invalid."""

    def __init__(self, message: str, key: str | None = None) -> None:
        full_message = f"{message} (key: {key})" if key else message
        super().__init__(full_message)
        self.key = key


class UnknownPresetError(ConfigError):
    """Raised when a preset name is not registered."""

    def __init__(self, name: str, available: list[str]) -> None:
        message = (
            f"Preset '{name}' is not known. Available presets: {', '.join(available)}"
        )
        super().__init__(message)
        self.name = name
        self.available = available


class DataError(MaskletError):
    """Raised when dataset contents cannot support the requested tasks."""


class DatasetNotFoundError(DataError):
    """Raised when the expected dataset files are missing."""

    def __init__(self, root: str, missing: list[str]) -> None:
        message = f"Dataset files not found: {', '.join(missing)}"
        super().__init__(message, root)
        self.missing = missing


class DataFormatError(DataError):
    """Raised when an IDX file is malformed, truncated or inconsistent."""


class DivergenceError(MaskletError):
    """Raised when the training loss stops being finite."""

    def __init__(self, task: int, iteration: int) -> None:
        super().__init__(
            f"Training diverged on task {task + 1} at iteration {iteration}"
        )
        self.task = task
        self.iteration = iteration


class DegenerateCovarianceError(MaskletError):
    """Raised when a class covariance cannot be normalized or inverted."""

    def __init__(self, message: str, class_id: int | None = None) -> None:
        full_message = f"{message} (class: {class_id})" if class_id is not None else message
        super().__init__(full_message)
        self.class_id = class_id


class NormalizationError(MaskletError):
    """Raised when a zero-norm vector would be L2-normalized."""


class CheckpointVersionError(MaskletError):
    """Raised when a checkpoint was written by an incompatible format version."""

    def __init__(self, found: int, supported: int, path: str | None = None) -> None:
        message = (
            f"Checkpoint format version {found} is not compatible "
            f"with supported version {supported}"
        )
        super().__init__(message, path)
        self.found = found
        self.supported = supported


class CheckpointCorruptionError(MaskletError):
    """Raised when a checkpoint tensor fails its checksum or size check."""

    def __init__(self, tensor: str, path: str | None = None) -> None:
        super().__init__(f"Tensor '{tensor}' failed its integrity check", path)
        self.tensor = tensor
