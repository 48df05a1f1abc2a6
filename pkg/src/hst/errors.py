"""Exception types shared across the package."""


class HstError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(HstError):
    """Tensor shapes or layouts incompatible with an operation."""


class GraphError(HstError):
    """Autodiff contract violation (non-scalar loss, missing tape, ...)."""


class ConfigError(HstError):
    """Invalid or inconsistent configuration."""


class WiringError(HstError):
    """Mismatch between produced and expected intermediate activations."""


class DataFormatError(HstError):
    """Malformed binary file. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AuditError(HstError):
    """Freeze-audit inputs do not describe the same model."""


class TrainingAborted(HstError):
    """Training stopped on a non-finite loss; names the offending tensors."""

    def __init__(self, message: str, tensor_names: list[str] | None = None):
        self.tensor_names = tensor_names or []
        if self.tensor_names:
            message = f"{message}: {', '.join(self.tensor_names)}"
        super().__init__(message)
