from __future__ import annotations


class SaliencyAdaptError(Exception):
    """Base class for every error raised by saliency_adapt."""


class InvalidArgumentError(SaliencyAdaptError, ValueError):
    pass


class InvalidPlacementError(InvalidArgumentError):
    pass


class InsufficientBackgroundsError(InvalidArgumentError):
    pass


class InvalidConfigError(SaliencyAdaptError, ValueError):
    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class ImageDecodeError(SaliencyAdaptError, ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MissingStyleError(SaliencyAdaptError, LookupError):
    def __init__(self, style_id: str) -> None:
        super().__init__(f"Style image {style_id!r} not found in style pool")
        self.style_id = style_id


class MissingLabelError(SaliencyAdaptError, FileNotFoundError):
    def __init__(self, record_id: str, path: str) -> None:
        super().__init__(f"Label for record {record_id!r} missing at {path}")
        self.record_id = record_id
        self.path = path


class LabelAccessError(SaliencyAdaptError, PermissionError):
    """A training-scoped reader asked for a label that is evaluation-only."""


class NumericalFailureError(SaliencyAdaptError, ArithmeticError):
    def __init__(self, layer: str, message: str = "non-finite gradient") -> None:
        super().__init__(f"{message} in layer {layer}")
        self.layer = layer


class PseudoLabelError(SaliencyAdaptError, RuntimeError):
    def __init__(self, target_id: str, cause: Exception) -> None:
        super().__init__(f"Pseudo-label refresh failed for target {target_id!r}: {cause}")
        self.target_id = target_id


class CheckpointError(SaliencyAdaptError, ValueError):
    pass
