"""Exception hierarchy shared by every capfix module."""


class CapfixError(Exception):
    """Base class for errors the CLI reports as a failed command."""


class SchemaError(CapfixError, ValueError):
    """A JSONL file does not match its declared schema."""


class ConfigError(CapfixError, ValueError):
    """Invalid configuration. ``keys`` names every offending ``section.key``."""

    def __init__(self, message, keys=()):
        self.keys = tuple(keys)
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)


class ShapeError(CapfixError, ValueError):
    """Array shapes are inconsistent with the model dimensions."""


class CheckpointError(CapfixError):
    """A checkpoint file is unreadable, truncated or inconsistent."""


class TrainingError(CapfixError, RuntimeError):
    """Training aborted. ``epoch`` and ``batch`` are 0-based when known."""

    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        if epoch is not None:
            message = f"{message} (epoch {epoch}, batch {batch})"
        super().__init__(message)


class NonFiniteGradientError(TrainingError):
    """A gradient block holds NaN or infinity."""

    def __init__(self, block):
        self.block = block
        super().__init__(f"Non-finite gradient in parameter block '{block}'")
