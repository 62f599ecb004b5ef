"""Shared exception types."""


class ForgemapError(Exception):
    """Base class for all contract violations raised by this package."""


class ShapeError(ForgemapError):
    """Tensor shape incompatible with the requested operation."""


class NonFiniteError(ForgemapError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ConfigError(ForgemapError):
    """Invalid configuration file or value."""


class CheckpointError(ForgemapError):
    """Malformed or unreadable checkpoint file."""


class FreezeViolation(ForgemapError):
    """A parameter declared frozen changed during training."""
