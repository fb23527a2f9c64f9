"""Shared exception types. Every module raises these so the CLI can map
failures onto its stable exit codes."""


class EvlmError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EvlmError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(EvlmError):
    """A configuration value violates a module invariant."""


class SequenceError(EvlmError):
    """An interleaved image/text sequence is malformed."""


class ContractViolationError(EvlmError):
    """An operation precondition was violated (e.g. a fully masked row)."""


class NonFiniteError(EvlmError):
    """A NaN or Inf appeared in a tensor; the computation is in an error state."""
