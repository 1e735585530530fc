"""Exception types shared across the package."""


class PvdetError(Exception):
    """Base class for all package errors."""


class DimensionError(PvdetError):
    """A tensor extent does not satisfy an operation's contract.

    The message names the offending axis so callers can diagnose shape
    plumbing without a debugger.
    """


class SpecError(PvdetError):
    """A block or model specification is internally inconsistent."""


class ContractError(PvdetError):
    """An operation was called outside its contract (e.g. backward on a
    non-scalar)."""


class CheckpointError(PvdetError):
    """A checkpoint file is malformed, truncated or belongs to a
    different model variant."""


class AnnotationError(PvdetError):
    """An annotation file cannot be parsed into a valid ground truth."""

    def __init__(self, path, element, message):
        self.path = str(path)
        self.element = element
        super().__init__(f"{path}: <{element}>: {message}")


class GenerationError(PvdetError):
    """The synthetic panel generator could not satisfy its placement
    constraints."""


class DivergenceError(PvdetError):
    """Training produced a non-finite loss; carries the offending step."""

    def __init__(self, epoch, step, message="non-finite loss"):
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} at epoch {epoch}, step {step}")


class ConfigError(PvdetError):
    """A run configuration is invalid before any work starts."""
