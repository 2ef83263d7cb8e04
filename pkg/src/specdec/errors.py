"""Exception types shared across the package."""


class SpecDecError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(SpecDecError, ValueError):
    """A caller passed data that violates an operation's contract."""


class InvalidRollbackError(SpecDecError, ValueError):
    """A rollback target is outside the legal [prompt_length, prefix_length] range."""


class ProtocolViolationError(SpecDecError, RuntimeError):
    """The draft/verify coordination contract was broken.

    This always indicates a programming bug in an engine or executor, never a
    data-dependent condition; a run that raises it must be aborted.
    """


class SimulatorError(SpecDecError, RuntimeError):
    """The virtual-clock executor reached an impossible state (simulator bug)."""


class ConfigError(SpecDecError, ValueError):
    """A CLI config file is malformed or has an out-of-range field."""
