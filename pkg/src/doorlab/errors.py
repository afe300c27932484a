"""Exception hierarchy shared by every doorlab module."""


class DoorlabError(Exception):
    """Base class; the CLI maps subclasses onto exit codes."""


class ConfigurationError(DoorlabError):
    """Bad configuration: unknown scene, empty dataset, missing adapter."""


class ContractViolation(DoorlabError, ValueError):
    """Caller broke an operation's input contract (shapes, dimensions)."""


class ProtocolError(ConfigurationError):
    """Data-collection or evaluation protocol rule was broken."""


class FormatError(DoorlabError):
    """Corrupt or incompatible on-disk record."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProvenanceError(DoorlabError):
    """An observation's frame reference cannot be resolved to a world state."""


class TrainingError(DoorlabError):
    """Optimization diverged; carries the last good checkpoint if any."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class IncompleteDataError(DoorlabError):
    """A report was requested over results missing a required domain."""
