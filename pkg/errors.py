"""
Error types shared by every stage of the pipeline.

Each error carries the process exit code the CLI maps it to:
2 for usage/validation problems, 3 for runtime failures.
"""

from typing import Optional


class PinAdaptError(Exception):
    """Base class; runtime failure unless a subclass says otherwise"""

    exit_code = 3


class ValidationError(PinAdaptError, ValueError):
    """Input rejected before any work was done"""

    exit_code = 2


class CapabilityError(PinAdaptError):
    """The selected backend cannot perform the requested operation"""

    exit_code = 2


class ManifestMismatchError(ValidationError):
    """Two artifacts were produced by incompatible backends or configs"""


class BankLoadError(ValidationError):
    pass


class BankVersionError(BankLoadError):
    pass


class BankChannelError(BankLoadError):
    pass


class BankLengthError(BankLoadError):
    pass


class DatasetError(ValidationError):
    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message} ({path})" if path else message)
        self.path = path


class MissingLabelError(DatasetError):
    pass


class DecodeError(DatasetError):
    pass


class RemapError(DatasetError):
    pass


class MiningError(PinAdaptError):
    """Optimization diverged; names the iteration and the source feature index"""

    def __init__(self, message: str, iteration: Optional[int] = None, source_index: Optional[int] = None):
        details = []
        if source_index is not None:
            details.append(f"source index {source_index}")
        if iteration is not None:
            details.append(f"iteration {iteration}")
        suffix = f" [{', '.join(details)}]" if details else ""
        super().__init__(f"{message}{suffix}")
        self.iteration = iteration
        self.source_index = source_index


class StageError(PinAdaptError):
    """A CLI stage failed; wraps the underlying error with the stage name"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)
