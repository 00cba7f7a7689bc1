"""Exception hierarchy shared by all pse modules."""

from __future__ import annotations


class PseError(Exception):
    """Base class for every error raised by the toolkit."""


class ArgumentError(PseError, ValueError):
    """An argument violates a documented precondition."""


class ManifestParseError(PseError):
    """A manifest line could not be parsed."""

    def __init__(self, path, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}, line {line_no}: {message}")


class ManifestValidationError(PseError):
    """A manifest parsed cleanly but broke an invariant."""


class MissingFileError(PseError, FileNotFoundError):
    """An audio file referenced by a manifest is absent."""


class AudioIOError(PseError, OSError):
    """An audio file could not be read or decoded."""

    def __init__(self, message: str, record_id: str | None = None):
        self.record_id = record_id
        prefix = f"[{record_id}] " if record_id else ""
        super().__init__(prefix + message)


class DegenerateSourceError(PseError):
    """A source signal is silent or numerically unusable."""


class BackendError(PseError):
    """An external adapter or synthesis backend failed."""

    def __init__(self, message: str, diagnostics: str = ""):
        self.diagnostics = diagnostics
        super().__init__(message if not diagnostics else f"{message}\n{diagnostics}")


class BackendTimeoutError(BackendError):
    """An external command exceeded its time budget."""


class ConfigError(PseError):
    """A model or training configuration is unusable."""


class CheckpointError(PseError):
    """A checkpoint is unreadable or incompatible with the request."""


class NumericError(PseError, ArithmeticError):
    """A computation produced a degenerate numeric result."""


class TrainingError(PseError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message: str, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (batch dump: {dump_path})")


class LockfileMismatchError(PseError):
    """A resumed experiment does not match its recorded lockfile."""
