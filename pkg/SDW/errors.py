""" This module contains the exceptions raised by the Sequence-Density-Workbench.

**Description:**

    Every error raised on purpose by the package derives from ``WorkbenchError``.
    The concrete classes also derive from the matching builtin (``ValueError`` or
    ``RuntimeError``) so that callers which only know the builtin still catch them.
    The command line front end (``SDW.control``) maps these classes onto exit codes.

"""


class WorkbenchError(Exception):
    """Base class of all package errors."""


class DataFormatError(WorkbenchError, ValueError):
    """Raised when a data file or an in-memory sequence is malformed.

    Args:
        message: description of the problem.
        line: 1-based line number in the offending file, if any.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = "line %d: %s" % (line, message)
        super().__init__(message)


class TransformError(WorkbenchError, ValueError):
    """Raised for invalid transform arguments (stride, permutation, split, ...)."""


class ModelError(WorkbenchError, ValueError):
    """Raised when a model is used with the wrong family, mode or shape."""


class ObjectiveError(WorkbenchError, ValueError):
    """Raised when an objective is applied to an incompatible forward result."""


class NonFiniteError(WorkbenchError, RuntimeError):
    """Raised when a loss or a gradient is NaN or infinite."""


class TrainingAborted(WorkbenchError, RuntimeError):
    """Raised when a run stops early. ``checkpoint`` is the last good checkpoint (or None)."""

    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)


class ConfigError(WorkbenchError, ValueError):
    """Raised by config validation. ``problems`` lists every problem found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


class OracleFailure(WorkbenchError, RuntimeError):
    """Raised when a verification oracle does not pass."""


class ReportError(WorkbenchError, ValueError):
    """Raised when evaluation reports cannot be combined into one table."""
