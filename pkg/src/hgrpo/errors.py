"""Shared exception types.

Every module raises these instead of bare ValueError/KeyError so callers can
distinguish contract violations (caller bugs) from data-level failures.
"""


class ContractViolation(ValueError):
    """A precondition or invariant of an operation was violated by the caller."""


class TaskNotFound(KeyError):
    """Unknown task id passed to the environment or registry."""


class ActionParseError(ValueError):
    """A token sequence or textual action form could not be parsed into an action."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during loss or gradient evaluation."""


class ConfigError(ValueError):
    """Bad run configuration: unknown key or invariant violation."""


class DependencyError(RuntimeError):
    """A command was invoked before its prerequisite artifact exists."""


class PipelineError(RuntimeError):
    """Oracle data generation hit an inconsistency between plan and app script."""


class DivergenceError(ArithmeticError):
    """A value computation failed to converge (improper policy at gamma = 1)."""
