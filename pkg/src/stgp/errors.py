"""Exception hierarchy shared by every stgp module."""

import numpy as np


class StgpError(Exception):
    """Base class for all errors raised by stgp."""


class DomainError(StgpError, ValueError):
    """An argument lies outside the domain where a quantity is defined."""


class NotPositiveDefiniteError(StgpError, np.linalg.LinAlgError):
    """A matrix that must be symmetric positive definite is not."""


class ConstraintViolationError(StgpError, ValueError):
    """A parameter violates a structural constraint (e.g. negative basis weight)."""


class DatasetError(StgpError, ValueError):
    """Malformed or inconsistent panel data."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row
        self._raw = message if row is None else message[len(f"row {row}: "):]

    def __reduce__(self):
        return (type(self), (self._raw, self.row))


class SamplerStepError(StgpError, RuntimeError):
    """A Gibbs sweep step failed; ``step`` names the conditional update."""

    def __init__(self, step, cause):
        super().__init__(f"{step}: {cause}")
        self.step = step
        self.cause = cause

    def __reduce__(self):
        return (type(self), (self.step, self.cause))


class ReplicateFailure(StgpError, RuntimeError):
    """One or more bootstrap replicates failed during a pooled run."""

    def __init__(self, failures):
        lines = ", ".join(f"replicate {j}: {err}" for j, err in failures)
        super().__init__(f"{len(failures)} replicate(s) failed ({lines})")
        self.failures = failures

    def __reduce__(self):
        return (type(self), (self.failures,))
