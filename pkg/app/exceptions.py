from typing import Optional


class W2EITError(Exception):
    """Base class for all errors raised by the toolkit"""
    exit_code = 1


class DomainError(W2EITError, ValueError):
    """Input lies outside the mathematical domain of an operation"""
    exit_code = 2


class NormalizationRangeError(DomainError):
    """Normalized trace dips below the density floor"""


class UsageError(W2EITError):
    """Objects that do not belong together were combined"""
    exit_code = 2


class ConfigError(W2EITError):
    """Configuration file could not be parsed or validated"""
    exit_code = 2


class ConvergenceError(W2EITError):
    """Iterative solver hit its iteration cap"""
    exit_code = 3

    def __init__(self, message: str, last_iterate: float, iterations: int):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class SolverError(W2EITError):
    """Linear solve failed or produced an unacceptable residual"""
    exit_code = 4

    def __init__(self, message: str, pattern_index: Optional[int] = None):
        if pattern_index is not None:
            message = f"pattern {pattern_index}: {message}"
        super().__init__(message)
        self.pattern_index = pattern_index


class InternalConsistencyError(W2EITError):
    """An internal invariant was violated"""
    exit_code = 4
