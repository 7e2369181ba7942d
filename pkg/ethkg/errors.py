"""
Exception hierarchy shared by every ethkg component.

Each error carries the process exit code the CLI reports for it.
"""


class EthError(Exception):
    """Base class for ethkg errors"""

    exit_code = 1


class InvalidArgumentError(EthError, ValueError):
    """Shape, dimension, curvature or id mismatch"""

    exit_code = 2


class DataError(EthError):
    """Malformed or missing dataset input"""

    exit_code = 2


class CheckpointError(EthError):
    """Checkpoint cannot be read or does not match the run"""

    exit_code = 3


class RankingError(EthError, RuntimeError):
    """Filter mask hides the gold answer"""

    exit_code = 3


class NumericError(EthError, ArithmeticError):
    """Non-finite value produced during a forward pass or loss"""

    exit_code = 4
