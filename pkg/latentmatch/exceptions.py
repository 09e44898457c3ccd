"""
Exception hierarchy for latentmatch

Library code raises these; only the command-line front end turns them
into exit codes.
"""

from typing import Optional


class LatentMatchError(Exception):
    """Base class for all latentmatch errors"""


class ConfigError(LatentMatchError):
    """Invalid flags, settings or training configuration"""


class DataError(LatentMatchError):
    """Malformed or unusable input data"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        if path is not None and line is not None:
            message = f"{path}:{line}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class EmptyCorpusError(DataError):
    """No usable click records or training pairs"""


class EmptyKnowledgeError(DataError):
    """No knowledge pair could be resolved against the vocabulary"""


class NumericalError(LatentMatchError):
    """Non-finite values or a failed factorization"""


class DivergenceError(NumericalError):
    """Gradient descent blew up"""
