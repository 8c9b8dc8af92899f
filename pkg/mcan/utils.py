# This script contains some utility functions

from typing import Sequence, Tuple
import numpy as np
from scipy.special import expit as sigmoid


class McanWarning(RuntimeWarning):
    """
        Custom tag for warnings
    """


class McanException(Exception):
    """
        Custom tag for exceptions
    """


class ShapeError(McanException, ValueError):
    """
        Incompatible tensor shapes
    """


class DomainError(McanException, ValueError):
    """
        Value outside the domain of a function
    """


class ValidationError(McanException, ValueError):
    """
        Invalid configuration or input data
    """


class FormatError(ValidationError):
    """
        Malformed file contents
    """


class MissingImageError(ValidationError, FileNotFoundError):
    """
        An image referenced by an attribute file does not exist
    """


class DisabledError(McanException):
    """
        A network component that was disabled in the config has been used
    """


class ContractError(McanException):
    """
        A precondition of the autodiff engine was violated
    """


class NonFiniteLossError(McanException, FloatingPointError):
    """
        The training loss (or one of its components) is NaN or infinite
    """

    def __init__(self, component: str, value: float, epoch: int = -1, batch: int = -1):
        self.component = component
        self.value = value
        super().__init__(
            f"Non-finite loss component '{component}' ({value}) at epoch {epoch}, batch {batch}"
        )


class CheckpointError(McanException):
    """
        Unreadable checkpoint file
    """


class CheckpointVersionError(CheckpointError):
    """
        Checkpoint written with an unsupported format version
    """


class CheckpointTruncatedError(CheckpointError):
    """
        Checkpoint file is shorter than its header declares
    """


class CheckpointChecksumError(CheckpointError):
    """
        Checkpoint CRC32 does not match the contents
    """


def pearson_matrix(observations: np.ndarray) -> np.ndarray:
    """Pearson correlation between the columns of a matrix.
        Columns with zero variance correlate as 0 with the others and 1 with themselves.

    Args:
        observations (np.ndarray): matrix with one row per observation and one column per variable

    Returns:
        np.ndarray: symmetric correlation matrix with unit diagonal, clipped to [-1, 1]
    """
    obs = np.asarray(observations, dtype=np.float64)
    centered = obs - obs.mean(0, keepdims=True)
    norm = np.sqrt(np.sum(centered * centered, 0))
    scale = max(1.0, np.max(np.abs(obs), initial=0.0)) * np.sqrt(max(1, obs.shape[0]))
    constant = norm <= 1e-12 * scale
    norm[constant] = 1.0
    unit = centered / norm[None, :]
    unit[:, constant] = 0.0
    corr = unit.T @ unit
    corr = (corr + corr.T) * 0.5
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def descending_order(scores: Sequence[float]) -> np.ndarray:
    """
        Indices sorted by descending score, ties broken by ascending index
    """
    scores = np.asarray(scores, dtype=np.float64)
    # lexsort sorts by the last key first and is stable
    return np.lexsort((np.arange(len(scores)), -scores))


def batch_ranges(n: int, batch_size: int) -> Sequence[Tuple[int, int]]:
    """
        Split range(n) into consecutive [start, stop) chunks
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be positive, got {batch_size}")
    return [(i, min(n, i + batch_size)) for i in range(0, n, batch_size)]


def format_float(x: float) -> str:
    """
        Shortest round-tripping representation, used for reproducible CSV output
    """
    return repr(float(x))
