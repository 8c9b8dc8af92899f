"""
    This script contains the intentional attention mask transformation.

    The tone curve h(m; n) is point symmetric around 0.5:
        h(m; n) = (m / 0.5)^n / 2                 for m < 0.5
        h(m; n) = 1 - ((1 - m) / 0.5)^n / 2       for m >= 0.5
    and g(m; n, beta) = (1 + beta) h(m; n) - beta rescales it so that small mask
    values can be suppressed below zero. At inference the features are multiplied
    with 1 + g(mask), which for (n, beta) = (1, 0) is the training-time 1 + mask.
"""

from typing import List, NamedTuple, Tuple, Union
import numpy as np
from numba import jit
from mcan.autodiff import Tensor
from mcan.utils import DomainError, ValidationError


class TransformParams(NamedTuple):
    """
        Slope (n) and suppression (beta) of the mask transformation
    """

    n: float = 1.0
    beta: float = 0.0

    def validate(self) -> "TransformParams":
        if not np.isfinite(self.n) or self.n < 0:
            raise ValidationError(f"The transformation slope n must be non-negative, got {self.n}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError(f"The transformation beta must be in [0, 1], got {self.beta}")
        return self

    @property
    def is_identity(self) -> bool:
        return self.n == 1.0 and self.beta == 0.0


IDENTITY = TransformParams(1.0, 0.0)
DEFAULT_NS = (0.0, 1.0, 2.0, 3.0, 4.0)
DEFAULT_BETAS = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_GRID = tuple(TransformParams(n, b) for n in DEFAULT_NS for b in DEFAULT_BETAS)


@jit(nopython=True, cache=True)
def _tone_curve(m: np.ndarray, n: float, beta: float) -> np.ndarray:
    """
        g(m; n, beta) for a flat array of mask values.
        This function is sped up with numba.
    """
    out = np.empty_like(m)
    for i in range(m.size):
        x = m[i]
        if x < 0.5:
            h = (x / 0.5) ** n / 2.0
        else:
            h = 1.0 - ((1.0 - x) / 0.5) ** n / 2.0
        if beta == 0.0:
            out[i] = h
        else:
            out[i] = (1.0 + beta) * h - beta
    return out


def _check_domain(m: np.ndarray):
    if m.size and not np.all((m >= 0.0) & (m <= 1.0)):
        bad = m[~((m >= 0.0) & (m <= 1.0))].reshape(-1)[0]
        raise DomainError(f"Mask values must be in [0, 1], got {bad}")


def _apply(m: Union[np.ndarray, float], n: float, beta: float) -> Union[np.ndarray, float]:
    arr = np.asarray(m, dtype=np.float64)
    _check_domain(arr)
    if n < 0 or not np.isfinite(n):
        raise DomainError(f"The transformation slope n must be non-negative, got {n}")
    out = _tone_curve(np.ascontiguousarray(arr).reshape(-1), float(n), float(beta)).reshape(arr.shape)
    if np.ndim(m) == 0:
        return float(out)
    return out


def h(m: Union[np.ndarray, float], n: float) -> Union[np.ndarray, float]:
    """Symmetric tone curve (0^0 is taken to be 1, so h(m; 0) = 0.5)

    Args:
        m (Union[np.ndarray, float]): mask value(s) in [0, 1]
        n (float): non-negative slope

    Raises:
        DomainError: if a mask value is outside [0, 1]

    Returns:
        Union[np.ndarray, float]: values in [0, 1]
    """
    return _apply(m, n, 0.0)


def g(m: Union[np.ndarray, float], params: TransformParams) -> Union[np.ndarray, float]:
    """Rescaled tone curve (1 + beta) h(m; n) - beta

    Args:
        m (Union[np.ndarray, float]): mask value(s) in [0, 1]
        params (TransformParams): the transformation

    Raises:
        DomainError: if a mask value is outside [0, 1]
        ValidationError: if n or beta is out of range

    Returns:
        Union[np.ndarray, float]: values in [-beta, 1]
    """
    params.validate()
    return _apply(m, params.n, params.beta)


def transform_mask(mask: Union[Tensor, np.ndarray], params: TransformParams) -> Tensor:
    """Feature multiplier 1 + g(mask) used at inference.
        The result is a constant (it is never recorded on a tape).

    Args:
        mask (Union[Tensor, np.ndarray]): mask with values in [0, 1]
        params (TransformParams): the transformation

    Raises:
        DomainError: if a mask value is outside [0, 1]

    Returns:
        Tensor: multiplier with values in [1 - beta, 2]
    """
    values = mask.values if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if params.is_identity:
        _check_domain(values)
        return Tensor(1.0 + values)
    return Tensor(1.0 + g(values, params))


def curve_samples(params: TransformParams, count: int) -> List[Tuple[float, float]]:
    """
        Sample (m, g(m)) at `count` evenly spaced points on [0, 1] (endpoints included)
    """
    if count < 2:
        raise ValidationError(f"At least two curve samples are needed, got {count}")
    ms = np.linspace(0.0, 1.0, count)
    gs = g(ms, params)
    return [(float(m), float(v)) for m, v in zip(ms, gs)]
