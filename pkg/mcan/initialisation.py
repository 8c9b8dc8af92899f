# This script contains functions for initialising the network parameters

from typing import Dict, Tuple
import numpy as np
from mcan.autodiff import Tensor


def glorot_bound(fan_in: int, fan_out: int) -> float:
    """
        The bound a = sqrt(6 / (fan_in + fan_out)) of the Glorot uniform distribution
    """
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    """Draw a parameter tensor from uniform(-a, a), a = sqrt(6 / (fan_in + fan_out))

    Args:
        rng (np.random.Generator): random number generator
        shape (Tuple[int, ...]): shape of the tensor
        fan_in (int): number of inputs to each unit
        fan_out (int): number of outputs from each unit

    Returns:
        Tensor: tensor with requires_grad
    """
    a = glorot_bound(fan_in, fan_out)
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def zeros(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def initialise_conv(
    params: Dict[str, Tensor],
    rng: np.random.Generator,
    name: str,
    channels_out: int,
    channels_in: int,
    size: int,
):
    """
        Add `{name}.kernel` [Cout, Cin, size, size] and `{name}.bias` [Cout] to the parameters
    """
    receptive = size * size
    params[name + ".kernel"] = glorot_uniform(
        rng,
        (channels_out, channels_in, size, size),
        channels_in * receptive,
        channels_out * receptive,
    )
    params[name + ".bias"] = zeros((channels_out,))


def initialise_dense(
    params: Dict[str, Tensor], rng: np.random.Generator, name: str, inputs: int, outputs: int,
):
    """
        Add `{name}.weight` [inputs, outputs] and `{name}.bias` [outputs] to the parameters
    """
    params[name + ".weight"] = glorot_uniform(rng, (inputs, outputs), inputs, outputs)
    params[name + ".bias"] = zeros((outputs,))
