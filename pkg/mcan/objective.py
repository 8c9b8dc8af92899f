# This script contains the loss functions

from typing import Dict, NamedTuple, Optional, Sequence, Tuple, Union
import numpy as np
from mcan.autodiff import Tensor, as_tensor, clamp, log, mean, stack, tsum
from mcan.network import MultiAttrNet
from mcan.transform import IDENTITY
from mcan.utils import ShapeError, ValidationError

PROBABILITY_EPSILON = 1e-7
L1_REDUCTIONS = ("sum", "mean")


class LossWeights(NamedTuple):
    """
        Weights of the loss terms, the defaults are the published values
    """

    lambda_b: float = 1.0
    lambda_m: float = 1.0
    lambda_r: float = 4.0
    lambda_1: float = 1e-5

    def validate(self) -> "LossWeights":
        for name, value in self._asdict().items():
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"Loss weight {name} must be non-negative, got {value}")
        return self


class LossBreakdown(NamedTuple):
    """
        Values of the loss terms, `root` is the differentiable total (if available)
    """

    l_b: float
    l_m: float
    l_r: float
    l_mask_l1: float
    total: float
    root: Optional[Tensor] = None

    COMPONENTS = ("l_b", "l_m", "l_r", "l_mask_l1", "total")

    def values(self) -> Dict[str, float]:
        return {c: getattr(self, c) for c in LossBreakdown.COMPONENTS}


def _binary_labels(labels: Union[np.ndarray, Tensor], shape: Tuple[int, ...]) -> np.ndarray:
    y = labels.values if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if y.shape != shape:
        raise ShapeError(f"Labels of shape {y.shape} do not match predictions of shape {shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("Labels must be 0 or 1")
    return y


def _cross_entropy(probs: Tensor, labels: Union[np.ndarray, Tensor]) -> Tensor:
    probs = as_tensor(probs)
    if probs.ndim != 2:
        raise ShapeError(f"Expected probabilities of shape [B, K], got {probs.shape}")
    y = _binary_labels(labels, probs.shape)
    p = clamp(probs, PROBABILITY_EPSILON, 1.0 - PROBABILITY_EPSILON)
    ll = y * log(p) + (1.0 - y) * log(1.0 - p)
    return tsum(ll) * (-1.0 / probs.shape[0])


def binary_attr_loss(probs: Tensor, labels: Union[np.ndarray, Tensor]) -> Tensor:
    """Binary cross entropy summed over the attributes and averaged over the samples

    Args:
        probs (Tensor): [B, K] probabilities from the binary heads (clamped to [1e-7, 1 - 1e-7])
        labels (Union[np.ndarray, Tensor]): [B, K] labels in {0, 1}

    Raises:
        ValidationError: if a label is not 0 or 1

    Returns:
        Tensor: scalar loss
    """
    return _cross_entropy(probs, labels)


def multilabel_loss(probs: Tensor, labels: Union[np.ndarray, Tensor]) -> Tensor:
    """
        Same cross entropy as `binary_attr_loss`, for the multi-label head
    """
    return _cross_entropy(probs, labels)


def reconstruction_loss(x: Union[np.ndarray, Tensor], x_hat: Tensor) -> Tensor:
    """
        Squared error summed over pixels and channels, averaged over the samples
    """
    x = as_tensor(x)
    x_hat = as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"Cannot compare images of shape {x.shape} and {x_hat.shape}")
    diff = x - x_hat
    return tsum(diff * diff) * (1.0 / x.shape[0])


def mask_l1(masks: Sequence[Tensor], reduction: str = "sum") -> Tensor:
    """L1 norm of the attention masks (the masks are positive, so this is a plain sum)

    Args:
        masks (Sequence[Tensor]): one [B, C, Hf, Wf] mask per attribute
        reduction (str, optional): "sum" over elements and attributes averaged over the batch, or "mean" over all elements and attributes. Defaults to "sum".

    Returns:
        Tensor: scalar
    """
    if reduction not in L1_REDUCTIONS:
        raise ValidationError(f"Unknown L1 reduction '{reduction}', expected one of {L1_REDUCTIONS}")
    if len(masks) == 0:
        return as_tensor(0.0)
    stacked = stack(masks, 0)
    if reduction == "mean":
        return mean(stacked)
    return tsum(stacked) * (1.0 / stacked.shape[1])


def total_loss(
    net: MultiAttrNet,
    batch: Tuple[np.ndarray, np.ndarray],
    weights: LossWeights = LossWeights(),
    l1_reduction: str = "sum",
) -> LossBreakdown:
    """The weighted training objective
        L = lambda_b L_b + lambda_m L_m + lambda_r L_r + lambda_1 |M|_1
        evaluated with the training-time masking (1 + M).
        Components disabled in the network contribute exactly zero and build no graph.
        Run this inside `recording(tape)` and call `backward(breakdown.root, tape)` for gradients.

    Args:
        net (MultiAttrNet): the network
        batch (Tuple[np.ndarray, np.ndarray]): images [B, Cimg, H, W] and labels [B, K]
        weights (LossWeights, optional): the loss weights. Defaults to LossWeights().
        l1_reduction (str, optional): see `mask_l1`. Defaults to "sum".

    Returns:
        LossBreakdown: component values and the differentiable total in `root`
    """
    images, labels = batch
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValidationError("Cannot compute the loss of an empty batch")
    weights.validate()
    feat = net.extract_features(images)
    probs = []
    masks = []
    for k in range(net.config.num_attributes):
        p, m = net.forward_attribute(k, None, IDENTITY, feat=feat)
        probs.append(p)
        masks.append(m)
    l_b = binary_attr_loss(stack(probs, 1), labels)
    l1 = mask_l1(masks, l1_reduction)
    total = weights.lambda_b * l_b + weights.lambda_1 * l1
    l_m = l_r = 0.0
    if net.config.enable_multilabel:
        lm = multilabel_loss(net.multilabel_head(feat), labels)
        total = total + weights.lambda_m * lm
        l_m = lm.item()
    if net.config.enable_reconstructor:
        lr = reconstruction_loss(images, net.reconstruct(feat))
        total = total + weights.lambda_r * lr
        l_r = lr.item()
    return LossBreakdown(l_b.item(), l_m, l_r, l1.item(), total.item(), total)
