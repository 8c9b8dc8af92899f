"""
    This script contains functions for plotting and printing the results
"""

from collections import OrderedDict
from typing import List, Optional, Sequence, Union
from warnings import warn
import numpy as np
from matplotlib import pyplot as plt
from matplotlib.pyplot import Figure
from matplotlib.colors import LinearSegmentedColormap
from mcan.analysis import upsample
from mcan.data import Sample
from mcan.network import MultiAttrNet
from mcan.robustness import SweepResult, baseline_delta, mean_accuracy_curve
from mcan.transform import IDENTITY, TransformParams, curve_samples
from mcan.utils import McanException, McanWarning, descending_order

# Colours for a unified look
MCAN_BLUE = "#2b6ca3"
MCAN_LIGHTBLUE = "#8fb8de"
MCAN_RED = "#c0392b"
MCAN_GRAY = "#999999"
MASK_COLORMAP = LinearSegmentedColormap.from_list("MCAN", ["#000000", MCAN_BLUE, "#ffffff"])


def fill_attribute_names(names: Optional[List[str]] = None, amount: int = -1) -> List[str]:
    """Make sure the list of attribute names is of the correct size

    Args:
        names (Optional[List[str]], optional): prefilled list of attribute names. Defaults to None.
        amount (int, optional): the number of attributes. Defaults to -1.

    Returns:
        List[str]: list of attribute names
    """
    if amount < 1:
        return names
    if names is None:
        return ["Attribute %d" % i for i in range(amount)]
    names = list(names)
    if len(names) > amount:
        warn("Too many attribute names given", McanWarning)
        names = names[:amount]
    if len(names) < amount:
        warn("Too few attribute names given", McanWarning)
        names = names + ["Attribute %d" % i for i in range(len(names), amount)]
    return names


def print_accuracy(
    accuracies: np.ndarray,
    names: Optional[List[str]] = None,
    title: str = "Attribute Accuracy",
    decimals: int = 3,
):
    """Print the per-attribute accuracies and their mean as a table

    Args:
        accuracies (np.ndarray): accuracy per attribute
        names (Optional[List[str]], optional): attribute names. Defaults to None.
        title (str, optional): title to print first. Defaults to "Attribute Accuracy".
        decimals (int, optional): number of decimals to print. Defaults to 3.
    """
    rows = OrderedDict()
    rows["Attribute:"] = fill_attribute_names(names, len(accuracies)) + ["Mean"]
    rows["Accuracy:"] = ["%%.%df" % decimals % a for a in accuracies] + [
        "%%.%df" % decimals % np.mean(accuracies)
    ]
    col_len = [max(8, *vs) + 1 for vs in zip(*(tuple(len(v) for v in vs) for vs in rows.values()))]
    lab_len = max(len(l) for l in rows)
    if title:
        print(title)
    for k in rows:
        print(f"{k:<{lab_len}}", " ".join([f"{s:>{c}}" for s, c in zip(rows[k], col_len)]))


def print_breakdown(breakdown, title: str = "Loss", decimals: int = 4):
    """
        Print the components of a loss breakdown (or an epoch record of a trace)
    """
    names = ["l_b", "l_m", "l_r", "l_mask_l1", "total"]
    values = [f"{getattr(breakdown, n):.{decimals}f}" for n in names]
    col_len = max(8, *(len(v) for v in values))
    if title:
        print(title)
    for n, v in zip(names, values):
        print(f"{n + ':':<11}{v:>{col_len}}")


def plot_curves(
    transforms: Sequence[TransformParams],
    count: int = 101,
    title: str = "Mask Transformation",
    fig: Union[Figure, None] = None,
):
    """Plot the transformation functions g(m; n, beta)

    Args:
        transforms (Sequence[TransformParams]): the transformations
        count (int, optional): number of points per curve. Defaults to 101.
        title (str, optional): plot title. Defaults to "Mask Transformation".
        fig (Union[Figure, None], optional): Pyplot figure to plot on, if None then a new plot is created and shown. Defaults to None.
    """
    if fig is None:
        plot = True
        fig, ax = plt.subplots()
    else:
        ax = fig.subplots()
        plot = False
    for t in transforms:
        m, g = np.array(curve_samples(t, count)).T
        style = "-" if t.is_identity else "--"
        ax.plot(m, g, style, label=f"n = {t.n:g}, $\\beta$ = {t.beta:g}")
    ax.set_xlabel("mask value")
    ax.set_ylabel("g")
    ax.set_xlim(0, 1)
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    if plot:
        plt.show()


def plot_masks(
    net: MultiAttrNet,
    sample: Sample,
    k: int,
    num_channels: int = 7,
    name: Optional[str] = None,
    fig: Union[Figure, None] = None,
):
    """Show an image and the most active channels of its mask for attribute k (labelled with the channel ids)

    Args:
        net (MultiAttrNet): the network
        sample (Sample): the sample
        k (int): the attribute
        num_channels (int, optional): number of channels to show. Defaults to 7.
        name (Optional[str], optional): attribute name. Defaults to None.
        fig (Union[Figure, None], optional): Pyplot figure to plot on, if None then a new plot is created and shown. Defaults to None.

    Raises:
        McanException: if the image has an unsupported number of channels
    """
    image = np.asarray(sample.image)
    if image.shape[0] not in (1, 3):
        raise McanException(f"Cannot show an image with {image.shape[0]} channels")
    mask = net.masks(image[None], k)[0]
    mask = upsample(mask, net.config.image_size // mask.shape[-1])
    channels = descending_order(mask.mean((1, 2)))[:num_channels]
    if fig is None:
        plot = True
        fig, axs = plt.subplots(1, len(channels) + 1, figsize=(1.6 * (len(channels) + 1), 2.0))
    else:
        axs = fig.subplots(1, len(channels) + 1)
        plot = False
    axs = np.atleast_1d(axs)
    if image.shape[0] == 1:
        axs[0].imshow(image[0], cmap="gray", vmin=0, vmax=1)
    else:
        axs[0].imshow(image.transpose(1, 2, 0))
    axs[0].set_title(name or f"Attribute {k}")
    for ax, c in zip(axs[1:], channels):
        ax.imshow(mask[c], cmap=MASK_COLORMAP, vmin=0, vmax=1)
        ax.set_xlabel(str(c))
    for ax in axs:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    if plot:
        plt.show()


def plot_sweep(
    result: SweepResult, title: str = "Accuracy under Noise", fig: Union[Figure, None] = None,
):
    """Plot the mean accuracy against the noise level for every transformation,
        highlighting the baseline (1, 0) and the best transformation per noise level

    Args:
        result (SweepResult): the sweep
        title (str, optional): plot title. Defaults to "Accuracy under Noise".
        fig (Union[Figure, None], optional): Pyplot figure to plot on, if None then a new plot is created and shown. Defaults to None.
    """
    if fig is None:
        plot = True
        fig, ax = plt.subplots()
    else:
        ax = fig.subplots()
        plot = False
    cells = sorted({(r.n, r.beta) for r in result.mean_records()})
    for n, beta in cells:
        sigmas, acc = mean_accuracy_curve(result, TransformParams(n, beta))
        ax.plot(sigmas, acc, "-", color=MCAN_GRAY, alpha=0.3, linewidth=1)
    sigmas, acc = mean_accuracy_curve(result, IDENTITY)
    ax.plot(sigmas, acc, "o-", color=MCAN_BLUE, label="(n, $\\beta$) = (1, 0)")
    deltas = baseline_delta(result)
    ax.plot(
        [d.sigma for d in deltas], [d.best_acc for d in deltas], "s--", color=MCAN_RED, label="Best"
    )
    ax.set_xlabel("noise $\\sigma$")
    ax.set_ylabel("mean accuracy")
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    if plot:
        plt.show()


def plot_trace(trace, title: str = "Training", fig: Union[Figure, None] = None):
    """Plot the loss components and the held-out accuracy per epoch

    Args:
        trace (TrainTrace): the trace
        title (str, optional): plot title. Defaults to "Training".
        fig (Union[Figure, None], optional): Pyplot figure to plot on, if None then a new plot is created and shown. Defaults to None.
    """
    if fig is None:
        plot = True
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    else:
        ax1, ax2 = fig.subplots(1, 2)
        plot = False
    epochs = trace.column("epoch")
    for name, color in zip(("total", "l_b", "l_m", "l_r"), (MCAN_BLUE, MCAN_LIGHTBLUE, MCAN_RED, MCAN_GRAY)):
        ax1.plot(epochs, trace.column(name), "-", color=color, label=name)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, trace.column("accuracy"), "o-", color=MCAN_BLUE)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("held-out accuracy")
    fig.suptitle(title)
    fig.tight_layout()
    if plot:
        plt.show()
