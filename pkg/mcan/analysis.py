"""
    This script contains the interpretability analysis of the attention masks.

    Channel importance is the mean mask activation of a channel. Channels are
    correlated through their per-sample, per-attribute mean activations, and
    attributes through their importance vectors (both with Pearson's r).
"""

import json
import os
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union
import numpy as np
from mcan.data import Sample, images_and_labels, write_pnm
from mcan.network import MultiAttrNet
from mcan.utils import ValidationError, batch_ranges, descending_order, format_float, pearson_matrix

LOCALIZATION_CAP = 1e6


class ImportanceVector(NamedTuple):
    attribute: int
    scores: np.ndarray


class CorrelationMatrix(NamedTuple):
    labels: List[str]
    values: np.ndarray

    def top(self, k: int = 5) -> Dict[str, List[Tuple[str, float]]]:
        """
            The k most correlated other labels for every label, in descending order (ties by position)
        """
        out = {}
        for i, label in enumerate(self.labels):
            order = [j for j in descending_order(self.values[i]) if j != i][:k]
            out[label] = [(self.labels[j], float(self.values[i, j])) for j in order]
        return out

    def to_json(self, path: str, k: int = 5):
        doc = {
            "labels": list(self.labels),
            "matrix": self.values.tolist(),
            f"top{k}": {a: [[b, v] for b, v in t] for a, t in self.top(k).items()},
        }
        with open(path, "w") as f:
            json.dump(doc, f, indent=1, sort_keys=True)

    def to_csv(self, path: str):
        with open(path, "w") as f:
            f.write("row,col,value\n")
            for i, a in enumerate(self.labels):
                for j, b in enumerate(self.labels):
                    f.write(f"{a},{b},{format_float(self.values[i, j])}\n")


def _images(samples: Union[Sequence[Sample], np.ndarray]) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return samples
    if len(samples) == 0:
        raise ValidationError("No samples")
    return images_and_labels(samples)[0]


def mask_statistics(
    net: MultiAttrNet,
    samples: Union[Sequence[Sample], np.ndarray],
    attributes: Optional[Sequence[int]] = None,
    batch_size: int = 64,
) -> np.ndarray:
    """Spatial mean of every mask channel

    Args:
        net (MultiAttrNet): the network
        samples (Union[Sequence[Sample], np.ndarray]): samples or images [N, Cimg, H, W]
        attributes (Optional[Sequence[int]], optional): attribute indices. Defaults to all.
        batch_size (int, optional): inference batch size. Defaults to 64.

    Returns:
        np.ndarray: [N, len(attributes), C] mean activations
    """
    images = _images(samples)
    if images.shape[0] == 0:
        raise ValidationError("No samples")
    if attributes is None:
        attributes = range(net.config.num_attributes)
    attributes = list(attributes)
    stats = np.zeros((images.shape[0], len(attributes), net.config.feature_channels))
    for start, stop in batch_ranges(images.shape[0], batch_size):
        feat = net.extract_features(images[start:stop])
        for i, k in enumerate(attributes):
            stats[start:stop, i] = net.generate_mask(k, feat).values.mean((2, 3))
    return stats


def channel_importance(
    net: MultiAttrNet, samples: Union[Sequence[Sample], np.ndarray], k: int
) -> ImportanceVector:
    """
        Mean activation of every channel of the mask of attribute k over the samples and positions
    """
    return ImportanceVector(k, mask_statistics(net, samples, [k])[:, 0].mean(0))


def importance_matrix(net: MultiAttrNet, samples: Union[Sequence[Sample], np.ndarray]) -> np.ndarray:
    """
        [K, C] channel importance of every attribute
    """
    return mask_statistics(net, samples).mean(0)


def top_k_channels(importance: Union[ImportanceVector, np.ndarray], k_top: int) -> List[int]:
    """
        The k_top channels with the highest scores, ties broken by ascending channel id
    """
    scores = importance.scores if isinstance(importance, ImportanceVector) else np.asarray(importance)
    if not 1 <= k_top <= len(scores):
        raise ValidationError(f"k_top must be in [1, {len(scores)}], got {k_top}")
    return [int(c) for c in descending_order(scores)[:k_top]]


def shared_channels(
    a: Union[ImportanceVector, np.ndarray], b: Union[ImportanceVector, np.ndarray], k_top: int
) -> Tuple[List[int], List[int], List[int]]:
    """Compare the most important channels of two attributes

    Returns:
        Tuple[List[int], List[int], List[int]]: channels in both top lists, only in the first, only in the second
    """
    ta = top_k_channels(a, k_top)
    tb = top_k_channels(b, k_top)
    return (
        [c for c in ta if c in tb],
        [c for c in ta if c not in tb],
        [c for c in tb if c not in ta],
    )


def feature_correlation(
    net: MultiAttrNet, samples: Union[Sequence[Sample], np.ndarray]
) -> CorrelationMatrix:
    """Correlation between the feature channels.
        Every channel is observed once per sample and attribute (its mean mask activation).

    Args:
        net (MultiAttrNet): the network
        samples (Union[Sequence[Sample], np.ndarray]): at least two samples

    Returns:
        CorrelationMatrix: [C, C] Pearson correlations
    """
    images = _images(samples)
    if images.shape[0] < 2:
        raise ValidationError("At least two samples are needed for correlations")
    stats = mask_statistics(net, images)
    observations = stats.reshape(-1, stats.shape[2])
    labels = [f"ch{c}" for c in range(stats.shape[2])]
    return CorrelationMatrix(labels, pearson_matrix(observations))


def attribute_correlation(
    net: MultiAttrNet,
    samples: Union[Sequence[Sample], np.ndarray],
    names: Optional[Sequence[str]] = None,
) -> CorrelationMatrix:
    """
        Correlation between the attributes, observed through their channel importance vectors
    """
    K = net.config.num_attributes
    if K < 2:
        raise ValidationError("At least two attributes are needed for attribute correlations")
    images = _images(samples)
    if images.shape[0] < 2:
        raise ValidationError("At least two samples are needed for correlations")
    if names is None:
        names = [f"attr{k}" for k in range(K)]
    return CorrelationMatrix(list(names), pearson_matrix(importance_matrix(net, images).T))


def importance_csv(matrix: np.ndarray, path: str, names: Optional[Sequence[str]] = None):
    """
        Write `attribute,channel,score` rows, by attribute and then descending score
    """
    if names is None:
        names = [str(k) for k in range(matrix.shape[0])]
    with open(path, "w") as f:
        f.write("attribute,channel,score\n")
        for name, scores in zip(names, matrix):
            for c in descending_order(scores):
                f.write(f"{name},{c},{format_float(scores[c])}\n")


def upsample(maps: np.ndarray, factor: int) -> np.ndarray:
    """
        Nearest-neighbour upsampling of the two last axes
    """
    return maps.repeat(factor, -2).repeat(factor, -1)


def export_masks(net: MultiAttrNet, sample: Sample, k: int, out_dir: str) -> List[str]:
    """Write every channel of the mask of attribute k as a grayscale image.
        Each channel is upsampled to the image resolution and min-max normalised
        (constant channels become 0.5). `attr{k}_index.json` stores the ranges.

    Args:
        net (MultiAttrNet): the network
        sample (Sample): the sample
        k (int): the attribute
        out_dir (str): output directory (created if needed)

    Returns:
        List[str]: the written image paths
    """
    os.makedirs(out_dir, exist_ok=True)
    mask = net.masks(np.asarray(sample.image)[None], k)[0]
    mask = upsample(mask, net.config.image_size // mask.shape[-1])
    paths = []
    index = []
    for c, channel in enumerate(mask):
        low, high = float(channel.min()), float(channel.max())
        if high > low:
            image = (channel - low) / (high - low)
        else:
            image = np.full_like(channel, 0.5)
        path = os.path.join(out_dir, f"attr{k}_ch{c}.pgm")
        write_pnm(path, image)
        paths.append(path)
        index.append({"channel": c, "file": os.path.basename(path), "min": low, "max": high})
    with open(os.path.join(out_dir, f"attr{k}_index.json"), "w") as f:
        json.dump({"attribute": k, "channels": index}, f, indent=1)
    return paths


def support_ratio(activation: np.ndarray, supports: np.ndarray) -> float:
    """Ratio of the mean activation on the support pixels to the mean on the other pixels

    Args:
        activation (np.ndarray): [N, H, W] activations
        supports (np.ndarray): [N, H, W] boolean supports

    Returns:
        float: the ratio, capped at 1e6
    """
    supports = np.asarray(supports, bool)
    if not supports.any() or supports.all():
        raise ValidationError("The supports must contain both support and non-support pixels")
    inside = float(np.mean(activation[supports]))
    outside = float(np.mean(activation[~supports]))
    if outside <= 0:
        return LOCALIZATION_CAP if inside > 0 else 1.0
    return min(inside / outside, LOCALIZATION_CAP)


def localization_score(
    net: MultiAttrNet, samples: Sequence[Sample], k: int, batch_size: int = 64
) -> float:
    """How much the mask of attribute k focuses on the pixels that realise the attribute.
        The channel-wise maximum of the mask is upsampled to the image resolution,
        and the mean over the support pixels of all positive samples is divided
        by the mean over the other pixels.

    Args:
        net (MultiAttrNet): the network
        samples (Sequence[Sample]): samples with supports
        k (int): the attribute
        batch_size (int, optional): inference batch size. Defaults to 64.

    Raises:
        ValidationError: if a sample lacks supports or no sample has the attribute

    Returns:
        float: the ratio (> 1 means the mask focuses on the support), capped at 1e6
    """
    if any(s.supports is None for s in samples):
        raise ValidationError("The localization score requires samples with supports")
    positives = [s for s in samples if s.labels[k] == 1]
    if not positives:
        raise ValidationError(f"No positive samples for attribute {k}")
    images = images_and_labels(positives)[0]
    masks = net.masks(images, k, batch_size)
    activation = upsample(masks.max(1), net.config.image_size // masks.shape[-1])
    return support_ratio(activation, np.stack([s.supports[k] for s in positives]))
