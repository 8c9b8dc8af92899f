"""
    This script contains the main classifier class and the training wrapper
"""

from __future__ import annotations
from typing import List, Optional, Sequence, Union
from warnings import warn
from matplotlib.pyplot import Figure
import numpy as np
from mcan.checkpoint import load_checkpoint, save_checkpoint
from mcan.data import Sample, images_and_labels
from mcan.network import MultiAttrNet, NetConfig, init_params
from mcan.objective import LossWeights
from mcan.optimisation import TrainConfig, TrainTrace, train
from mcan.plot import fill_attribute_names, plot_masks, plot_trace, print_accuracy
from mcan.robustness import accuracy
from mcan.transform import IDENTITY, TransformParams
from mcan.utils import McanException, McanWarning


def classify(
    samples: Sequence[Sample],
    attribute_names: Optional[List[str]] = None,
    eval_samples: Optional[Sequence[Sample]] = None,
    **kwargs,
) -> MultiAttributeClassifier:
    """Train a multi-attribute classifier with multi-channel attention masks.
        This is a wrapper that is equivalent to
        `MultiAttributeClassifier(**kwargs).fit(samples, attribute_names, eval_samples)`

    Args:
        samples (Sequence[Sample]): the training samples
        attribute_names (Optional[List[str]], optional): attribute names. Defaults to None.
        eval_samples (Optional[Sequence[Sample]], optional): held-out samples for the trace. Defaults to None.
        **kwargs: arguments for `MultiAttributeClassifier`

    Returns:
        MultiAttributeClassifier: the trained classifier
    """
    return MultiAttributeClassifier(**kwargs).fit(samples, attribute_names, eval_samples)


class MultiAttributeClassifier:
    """
        Class for holding a trained network with multi-channel attention masks.
        Can also be used sklearn-style to train the network.
    """

    def __init__(
        self,
        feature_channels: int = 32,
        head_hidden: int = 16,
        ablation: str = "full",
        loss_weights: LossWeights = LossWeights(),
        epochs: int = 15,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        optimizer: str = "adam",
        seed: int = 42,
        transform: TransformParams = IDENTITY,
        threshold: float = 0.5,
        **kwargs,
    ):
        """Prepare the classifier, call `fit` to train it on a dataset.

        Args:
            feature_channels (int, optional): channels of the features and masks. Defaults to 32.
            head_hidden (int, optional): hidden channels of the binary heads. Defaults to 16.
            ablation (str, optional): "full", "no_recon", "no_multilabel" or "no_both". Defaults to "full".
            loss_weights (LossWeights, optional): weights of the loss terms. Defaults to LossWeights().
            epochs (int, optional): training epochs. Defaults to 15.
            batch_size (int, optional): minibatch size. Defaults to 32.
            learning_rate (float, optional): learning rate. Defaults to 1e-3.
            optimizer (str, optional): "adam" or "sgd". Defaults to "adam".
            seed (int, optional): seed for the initialisation and the shuffling. Defaults to 42.
            transform (TransformParams, optional): mask transformation used for predictions. Defaults to IDENTITY.
            threshold (float, optional): decision threshold. Defaults to 0.5.
            **kwargs: other `TrainConfig` fields
        """
        self.feature_channels = feature_channels
        self.head_hidden = head_hidden
        self.transform = transform.validate()
        self.threshold = threshold
        self.seed = seed
        self.train_config = TrainConfig(
            epochs=epochs,
            batch_size=batch_size,
            learning_rate=learning_rate,
            optimizer=optimizer,
            loss_weights=loss_weights,
            ablation=ablation,
            seed=seed,
            **kwargs,
        ).validate()
        self.net: Optional[MultiAttrNet] = None
        self.trace: Optional[TrainTrace] = None
        self.attribute_names: Optional[List[str]] = None

    def fit(
        self,
        samples: Sequence[Sample],
        attribute_names: Optional[List[str]] = None,
        eval_samples: Optional[Sequence[Sample]] = None,
    ) -> MultiAttributeClassifier:
        """Train the network on a dataset

        Args:
            samples (Sequence[Sample]): the training samples
            attribute_names (Optional[List[str]], optional): attribute names. Defaults to None.
            eval_samples (Optional[Sequence[Sample]], optional): held-out samples for the trace. Defaults to None.

        Returns:
            MultiAttributeClassifier: self, containing the trained network
        """
        if len(samples) == 0:
            raise McanException("Cannot fit an empty dataset")
        image = np.asarray(samples[0].image)
        config = NetConfig(
            image_channels=image.shape[0],
            image_size=image.shape[-1],
            feature_channels=self.feature_channels,
            num_attributes=len(samples[0].labels),
            head_hidden=self.head_hidden,
            seed=self.seed,
        ).with_ablation(self.train_config.ablation)
        self.attribute_names = fill_attribute_names(attribute_names, config.num_attributes)
        self.net, self.trace = train(init_params(config), samples, self.train_config, eval_samples)
        return self

    def _check_fitted(self):
        if self.net is None:
            raise McanException("The classifier has not been fitted")

    def predict_proba(
        self, images: np.ndarray, transform: Optional[TransformParams] = None
    ) -> np.ndarray:
        """Attribute probabilities [N, K]

        Args:
            images (np.ndarray): [N, Cimg, H, W] images (or a single [Cimg, H, W] image)
            transform (Optional[TransformParams], optional): mask transformation. Defaults to the one given in the constructor.

        Returns:
            np.ndarray: the probabilities
        """
        self._check_fitted()
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        return self.net.predict_proba(images, transform or self.transform)

    def predict(self, images: np.ndarray, transform: Optional[TransformParams] = None) -> np.ndarray:
        """
            Binary attribute predictions [N, K]
        """
        return (self.predict_proba(images, transform) >= self.threshold).astype(int)

    def score(
        self, samples: Sequence[Sample], transform: Optional[TransformParams] = None
    ) -> np.ndarray:
        """
            Accuracy per attribute
        """
        images, labels = images_and_labels(samples)
        return accuracy(self.predict_proba(images, transform), labels, self.threshold)

    def masks(self, images: np.ndarray, k: int) -> np.ndarray:
        """
            Attention masks [N, C, H/2, W/2] of attribute k
        """
        self._check_fitted()
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        return self.net.masks(images, k)

    def save(self, path: str):
        self._check_fitted()
        save_checkpoint(self.net, self.train_config, path)

    @classmethod
    def load(cls, path: str) -> MultiAttributeClassifier:
        """
            Create a classifier from a checkpoint
        """
        net, train_config = load_checkpoint(path)
        if train_config is None:
            warn("The checkpoint has no training config, using the defaults", McanWarning)
            train_config = TrainConfig(ablation=net.config.ablation)
        out = cls(
            feature_channels=net.config.feature_channels,
            head_hidden=net.config.head_hidden,
            seed=net.config.seed,
        )
        out.train_config = train_config
        out.net = net
        out.attribute_names = fill_attribute_names(None, net.config.num_attributes)
        return out

    def print(
        self, samples: Sequence[Sample], title: str = "Multi-Attribute Classifier", decimals: int = 3
    ):
        """
            Print the per-attribute accuracies on a dataset
        """
        print_accuracy(self.score(samples), self.attribute_names, title, decimals)

    def plot_masks(
        self, sample: Sample, k: int, num_channels: int = 7, fig: Union[Figure, None] = None
    ):
        """
            Show the most active mask channels for an attribute of a sample
        """
        self._check_fitted()
        plot_masks(self.net, sample, k, num_channels, self.attribute_names[k], fig)

    def plot_trace(self, fig: Union[Figure, None] = None):
        if self.trace is None:
            raise McanException("The classifier has no training trace")
        plot_trace(self.trace, fig=fig)
