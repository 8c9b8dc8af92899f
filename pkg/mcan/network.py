"""
    This script contains the multi-attribute network with multi-channel attention masks.

    The shared feature extractor f_f is a stride-2 stem followed by three dilated
    convolution blocks (dilations 1, 2, 4). Every attribute k has its own mask
    generator M^k, producing a mask with one spatial map per feature channel, and
    its own binary head f_b^k, which classifies the masked features
    (1 + M^k) * f_f(x). Two optional components shape the representation during
    training: a multi-label head f_m on the unmasked features, and a reconstructor
    f_r decoding the features back into the image.
"""

from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union
import numpy as np
from mcan.autodiff import (
    Tensor,
    as_tensor,
    conv2d,
    matmul,
    mean,
    relu,
    reshape,
    sigmoid_,
    upsample_nearest,
)
from mcan.initialisation import initialise_conv, initialise_dense
from mcan.transform import IDENTITY, TransformParams, transform_mask
from mcan.utils import DisabledError, ShapeError, ValidationError, batch_ranges

ABLATIONS = ("full", "no_recon", "no_multilabel", "no_both")
DILATIONS = (1, 2, 4)
PARAMETER_GROUPS = ("extractor", "maskgen", "binhead", "multilabel", "recon")


class NetConfig(NamedTuple):
    """
        Architecture of the network
    """

    image_channels: int = 1
    image_size: int = 32
    feature_channels: int = 32
    num_attributes: int = 6
    head_hidden: int = 16
    enable_reconstructor: bool = True
    enable_multilabel: bool = True
    seed: int = 42

    @classmethod
    def desk(cls, **kwargs) -> "NetConfig":
        """
            Small default configuration that trains in minutes on a CPU
        """
        return cls(**kwargs)

    @classmethod
    def paper(cls, **kwargs) -> "NetConfig":
        """
            The published feature/mask dimensionality (128 channels)
        """
        kwargs.setdefault("feature_channels", 128)
        return cls(**kwargs)

    @property
    def feature_size(self) -> int:
        return self.image_size // 2

    @property
    def ablation(self) -> str:
        if self.enable_reconstructor and self.enable_multilabel:
            return "full"
        if self.enable_multilabel:
            return "no_recon"
        if self.enable_reconstructor:
            return "no_multilabel"
        return "no_both"

    def with_ablation(self, ablation: str) -> "NetConfig":
        """
            Copy of the config with the components enabled according to the ablation
        """
        if ablation not in ABLATIONS:
            raise ValidationError(f"Unknown ablation '{ablation}', expected one of {ABLATIONS}")
        return self._replace(
            enable_reconstructor=ablation in ("full", "no_multilabel"),
            enable_multilabel=ablation in ("full", "no_recon"),
        )

    def validate(self) -> "NetConfig":
        if self.image_channels < 1:
            raise ValidationError(f"image_channels must be positive, got {self.image_channels}")
        if self.feature_channels < 1:
            raise ValidationError(f"feature_channels must be positive, got {self.feature_channels}")
        if self.num_attributes < 1:
            raise ValidationError(f"num_attributes must be positive, got {self.num_attributes}")
        if self.head_hidden < 1:
            raise ValidationError(f"head_hidden must be positive, got {self.head_hidden}")
        if self.image_size < 8 or self.image_size % 2:
            raise ValidationError(f"image_size must be even and at least 8, got {self.image_size}")
        return self


def init_params(config: NetConfig) -> "MultiAttrNet":
    """Create a network with freshly initialised parameters.
        Kernels and weights are Glorot uniform, biases are zero. The parameters
        are drawn from one seeded generator in a fixed order, so the same seed
        always gives the same network.

    Args:
        config (NetConfig): the architecture

    Returns:
        MultiAttrNet: the network
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    C = config.feature_channels
    params: Dict[str, Tensor] = {}
    initialise_conv(params, rng, "extractor.stem", C, config.image_channels, 3)
    for i in range(len(DILATIONS)):
        initialise_conv(params, rng, f"extractor.block{i + 1}", C, C, 3)
    for k in range(config.num_attributes):
        initialise_conv(params, rng, f"maskgen.{k}.conv1", C, C, 3)
        initialise_conv(params, rng, f"maskgen.{k}.conv2", C, C, 3)
        initialise_conv(params, rng, f"maskgen.{k}.conv3", C, C, 1)
    for k in range(config.num_attributes):
        initialise_conv(params, rng, f"binhead.{k}.conv", config.head_hidden, C, 3)
        initialise_dense(params, rng, f"binhead.{k}.dense", config.head_hidden, 1)
    if config.enable_multilabel:
        initialise_dense(params, rng, "multilabel.dense", C, config.num_attributes)
    if config.enable_reconstructor:
        initialise_conv(params, rng, "recon.conv1", max(1, C // 2), C, 1)
        initialise_conv(params, rng, "recon.conv2", config.image_channels, max(1, C // 2), 3)
    return MultiAttrNet(config, params)


class MultiAttrNet:
    """
        Parameter container and forward computations of the network
    """

    def __init__(self, config: NetConfig, params: Dict[str, Tensor]):
        self.config = config.validate()
        self.params = params

    def parameters(self, group: Optional[str] = None) -> List[Tensor]:
        """Get the parameter tensors (in creation order)

        Args:
            group (Optional[str], optional): one of "extractor", "maskgen", "binhead", "multilabel", "recon" or None for all. Defaults to None.

        Returns:
            List[Tensor]: the parameters
        """
        if group is None:
            return list(self.params.values())
        if group not in PARAMETER_GROUPS:
            raise ValidationError(f"Unknown parameter group '{group}'")
        return [p for name, p in self.params.items() if name.split(".", 1)[0] == group]

    def attribute_parameters(self, group: str, k: int) -> List[Tensor]:
        """
            The parameters of the mask generator ("maskgen") or binary head ("binhead") of attribute k
        """
        self._check_attribute(k)
        prefix = f"{group}.{k}."
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def copy(self) -> "MultiAttrNet":
        params = {name: Tensor(p.values, requires_grad=True) for name, p in self.params.items()}
        return MultiAttrNet(self.config, params)

    def _check_attribute(self, k: int):
        if not 0 <= k < self.config.num_attributes:
            raise IndexError(
                f"Attribute index {k} out of range for {self.config.num_attributes} attributes"
            )

    def _check_features(self, feat: Tensor, name: str):
        size = self.config.feature_size
        if feat.ndim != 4 or feat.shape[1:] != (self.config.feature_channels, size, size):
            raise ShapeError(
                f"{name} expects features of shape [B, {self.config.feature_channels}, {size}, {size}], got {feat.shape}"
            )

    def _conv(self, name: str, x: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
        kernel = self.params[name + ".kernel"]
        padding = dilation * (kernel.shape[2] // 2)
        return conv2d(x, kernel, self.params[name + ".bias"], stride, dilation, padding)

    def _dense(self, name: str, x: Tensor) -> Tensor:
        return matmul(x, self.params[name + ".weight"]) + self.params[name + ".bias"]

    def extract_features(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        """Shared feature extractor f_f

        Args:
            x (Union[Tensor, np.ndarray]): [B, Cimg, H, W] images with values in [0, 1]

        Raises:
            ShapeError: if the images do not match the configured channels and size

        Returns:
            Tensor: [B, C, H/2, W/2] features
        """
        x = as_tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"Expected images of shape [B, {cfg.image_channels}, {cfg.image_size}, {cfg.image_size}], got {x.shape}"
            )
        feat = relu(self._conv("extractor.stem", x, stride=2))
        for i, dilation in enumerate(DILATIONS):
            feat = relu(self._conv(f"extractor.block{i + 1}", feat, dilation=dilation))
        return feat

    def generate_mask(self, k: int, feat: Tensor) -> Tensor:
        """
            Multi-channel attention mask M^k, same shape as the features, values in (0, 1)
        """
        self._check_attribute(k)
        self._check_features(feat, "generate_mask")
        m = relu(self._conv(f"maskgen.{k}.conv1", feat))
        m = relu(self._conv(f"maskgen.{k}.conv2", m))
        return sigmoid_(self._conv(f"maskgen.{k}.conv3", m))

    def binary_head(self, k: int, masked_feat: Tensor) -> Tensor:
        """
            Probability [B] that attribute k is present
        """
        self._check_attribute(k)
        self._check_features(masked_feat, "binary_head")
        hidden = relu(self._conv(f"binhead.{k}.conv", masked_feat))
        pooled = mean(hidden, (2, 3))
        logit = self._dense(f"binhead.{k}.dense", pooled)
        return sigmoid_(reshape(logit, (masked_feat.shape[0],)))

    def forward_attribute(
        self,
        k: int,
        x: Union[Tensor, np.ndarray],
        transform: TransformParams = IDENTITY,
        feat: Optional[Tensor] = None,
    ) -> Tuple[Tensor, Tensor]:
        """Classify attribute k from the transformed-mask weighted features

        Args:
            k (int): attribute index
            x (Union[Tensor, np.ndarray]): [B, Cimg, H, W] images (ignored if `feat` is given)
            transform (TransformParams, optional): mask transformation, (1, 0) is the training-time 1 + M. Defaults to IDENTITY.
            feat (Optional[Tensor], optional): precomputed features. Defaults to None.

        Returns:
            Tuple[Tensor, Tensor]: probabilities [B] and the mask [B, C, Hf, Wf]
        """
        if feat is None:
            feat = self.extract_features(x)
        return self._transformed_head(k, feat, self.generate_mask(k, feat), transform.validate())

    def multilabel_head(self, feat: Tensor) -> Tensor:
        """
            Probabilities [B, K] from the unmasked features
        """
        if not self.config.enable_multilabel:
            raise DisabledError("The multi-label head is disabled in this network")
        self._check_features(feat, "multilabel_head")
        return sigmoid_(self._dense("multilabel.dense", mean(feat, (2, 3))))

    def reconstruct(self, feat: Tensor) -> Tensor:
        """
            Decode the features into [B, Cimg, H, W] images with values in (0, 1)
        """
        if not self.config.enable_reconstructor:
            raise DisabledError("The reconstructor is disabled in this network")
        self._check_features(feat, "reconstruct")
        r = relu(self._conv("recon.conv1", feat))
        r = upsample_nearest(r, 2)
        return sigmoid_(self._conv("recon.conv2", r))

    def attribute_probabilities(
        self,
        images: np.ndarray,
        transforms: Sequence[TransformParams] = (IDENTITY,),
        batch_size: int = 64,
    ) -> np.ndarray:
        """Predict all attributes under several mask transformations.
            The features and masks are computed once per batch and shared by the transformations.

        Args:
            images (np.ndarray): [N, Cimg, H, W] images
            transforms (Sequence[TransformParams], optional): the transformations. Defaults to (IDENTITY,).
            batch_size (int, optional): inference batch size. Defaults to 64.

        Returns:
            np.ndarray: probabilities [len(transforms), N, K]
        """
        images = np.asarray(images, dtype=np.float64)
        transforms = [t.validate() for t in transforms]
        K = self.config.num_attributes
        out = np.zeros((len(transforms), images.shape[0], K))
        for start, stop in batch_ranges(images.shape[0], batch_size):
            feat = self.extract_features(images[start:stop])
            for k in range(K):
                mask = self.generate_mask(k, feat)
                for i, t in enumerate(transforms):
                    prob, _ = self._transformed_head(k, feat, mask, t)
                    out[i, start:stop, k] = prob.values
        return out

    def _transformed_head(
        self, k: int, feat: Tensor, mask: Tensor, transform: TransformParams
    ) -> Tuple[Tensor, Tensor]:
        multiplier = 1.0 + mask if transform.is_identity else transform_mask(mask, transform)
        return self.binary_head(k, multiplier * feat), mask

    def predict_proba(
        self, images: np.ndarray, transform: TransformParams = IDENTITY, batch_size: int = 64
    ) -> np.ndarray:
        """
            Probabilities [N, K] for all attributes
        """
        return self.attribute_probabilities(images, (transform,), batch_size)[0]

    def masks(self, images: np.ndarray, k: int, batch_size: int = 64) -> np.ndarray:
        """
            Attention masks [N, C, Hf, Wf] of attribute k
        """
        self._check_attribute(k)
        images = np.asarray(images, dtype=np.float64)
        size = self.config.feature_size
        out = np.zeros((images.shape[0], self.config.feature_channels, size, size))
        for start, stop in batch_ranges(images.shape[0], batch_size):
            feat = self.extract_features(images[start:stop])
            out[start:stop] = self.generate_mask(k, feat).values
        return out
