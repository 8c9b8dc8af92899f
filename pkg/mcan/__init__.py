"""
    __ MCAN - Multi-Channel Attention Networks __

    Multi-attribute image classification where every attribute gets its own
    attention sub-network.


    A shared convolutional extractor produces a feature tensor for an image.
    For every attribute a mask generator turns the features into a
    multi-channel attention mask (one weight per feature channel and
    position, in [0, 1]), and a binary head classifies the masked features.
    During training the features are multiplied by (1 + M), so that the mask
    only emphasises and never removes information. Two auxiliary heads, a
    multi-label classifier and an image reconstructor, regularise the shared
    features and can be switched off for ablations.

    At inference the masks can be reshaped with a tone-curve-like
    transformation g(M; n, beta), that sharpens the mask (n > 1) and
    suppresses the weak activations (beta > 0). Such transformations can
    improve the robustness against Gaussian image noise, which is measured by
    sweeping a grid of (n, beta) over increasing noise levels.

    The masks are also interpretable: the mean activation of a channel is its
    importance for an attribute, and correlations between channels (and
    between attributes through their importance vectors) show which features
    the attributes share.


    Use `classify` or `MultiAttributeClassifier` from Python, or the `mcan`
    command (`python -m mcan --help`) for the full pipeline.

"""

from mcan.mcan import MultiAttributeClassifier, classify
from mcan.network import MultiAttrNet, NetConfig, init_params
from mcan.transform import TransformParams, IDENTITY, g, transform_mask
from mcan.data import Sample, DatasetSpec, generate_synthetic
from mcan.robustness import SweepSpec, run_sweep
