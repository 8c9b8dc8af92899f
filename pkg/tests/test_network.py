import numpy as np
import pytest
from mcan.autodiff import Tape, Tensor, backward, recording, stack, zero_grad
from mcan.initialisation import glorot_bound
from mcan.network import ABLATIONS, MultiAttrNet, NetConfig, init_params
from mcan.objective import binary_attr_loss
from mcan.transform import IDENTITY, TransformParams
from mcan.utils import DisabledError, ShapeError, ValidationError

from .utils import *


def test_config():
    print("Testing network configs")
    assert NetConfig.desk().feature_channels == 32
    assert NetConfig.paper().feature_channels == 128
    assert NetConfig.paper(image_size=64).image_size == 64
    assert NetConfig().feature_size == 16
    for ablation in ABLATIONS:
        assert NetConfig().with_ablation(ablation).ablation == ablation
    with pytest.raises(ValidationError):
        NetConfig().with_ablation("no_mask")
    with pytest.raises(ValidationError):
        NetConfig(image_size=6).validate()
    with pytest.raises(ValidationError):
        NetConfig(image_size=15).validate()
    with pytest.raises(ValidationError):
        NetConfig(feature_channels=0).validate()
    with pytest.raises(ValidationError):
        NetConfig(num_attributes=0).validate()


def test_init():
    print("Testing the initialisation")
    a = toy_net()
    b = toy_net()
    assert list(a.params) == list(b.params)
    for name in a.params:
        assert np.array_equal(a.params[name].values, b.params[name].values)
        assert a.params[name].requires_grad
    for name, p in a.params.items():
        if name.endswith(".bias"):
            assert np.all(p.values == 0)
    k = a.params["maskgen.0.conv1.kernel"]
    bound = glorot_bound(4 * 9, 4 * 9)
    assert np.all(np.abs(k.values) < bound)
    assert k.shape == (4, 4, 3, 3)
    assert a.params["binhead.2.dense.weight"].shape == (3, 1)
    c = toy_net(seed=7)
    assert not np.array_equal(c.params["extractor.stem.kernel"].values, a.params["extractor.stem.kernel"].values)
    assert len(a.parameters("maskgen")) == 6 * 6
    assert len(a.parameters("binhead")) == 6 * 4
    assert len(a.attribute_parameters("maskgen", 3)) == 6
    assert a.parameters("recon")
    net = toy_net(enable_reconstructor=False, enable_multilabel=False)
    assert net.parameters("recon") == []
    assert net.parameters("multilabel") == []
    with pytest.raises(ValidationError):
        a.parameters("decoder")


def test_extract_features():
    print("Testing the feature extractor")
    net = init_params(NetConfig.desk())
    x = np.random.default_rng(0).uniform(0, 1, (2, 1, 32, 32))
    feat = net.extract_features(x)
    assert feat.shape == (2, 32, 16, 16)
    assert np.array_equal(feat.values, net.extract_features(x).values)
    assert np.all(np.isfinite(feat.values))
    with pytest.raises(ShapeError):
        net.extract_features(np.zeros((2, 3, 32, 32)))
    with pytest.raises(ShapeError):
        net.extract_features(np.zeros((2, 1, 16, 16)))


def test_masks():
    print("Testing the mask generators")
    net = toy_net()
    x, _ = toy_batch(3)
    feat = net.extract_features(x)
    masks = [net.generate_mask(k, feat) for k in range(6)]
    for m in masks:
        assert m.shape == feat.shape
        assert np.all((m.values > 0) & (m.values < 1))
    # perturbing the generator of attribute 1 leaves the mask of attribute 0 unchanged
    for p in net.attribute_parameters("maskgen", 1):
        p.values = p.values + 0.5
    assert np.array_equal(net.generate_mask(0, feat).values, masks[0].values)
    assert not np.array_equal(net.generate_mask(1, feat).values, masks[1].values)
    with pytest.raises(IndexError):
        net.generate_mask(6, feat)
    with pytest.raises(IndexError):
        net.generate_mask(-1, feat)
    with pytest.raises(ShapeError):
        net.generate_mask(0, Tensor(np.zeros((3, 5, 8, 8))))
    assert np.array_equal(net.masks(x, 0), masks[0].values)


def test_binary_head():
    print("Testing the binary heads")
    net = toy_net()
    x, _ = toy_batch(3)
    feat = net.extract_features(x)
    p = net.binary_head(2, feat)
    assert p.shape == (3,)
    assert np.all((p.values > 0) & (p.values < 1))
    zero = net.binary_head(2, Tensor(np.zeros(feat.shape)))
    assert np.all(zero.values == zero.values[0])
    with pytest.raises(ShapeError):
        net.binary_head(0, Tensor(np.zeros((3, 4, 4, 4))))


def test_forward_attribute():
    print("Testing the attribute forward pass")
    net = toy_net()
    x, _ = toy_batch(2)
    feat = net.extract_features(x)
    for k in range(6):
        mask = net.generate_mask(k, feat)
        train_prob = net.binary_head(k, (1.0 + mask) * feat)
        prob, m = net.forward_attribute(k, x)
        assert np.array_equal(prob.values, train_prob.values)
        assert np.array_equal(m.values, mask.values)
        assert prob.shape == (2,)
        assert m.shape == (2, 4, 8, 8)
        unmasked, _ = net.forward_attribute(k, x, TransformParams(0, 1))
        assert np.array_equal(unmasked.values, net.binary_head(k, feat).values)
    sharp, _ = net.forward_attribute(0, None, TransformParams(4, 0.5), feat=feat)
    assert np.all((sharp.values > 0) & (sharp.values < 1))
    with pytest.raises(ValidationError):
        net.forward_attribute(0, x, TransformParams(1, 2))


def test_auxiliary_heads():
    print("Testing the multi-label head and the reconstructor")
    net = toy_net()
    x, _ = toy_batch(2)
    feat = net.extract_features(x)
    ml = net.multilabel_head(feat)
    assert ml.shape == (2, 6)
    assert np.all((ml.values > 0) & (ml.values < 1))
    rec = net.reconstruct(feat)
    assert rec.shape == x.shape
    assert np.all((rec.values > 0) & (rec.values < 1))
    assert np.array_equal(rec.values, net.reconstruct(feat).values)
    net = toy_net(enable_reconstructor=False, enable_multilabel=False)
    feat = net.extract_features(x)
    with pytest.raises(DisabledError):
        net.multilabel_head(feat)
    with pytest.raises(DisabledError):
        net.reconstruct(feat)


def test_probabilities():
    print("Testing batched inference")
    net = toy_net()
    x, _ = toy_batch(5)
    transforms = [IDENTITY, TransformParams(2, 0.5), TransformParams(0, 1)]
    probs = net.attribute_probabilities(x, transforms, batch_size=2)
    assert probs.shape == (3, 5, 6)
    assert np.allclose(probs[0], net.predict_proba(x, batch_size=5), rtol=0, atol=1e-12)
    prob, _ = net.forward_attribute(4, x, TransformParams(2, 0.5))
    assert np.allclose(probs[1, :, 4], prob.values, rtol=0, atol=1e-12)
    copy = net.copy()
    copy.params["binhead.0.dense.bias"].values += 1.0
    assert not np.array_equal(copy.predict_proba(x)[:, 0], probs[0, :, 0])
    assert np.allclose(net.predict_proba(x), probs[0], rtol=0, atol=1e-12)


def _attribute_loss(net: MultiAttrNet, x: np.ndarray, labels: np.ndarray, k: int):
    zero_grad(net.parameters())
    tape = Tape()
    with recording(tape):
        prob, _ = net.forward_attribute(k, x)
        loss = binary_attr_loss(stack([prob], 1), labels[:, [k]])
    backward(loss, tape)
    return loss


def test_gradient_flow():
    print("Testing gradients through the masks")
    nonzero = 0
    for trial in range(20):
        net = toy_net(seed=trial)
        x, labels = toy_batch(2, seed=trial)
        _attribute_loss(net, x, labels, trial % 6)
        if any(np.any(p.grad != 0) for p in net.attribute_parameters("maskgen", trial % 6)):
            nonzero += 1
    assert nonzero >= 19


def test_attribute_isolation():
    print("Testing attribute isolation")
    net = toy_net()
    x, labels = toy_batch(2)
    _attribute_loss(net, x, labels, 1)
    for j in range(6):
        if j == 1:
            continue
        for p in net.attribute_parameters("binhead", j) + net.attribute_parameters("maskgen", j):
            assert np.all(p.grad == 0)
    assert any(np.any(p.grad != 0) for p in net.parameters("extractor"))
    assert any(np.any(p.grad != 0) for p in net.attribute_parameters("binhead", 1))
    assert all(np.all(p.grad == 0) for p in net.parameters("recon"))
