import numpy as np
import numpy.random as npr
from mcan.autodiff import Tensor, activation_patterns
from mcan.data import DatasetSpec, Sample, generate_synthetic
from mcan.network import NetConfig, init_params


def data_create(n: int, size: int = 16, seed: int = 0) -> list:
    return generate_synthetic(DatasetSpec(n, size, seed=seed))


def toy_net(channels: int = 4, size: int = 16, k: int = 6, seed: int = 42, **kwargs):
    return init_params(
        NetConfig(
            image_size=size,
            feature_channels=channels,
            num_attributes=k,
            head_hidden=3,
            seed=seed,
            **kwargs,
        )
    )


def toy_batch(n: int = 2, size: int = 16, k: int = 6, seed: int = 0) -> (np.ndarray, np.ndarray):
    rng = npr.default_rng(seed)
    images = rng.uniform(0.0, 1.0, (n, 1, size, size))
    labels = (rng.random((n, k)) < 0.5).astype(float)
    return images, labels


def conv_oracle(x, w, b=None, stride=1, dilation=1, padding=0) -> np.ndarray:
    # brute force cross-correlation
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    ho = (H - dilation * (kh - 1) - 1) // stride + 1
    wo = (W - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((B, O, ho, wo))
    for bi in range(B):
        for o in range(O):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for c in range(C):
                        for p in range(kh):
                            for q in range(kw):
                                s += x[bi, c, i * stride + p * dilation, j * stride + q * dilation] * w[o, c, p, q]
                    out[bi, o, i, j] = s + (0.0 if b is None else b[o])
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def finite_diff_subset(f, t: Tensor, indices, eps: float = 1e-4) -> (np.ndarray, np.ndarray):
    # central differences for a few elements of a large tensor, flagging the
    # elements where the step crosses a relu kink
    flat = t.values.reshape(-1)
    with activation_patterns() as base:
        f()
    out = []
    smooth = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        with activation_patterns() as plus:
            fp = f()
        flat[i] = orig - eps
        with activation_patterns() as minus:
            fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * eps))
        smooth.append(
            all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(base, plus, minus))
        )
    return np.array(out), np.array(smooth)


def constant_sample(value: float, k: int = 6, size: int = 16) -> Sample:
    return Sample(np.full((1, size, size), value), np.zeros(k, int), None)
