import os
import numpy as np
import pytest
from mcan.data import (
    ATTRIBUTE_FILE,
    SYNTHETIC_ATTRIBUTES,
    DatasetSpec,
    add_gaussian_noise,
    convert_channels,
    corrupt_samples,
    export_synthetic,
    gaussian_noise,
    generate_synthetic,
    images_and_labels,
    load_celeba_format,
    load_dataset,
    read_attribute_file,
    read_pnm,
    resize_bilinear,
    rle_decode,
    rle_encode,
    split,
    write_attribute_file,
    write_pnm,
)
from mcan.utils import FormatError, MissingImageError, ValidationError

from .utils import *


def test_synthetic():
    print("Testing the synthetic data")
    a = data_create(20, 32, seed=3)
    b = data_create(20, 32, seed=3)
    for s, t in zip(a, b):
        assert np.array_equal(s.image, t.image)
        assert np.array_equal(s.labels, t.labels)
        assert np.array_equal(s.supports, t.supports)
    c = data_create(20, 32, seed=4)
    assert any(not np.array_equal(s.image, t.image) for s, t in zip(a, c))
    for s in a:
        assert s.image.shape == (1, 32, 32)
        assert s.labels.shape == (6,)
        assert s.supports.shape == (6, 32, 32)
        assert np.all((s.image >= 0) & (s.image <= 1))
        assert np.array_equal(s.labels, s.supports.reshape(6, -1).any(1).astype(int))
    with pytest.raises(ValidationError):
        DatasetSpec(attribute_names=("circle",)).validate()
    with pytest.raises(ValidationError):
        DatasetSpec(attribute_names=("circle", "circle")).validate()
    with pytest.raises(ValidationError):
        DatasetSpec(attribute_names=("circle", "triangle")).validate()
    with pytest.raises(ValidationError):
        DatasetSpec(image_size=9).validate()


def test_marginals():
    print("Testing the label marginals")
    samples = data_create(2000, 32, seed=0)
    _, labels = images_and_labels(samples)
    frequency = labels.mean(0)
    assert np.all((frequency >= 0.4) & (frequency <= 0.6))


def test_subset_attributes():
    print("Testing a subset of the attributes")
    spec = DatasetSpec(50, 16, ("square", "bright_top"), seed=1)
    samples = generate_synthetic(spec)
    assert samples[0].labels.shape == (2,)
    assert samples[0].supports.shape == (2, 16, 16)
    for s in samples:
        top = s.image[0, :8].mean() - s.image[0, 8:].mean()
        if s.labels[1] and not s.labels[0]:
            assert top > 0.25


def test_counterfactuals():
    print("Testing counterfactual images")
    spec = DatasetSpec(100, 32, seed=5)
    original = generate_synthetic(spec)
    for i, name in enumerate(SYNTHETIC_ATTRIBUTES[:5]):
        removed = generate_synthetic(spec, force_absent=(name,))
        for s, t in zip(original, removed):
            assert t.labels[i] == 0
            changed = s.image[0] != t.image[0]
            assert not np.any(changed & ~s.supports[i])
            if not s.labels[i]:
                assert np.array_equal(s.image, t.image)


def test_noise():
    print("Testing the noise")
    image = data_create(1, 16)[0].image
    assert np.array_equal(add_gaussian_noise(image, 0.0, 1), image)
    noisy = add_gaussian_noise(image, 0.5, 1)
    assert np.all((noisy >= 0) & (noisy <= 1))
    assert not np.array_equal(noisy, image)
    assert np.array_equal(noisy, add_gaussian_noise(image, 0.5, 1))
    assert np.std(gaussian_noise((100000,), 0.3, 0)) == pytest.approx(0.3, abs=0.01)
    with pytest.raises(ValidationError):
        add_gaussian_noise(image, -0.1, 1)
    with pytest.raises(ValidationError):
        gaussian_noise((2,), -1.0, 1)
    samples = data_create(3, 16)
    corrupted = corrupt_samples(samples, 0.1, 7)
    assert all(np.array_equal(s.labels, c.labels) for s, c in zip(samples, corrupted))
    again = corrupt_samples(samples, 0.1, 7)
    assert all(np.array_equal(a.image, c.image) for a, c in zip(again, corrupted))
    assert np.array_equal(corrupted[0].image, add_gaussian_noise(samples[0].image, 0.1, 7))
    assert not np.array_equal(corrupted[1].image, add_gaussian_noise(samples[1].image, 0.1, 7))


def test_split():
    print("Testing the train/test split")
    samples = data_create(10, 16)
    train, test = split(samples, 0.8, 0)
    assert (len(train), len(test)) == (8, 2)
    ids = [id(s) for s in train + test]
    assert sorted(ids) == sorted(id(s) for s in samples)
    again, _ = split(samples, 0.8, 0)
    assert [id(s) for s in again] == [id(s) for s in train]
    with pytest.raises(ValidationError):
        split(samples, 1.0, 0)
    x, y = images_and_labels(samples)
    assert x.shape == (10, 1, 16, 16)
    assert y.shape == (10, 6)
    with pytest.raises(ValidationError):
        images_and_labels([])


def test_attribute_file(tmp_path):
    print("Testing attribute files")
    path = str(tmp_path / "attr.txt")
    with open(path, "w") as f:
        f.write("2\na b c\nimg1.pgm 1 -1 1\n\nimg2.pgm -1 -1 -1\n")
    names, rows = read_attribute_file(path)
    assert names == ["a", "b", "c"]
    assert rows[0][0] == "img1.pgm"
    assert rows[0][1].tolist() == [1, 0, 1]
    assert rows[1][1].tolist() == [0, 0, 0]
    assert rows[1][2] == 5
    out = str(tmp_path / "copy.txt")
    write_attribute_file(out, names, [r[0] for r in rows], np.stack([r[1] for r in rows]))
    with open(out) as f:
        assert f.read() == "2\na b c\nimg1.pgm 1 -1 1\nimg2.pgm -1 -1 -1\n"
    for contents in ("3\na b\nx.pgm 1 1\n", "1\na b\nx.pgm 1\n", "1\na b\nx.pgm 1 0\n", "two\na\nx 1\n"):
        with open(path, "w") as f:
            f.write(contents)
        with pytest.raises(FormatError):
            read_attribute_file(path)
    with open(path, "w") as f:
        f.write("\n")
    with pytest.raises(ValidationError):
        read_attribute_file(path)


def test_celeba_format(tmp_path):
    print("Testing the CelebA layout")
    write_pnm(str(tmp_path / "img1.pgm"), np.full((1, 8, 8), 0.2))
    rgb = np.zeros((3, 4, 4))
    rgb[0] = 1.0
    write_pnm(str(tmp_path / "img2.ppm"), rgb)
    attr = str(tmp_path / "attr.txt")
    write_attribute_file(attr, ["a", "b"], ["img1.pgm", "img2.ppm"], np.array([[1, 0], [0, 1]]))
    samples = load_celeba_format(attr, str(tmp_path), 8)
    assert samples[0].image.shape == (1, 8, 8)
    assert samples[1].image.shape == (1, 8, 8)
    assert np.allclose(samples[0].image, 51 / 255)
    assert np.allclose(samples[1].image, 0.299)
    assert samples[1].labels.tolist() == [0, 1]
    assert samples[0].supports is None
    write_attribute_file(attr, ["a", "b"], ["img1.pgm", "img3.pgm"], np.array([[1, 0], [0, 1]]))
    with pytest.raises(MissingImageError):
        load_celeba_format(attr, str(tmp_path), 8)


def test_pnm(tmp_path):
    print("Testing PGM/PPM files")
    path = str(tmp_path / "a.pgm")
    image = np.arange(12).reshape(1, 3, 4) / 255.0
    write_pnm(path, image)
    assert np.allclose(read_pnm(path), image, atol=1e-12)
    write_pnm(path, image[0] * 10)
    assert read_pnm(path).max() == pytest.approx(110 / 255)
    with open(path, "wb") as f:
        f.write(b"P5\n# comment\n2 1\n255\n\x00\xff")
    assert read_pnm(path).tolist() == [[[0.0, 1.0]]]
    with open(path, "wb") as f:
        f.write(b"P5\n2 2\n65535\n" + np.array([0, 65535, 0, 65535], ">u2").tobytes())
    assert read_pnm(path)[0, :, 1].tolist() == [1.0, 1.0]
    for data in (b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n2", b"P5\n0 1\n255\n"):
        with open(path, "wb") as f:
            f.write(data)
        with pytest.raises(FormatError):
            read_pnm(path)
    with pytest.raises(ValidationError):
        write_pnm(path, np.zeros((2, 4, 4)))


def test_images():
    print("Testing image conversions")
    gray = np.random.default_rng(0).uniform(0, 1, (1, 6, 6))
    rgb = convert_channels(gray, 3)
    assert rgb.shape == (3, 6, 6)
    assert np.allclose(convert_channels(rgb, 1), gray)
    assert convert_channels(gray, 1) is gray
    with pytest.raises(ValidationError):
        convert_channels(np.zeros((2, 4, 4)), 1)
    assert np.array_equal(resize_bilinear(gray, 6), gray)
    assert np.allclose(resize_bilinear(np.full((1, 5, 7), 0.3), 16), 0.3)
    small = resize_bilinear(gray, 3)
    assert small.shape == (1, 3, 3)
    assert np.all((small >= gray.min()) & (small <= gray.max()))
    up = resize_bilinear(np.array([[[0.0, 1.0]]]).repeat(2, 1), 4)
    assert np.all(np.diff(up[0, 0]) >= 0)


def test_rle():
    print("Testing run-length encoding")
    assert rle_encode(np.array([0, 1, 1, 0], bool)) == [1, 2, 1]
    assert rle_encode(np.array([1, 1, 0], bool)) == [0, 2, 1]
    assert rle_encode(np.zeros(4, bool)) == [4]
    bitmap = data_create(1, 16)[0].supports[0]
    assert np.array_equal(rle_decode(rle_encode(bitmap), bitmap.shape), bitmap)
    with pytest.raises(FormatError):
        rle_decode([1, 2], (2, 2))


def test_export_load(tmp_path):
    print("Testing dataset directories")
    samples = data_create(5, 16, seed=2)
    out = str(tmp_path / "data")
    export_synthetic(samples, SYNTHETIC_ATTRIBUTES, out, seed=2)
    assert os.path.isfile(os.path.join(out, "000004.pgm"))
    assert os.path.isfile(os.path.join(out, ATTRIBUTE_FILE))
    loaded, names = load_dataset(out)
    assert names == list(SYNTHETIC_ATTRIBUTES)
    assert len(loaded) == 5
    for s, t in zip(samples, loaded):
        assert np.max(np.abs(s.image - t.image)) <= 0.5 / 255 + 1e-12
        assert np.array_equal(s.labels, t.labels)
        assert np.array_equal(s.supports, t.supports)
    resized, _ = load_dataset(out, resize_to=8)
    assert resized[0].image.shape == (1, 8, 8)
    assert resized[0].supports is None
    os.remove(os.path.join(out, "supports.json"))
    with pytest.raises(ValidationError):
        load_dataset(out)
    plain, _ = load_dataset(out, resize_to=16)
    assert plain[0].supports is None
