# This script contains functions for creating, loading, storing and corrupting data

import json
import logging
import os
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union
import numpy as np
from scipy.ndimage import map_coordinates
from mcan.utils import FormatError, MissingImageError, ValidationError

logger = logging.getLogger(__name__)

SYNTHETIC_ATTRIBUTES = ("circle", "square", "cross", "bright_top", "dark_left", "large_object")
ATTRIBUTE_FILE = "list_attr.txt"
SUPPORTS_FILE = "supports.json"
LUMA = np.array([0.299, 0.587, 0.114])


class Sample(NamedTuple):
    """
        One image [Cimg, H, W] in [0, 1], its K binary labels, and (for synthetic data)
        K boolean support bitmaps [K, H, W] marking the pixels that realise each attribute
    """

    image: np.ndarray
    labels: np.ndarray
    supports: Optional[np.ndarray] = None


class DatasetSpec(NamedTuple):
    """
        Parameters of the synthetic dataset
    """

    num_samples: int = 2500
    image_size: int = 32
    attribute_names: Tuple[str, ...] = SYNTHETIC_ATTRIBUTES
    seed: int = 0

    def validate(self) -> "DatasetSpec":
        if self.num_samples < 1:
            raise ValidationError(f"num_samples must be positive, got {self.num_samples}")
        if self.image_size < 8 or self.image_size % 2:
            raise ValidationError(f"image_size must be even and at least 8, got {self.image_size}")
        if len(self.attribute_names) < 2:
            raise ValidationError("At least two attributes are needed")
        if len(set(self.attribute_names)) != len(self.attribute_names):
            raise ValidationError(f"Duplicate attribute names in {self.attribute_names}")
        unknown = [a for a in self.attribute_names if a not in SYNTHETIC_ATTRIBUTES]
        if unknown:
            raise ValidationError(
                f"Unknown synthetic attributes {unknown}, expected some of {SYNTHETIC_ATTRIBUTES}"
            )
        return self


def _shape_bitmap(kind: str, size: int, ci: float, cj: float, r: float) -> np.ndarray:
    i, j = np.ogrid[:size, :size]
    di = np.abs(i - ci)
    dj = np.abs(j - cj)
    if kind == "circle":
        return di * di + dj * dj <= r * r
    if kind == "square":
        return (di <= r) & (dj <= r)
    # cross with arms three pixels wide (at 32x32)
    w = size / 32.0
    return ((di <= r) & (dj <= w)) | ((dj <= r) & (di <= w))


def generate_synthetic(spec: DatasetSpec, force_absent: Sequence[str] = ()) -> List[Sample]:
    """Generate images of simple shapes with known attribute supports.
        Every image has a uniform background in [0.3, 0.5]. The attributes are:
            circle:       bright filled disc in the top left
            square:       dark filled square in the top right
            cross:        bright plus sign in the bottom
            bright_top:   +0.3 on the top half
            dark_left:    -0.2 on the left half
            large_object: the shapes are drawn large (label is 0 without shapes)
        Each attribute is present with probability 0.5. All random numbers for a
        sample are drawn before the attributes are rendered, so forcing an attribute
        off (`force_absent`) changes only the pixels in its support.

    Args:
        spec (DatasetSpec): the dataset parameters
        force_absent (Sequence[str], optional): attributes to render as absent (counterfactuals). Defaults to ().

    Returns:
        List[Sample]: the samples (labels and supports in the order of `spec.attribute_names`)
    """
    spec.validate()
    size = spec.image_size
    scale = size / 32.0
    rng = np.random.default_rng(spec.seed)
    names = spec.attribute_names
    centres = {"circle": (9.0, 8.0), "square": (9.0, 24.0), "cross": (24.0, 16.0)}
    shapes = tuple(centres.keys())
    samples = []
    for _ in range(spec.num_samples):
        present = rng.random(len(SYNTHETIC_ATTRIBUTES)) < 0.5
        background = rng.uniform(0.3, 0.5)
        offsets = rng.integers(-1, 2, size=(3, 2))
        small = rng.integers(2, 4, size=3)
        large = rng.integers(5, 7, size=3)
        intensity = (rng.uniform(0.85, 0.95), rng.uniform(0.05, 0.15), rng.uniform(0.75, 0.85))
        on = {
            a: bool(p) and a in names and a not in force_absent
            for a, p in zip(SYNTHETIC_ATTRIBUTES, present)
        }
        big = on["large_object"] and any(on[s] for s in shapes)
        image = np.full((size, size), background)
        support = {a: np.zeros((size, size), bool) for a in SYNTHETIC_ATTRIBUTES}
        for s, shape in enumerate(shapes):
            if not on[shape]:
                continue
            ci = (centres[shape][0] + offsets[s, 0]) * scale
            cj = (centres[shape][1] + offsets[s, 1]) * scale
            small_bitmap = _shape_bitmap(shape, size, ci, cj, small[s] * scale)
            bitmap = small_bitmap
            if big:
                bitmap = _shape_bitmap(shape, size, ci, cj, large[s] * scale)
                support["large_object"] |= bitmap & ~small_bitmap
            image[bitmap] = intensity[s]
            support[shape] = bitmap
        half = size // 2
        if on["bright_top"]:
            image[:half, :] += 0.3
            support["bright_top"][:half, :] = True
        if on["dark_left"]:
            image[:, :half] -= 0.2
            support["dark_left"][:, :half] = True
        supports = np.stack([support[a] for a in names])
        labels = np.array([int(support[a].any()) for a in names])
        samples.append(Sample(np.clip(image, 0.0, 1.0)[None], labels, supports))
    return samples


def gaussian_noise(shape: Tuple[int, ...], sigma: float, seed: Union[int, np.random.Generator]) -> np.ndarray:
    """
        i.i.d. N(0, sigma^2) noise (before any clamping)
    """
    if not sigma >= 0:
        raise ValidationError(f"The noise level must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, sigma, size=shape)


def add_gaussian_noise(
    image: np.ndarray, sigma: float, seed: Union[int, np.random.Generator]
) -> np.ndarray:
    """Corrupt an image with Gaussian noise, clamped back to [0, 1]

    Args:
        image (np.ndarray): the image (not modified)
        sigma (float): standard deviation of the noise
        seed (Union[int, np.random.Generator]): seed or generator

    Raises:
        ValidationError: if sigma is negative

    Returns:
        np.ndarray: the noisy image
    """
    if not sigma >= 0:
        raise ValidationError(f"The noise level must be non-negative, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    return np.clip(image + gaussian_noise(image.shape, sigma, seed), 0.0, 1.0)


def corrupt_samples(samples: Sequence[Sample], sigma: float, seed: int) -> List[Sample]:
    """
        Add noise to every image, drawing from one generator in sample order (labels and supports are kept)
    """
    rng = np.random.default_rng(seed)
    return [s._replace(image=add_gaussian_noise(s.image, sigma, rng)) for s in samples]


def split(
    samples: Sequence[Sample], train_fraction: float, seed: int
) -> Tuple[List[Sample], List[Sample]]:
    """
        Seeded shuffle followed by a split into round(n * train_fraction) training samples and the rest
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(len(samples) * train_fraction))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def images_and_labels(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """
        Stack the samples into images [N, Cimg, H, W] and labels [N, K]
    """
    if len(samples) == 0:
        raise ValidationError("No samples")
    images = np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])
    labels = np.stack([np.asarray(s.labels, dtype=np.float64) for s in samples])
    return images, labels


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    """
        [3, H, W] -> [1, H, W] using the ITU-R 601 luma weights
    """
    return np.tensordot(LUMA, image, axes=(0, 0))[None]


def convert_channels(image: np.ndarray, channels: int) -> np.ndarray:
    if image.shape[0] == channels:
        return image
    if image.shape[0] == 3 and channels == 1:
        return rgb_to_gray(image)
    if image.shape[0] == 1 and channels == 3:
        return np.repeat(image, 3, 0)
    raise ValidationError(f"Cannot convert an image with {image.shape[0]} channels to {channels}")


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a [C, H, W] image to [C, size, size].
        Pixel centres are aligned (output pixel i samples the input at
        (i + 0.5) * H / size - 0.5) and the borders are extended.

    Args:
        image (np.ndarray): the image
        size (int): the output height and width

    Returns:
        np.ndarray: the resized image
    """
    image = np.asarray(image, dtype=np.float64)
    C, H, W = image.shape
    if H == size and W == size:
        return image.copy()
    rows = np.clip((np.arange(size) + 0.5) * (H / size) - 0.5, 0, H - 1)
    cols = np.clip((np.arange(size) + 0.5) * (W / size) - 0.5, 0, W - 1)
    grid = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([map_coordinates(image[c], grid, order=1, mode="nearest") for c in range(C)])


def _pnm_tokens(data: bytes, count: int, path: str) -> Tuple[List[bytes], int]:
    # Header tokens (with comments) and the offset of the raster
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"Truncated PNM header in '{path}'")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pnm(path: str) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) image

    Args:
        path (str): the file

    Raises:
        FormatError: if the file is not a valid binary PGM/PPM

    Returns:
        np.ndarray: [C, H, W] image scaled to [0, 1] (C is 1 for PGM and 3 for PPM)
    """
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _pnm_tokens(data, 4, path)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"'{path}' is not a binary PGM/PPM file (magic {magic!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"Invalid PNM header in '{path}'")
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"Invalid PNM dimensions or maxval in '{path}'")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    expected = width * height * channels * dtype.itemsize
    raster = data[offset : offset + expected]
    if len(raster) != expected:
        raise FormatError(f"'{path}' has {len(raster)} bytes of pixel data, expected {expected}")
    img = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)
    return img.transpose(2, 0, 1).astype(np.float64) / maxval


def write_pnm(path: str, image: np.ndarray):
    """
        Write a [C, H, W] (C = 1 or 3) or [H, W] image with values in [0, 1] as an 8-bit PGM/PPM
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValidationError(f"Cannot write an image of shape {image.shape} as PGM/PPM")
    C, H, W = image.shape
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"{'P5' if C == 1 else 'P6'}\n{W} {H}\n255\n".encode("ascii"))
        f.write(pixels.transpose(1, 2, 0).tobytes())


def read_attribute_file(path: str) -> Tuple[List[str], List[Tuple[str, np.ndarray, int]]]:
    """Parse an attribute list (CelebA layout):
        the sample count, the attribute names, then one row per image with
        the file name followed by +1/-1 per attribute.

    Args:
        path (str): the attribute file

    Raises:
        ValidationError: if the file is empty
        FormatError: if a line is malformed or the row count does not match the header

    Returns:
        Tuple[List[str], List[Tuple[str, np.ndarray, int]]]: attribute names and (filename, 0/1 labels, line number) rows
    """
    with open(path, "r") as f:
        lines = [(i + 1, line.split()) for i, line in enumerate(f)]
    lines = [(i, tokens) for i, tokens in lines if tokens]
    if not lines:
        raise ValidationError(f"The attribute file '{path}' is empty")
    lineno, tokens = lines[0]
    if len(tokens) != 1:
        raise FormatError(f"{path}:{lineno}: expected the sample count")
    try:
        count = int(tokens[0])
    except ValueError:
        raise FormatError(f"{path}:{lineno}: expected the sample count, got '{tokens[0]}'")
    if len(lines) < 2:
        raise FormatError(f"{path}: missing the attribute names")
    names = lines[1][1]
    rows = []
    for lineno, tokens in lines[2:]:
        if len(tokens) != len(names) + 1:
            raise FormatError(
                f"{path}:{lineno}: expected a file name and {len(names)} labels, got {len(tokens) - 1} labels"
            )
        if any(t not in ("1", "-1") for t in tokens[1:]):
            raise FormatError(f"{path}:{lineno}: labels must be 1 or -1")
        labels = np.array([1 if t == "1" else 0 for t in tokens[1:]])
        rows.append((tokens[0], labels, lineno))
    if len(rows) != count:
        raise FormatError(f"{path}: the header declares {count} samples but {len(rows)} rows are present")
    return names, rows


def write_attribute_file(
    path: str, names: Sequence[str], filenames: Sequence[str], labels: np.ndarray
):
    """
        Write an attribute list in the CelebA layout (labels 0/1 are written as -1/1)
    """
    with open(path, "w") as f:
        f.write(f"{len(filenames)}\n")
        f.write(" ".join(names) + "\n")
        for name, row in zip(filenames, labels):
            f.write(name + " " + " ".join("1" if v else "-1" for v in row) + "\n")


def load_celeba_format(
    attr_file: str,
    image_dir: str,
    resize_to: int,
    channels: int = 1,
    decode: Optional[Callable[[str], np.ndarray]] = None,
) -> List[Sample]:
    """Load a dataset in the CelebA attribute-list layout

    Args:
        attr_file (str): the attribute file
        image_dir (str): directory with the images
        resize_to (int): output height and width (bilinear resize)
        channels (int, optional): output channels (RGB images are converted to gray and vice versa). Defaults to 1.
        decode (Optional[Callable[[str], np.ndarray]], optional): image decoder returning [C, H, W] in [0, 1]. Defaults to `read_pnm`.

    Raises:
        MissingImageError: if an image file does not exist
        FormatError: if the attribute file is malformed

    Returns:
        List[Sample]: samples without supports
    """
    if decode is None:
        decode = read_pnm
    _, rows = read_attribute_file(attr_file)
    samples = []
    for filename, labels, lineno in rows:
        path = os.path.join(image_dir, filename)
        if not os.path.isfile(path):
            raise MissingImageError(f"{attr_file}:{lineno}: image '{path}' does not exist")
        image = np.asarray(decode(path), dtype=np.float64)
        image = resize_bilinear(convert_channels(image, channels), resize_to)
        samples.append(Sample(np.clip(image, 0.0, 1.0), labels, None))
    logger.debug("Loaded %d samples from %s", len(samples), attr_file)
    return samples


def rle_encode(bitmap: np.ndarray) -> List[int]:
    """
        Run lengths of a flattened boolean bitmap, alternating False and True runs (starting with False)
    """
    flat = np.asarray(bitmap, bool).reshape(-1)
    changes = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape: Tuple[int, ...]) -> np.ndarray:
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs)
    if flat.size != int(np.prod(shape)):
        raise FormatError(f"Run lengths cover {flat.size} pixels, expected {int(np.prod(shape))}")
    return flat.reshape(shape)


def export_synthetic(
    samples: Sequence[Sample], names: Sequence[str], out_dir: str, seed: Optional[int] = None
):
    """Write a dataset as images, an attribute list and a JSON sidecar with the supports

    Args:
        samples (Sequence[Sample]): the samples
        names (Sequence[str]): the attribute names
        out_dir (str): output directory (created if needed)
        seed (Optional[int], optional): generator seed recorded in the sidecar. Defaults to None.
    """
    os.makedirs(out_dir, exist_ok=True)
    filenames = []
    supports: Dict[str, List[List[int]]] = {}
    for i, s in enumerate(samples):
        name = f"{i:06d}.{'pgm' if s.image.shape[0] == 1 else 'ppm'}"
        write_pnm(os.path.join(out_dir, name), s.image)
        filenames.append(name)
        if s.supports is not None:
            supports[name] = [rle_encode(b) for b in s.supports]
    labels = np.stack([s.labels for s in samples])
    write_attribute_file(os.path.join(out_dir, ATTRIBUTE_FILE), names, filenames, labels)
    sidecar = {
        "seed": seed,
        "image_size": int(samples[0].image.shape[-1]),
        "channels": int(samples[0].image.shape[0]),
        "attributes": list(names),
        "supports": supports,
    }
    with open(os.path.join(out_dir, SUPPORTS_FILE), "w") as f:
        json.dump(sidecar, f, sort_keys=True)
    logger.info("Wrote %d samples to %s", len(samples), out_dir)


def load_dataset(
    data_dir: str, resize_to: Optional[int] = None, channels: Optional[int] = None
) -> Tuple[List[Sample], List[str]]:
    """Load a dataset directory (an attribute list, the images and, if present, the supports sidecar)

    Args:
        data_dir (str): the directory
        resize_to (Optional[int], optional): image size, defaults to the sidecar size (required without a sidecar). Defaults to None.
        channels (Optional[int], optional): image channels, defaults to the sidecar value or 1. Defaults to None.

    Returns:
        Tuple[List[Sample], List[str]]: the samples and the attribute names
    """
    attr_file = os.path.join(data_dir, ATTRIBUTE_FILE)
    sidecar_path = os.path.join(data_dir, SUPPORTS_FILE)
    sidecar = None
    if os.path.isfile(sidecar_path):
        with open(sidecar_path, "r") as f:
            sidecar = json.load(f)
    if resize_to is None:
        if sidecar is None:
            raise ValidationError(f"No image size given and no '{SUPPORTS_FILE}' in '{data_dir}'")
        resize_to = int(sidecar["image_size"])
    if channels is None:
        channels = int(sidecar.get("channels", 1)) if sidecar else 1
    names, rows = read_attribute_file(attr_file)
    samples = load_celeba_format(attr_file, data_dir, resize_to, channels)
    if sidecar and sidecar.get("supports"):
        size = int(sidecar["image_size"])
        if size == resize_to:
            samples = [
                s._replace(
                    supports=np.stack(
                        [rle_decode(r, (size, size)) for r in sidecar["supports"][row[0]]]
                    )
                )
                if row[0] in sidecar["supports"]
                else s
                for s, row in zip(samples, rows)
            ]
    return samples, list(names)
