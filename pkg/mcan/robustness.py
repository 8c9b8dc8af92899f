# This script contains the noise robustness evaluation of the mask transformation

import logging
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union
from warnings import warn
import numpy as np
from mcan.data import Sample, add_gaussian_noise, images_and_labels
from mcan.network import MultiAttrNet
from mcan.transform import DEFAULT_BETAS, DEFAULT_NS, IDENTITY, TransformParams
from mcan.utils import McanWarning, ShapeError, ValidationError, format_float

logger = logging.getLogger(__name__)

MEAN_ATTRIBUTE = "__mean__"
DEFAULT_SIGMAS = tuple(round(0.05 * i, 2) for i in range(11))

Data = Union[Sequence[Sample], Tuple[np.ndarray, np.ndarray]]


class SweepSpec(NamedTuple):
    """
        Noise levels and transformation grid of a robustness sweep
    """

    sigmas: Tuple[float, ...] = DEFAULT_SIGMAS
    ns: Tuple[float, ...] = DEFAULT_NS
    betas: Tuple[float, ...] = DEFAULT_BETAS
    eval_samples: int = 500
    noise_seed: int = 1234
    threshold: float = 0.5

    def validate(self) -> "SweepSpec":
        if len(self.sigmas) == 0 or len(self.ns) == 0 or len(self.betas) == 0:
            raise ValidationError("The sweep grids must not be empty")
        if any(s < 0 for s in self.sigmas) or any(
            b <= a for a, b in zip(self.sigmas[:-1], self.sigmas[1:])
        ):
            raise ValidationError(f"The noise levels must be non-negative and ascending, got {self.sigmas}")
        if 1.0 not in self.ns or 0.0 not in self.betas:
            raise ValidationError("The transformation grid must contain the baseline (n, beta) = (1, 0)")
        if self.eval_samples < 1:
            raise ValidationError(f"eval_samples must be positive, got {self.eval_samples}")
        if not 0 < self.threshold < 1:
            raise ValidationError(f"The threshold must be in (0, 1), got {self.threshold}")
        for t in self.grid():
            t.validate()
        return self

    def grid(self) -> List[TransformParams]:
        return [TransformParams(float(n), float(b)) for n in self.ns for b in self.betas]


def _arrays(data: Data) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray):
        return data
    return images_and_labels(data)


def accuracy(probabilities: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """
        Fraction of correct predictions (probability >= threshold) per attribute
    """
    if probabilities.shape != labels.shape:
        raise ShapeError(f"Predictions {probabilities.shape} do not match labels {labels.shape}")
    return np.mean((probabilities >= threshold) == (labels > 0.5), 0)


def evaluate(
    net: MultiAttrNet, samples: Data, transform: TransformParams = IDENTITY, threshold: float = 0.5,
) -> np.ndarray:
    """Per-attribute accuracy with a mask transformation

    Args:
        net (MultiAttrNet): the network
        samples (Data): samples, or a tuple of images and labels
        transform (TransformParams, optional): the mask transformation. Defaults to IDENTITY.
        threshold (float, optional): decision threshold. Defaults to 0.5.

    Raises:
        ValidationError: if there are no samples or the threshold is not in (0, 1)

    Returns:
        np.ndarray: accuracy per attribute
    """
    if not 0 < threshold < 1:
        raise ValidationError(f"The threshold must be in (0, 1), got {threshold}")
    images, labels = _arrays(samples)
    return accuracy(net.predict_proba(images, transform), labels, threshold)


class SweepRecord(NamedTuple):
    sigma: float
    n: float
    beta: float
    attribute: str
    accuracy: float


class SweepResult:
    """
        Accuracy per noise level, transformation and attribute (plus the attribute means)
    """

    def __init__(self, records: List[SweepRecord], attribute_names: Sequence[str]):
        self.records = records
        self.attribute_names = list(attribute_names)

    def __len__(self) -> int:
        return len(self.records)

    def mean_records(self) -> List[SweepRecord]:
        return [r for r in self.records if r.attribute == MEAN_ATTRIBUTE]

    def sigmas(self) -> List[float]:
        return sorted({r.sigma for r in self.records})

    def mean_accuracy(self, sigma: float, transform: TransformParams) -> float:
        for r in self.mean_records():
            if r.sigma == sigma and r.n == transform.n and r.beta == transform.beta:
                return r.accuracy
        raise ValidationError(f"No result for sigma {sigma} and {transform}")

    def to_csv(self, path: str):
        with open(path, "w") as f:
            f.write("sigma,n,beta,attribute,accuracy\n")
            for r in self.records:
                f.write(
                    f"{format_float(r.sigma)},{format_float(r.n)},{format_float(r.beta)},{r.attribute},{format_float(r.accuracy)}\n"
                )


def run_sweep(
    net: MultiAttrNet,
    clean_samples: Sequence[Sample],
    spec: SweepSpec = SweepSpec(),
    attribute_names: Optional[Sequence[str]] = None,
) -> SweepResult:
    """Evaluate every transformation in the grid at every noise level.
        At each noise level the images are corrupted once (seeded with
        noise_seed XOR the index of the noise level) and all transformations
        are evaluated on the same corrupted images.

    Args:
        net (MultiAttrNet): the network
        clean_samples (Sequence[Sample]): the samples (the first `spec.eval_samples` are used)
        spec (SweepSpec, optional): the sweep. Defaults to SweepSpec().
        attribute_names (Optional[Sequence[str]], optional): names for the records. Defaults to "attr{k}".

    Returns:
        SweepResult: the records
    """
    spec.validate()
    images, labels = images_and_labels(clean_samples[: spec.eval_samples])
    K = labels.shape[1]
    if attribute_names is None:
        attribute_names = [f"attr{k}" for k in range(K)]
    if len(attribute_names) != K:
        raise ValidationError(f"Got {len(attribute_names)} attribute names for {K} attributes")
    grid = spec.grid()
    records = []
    for i, sigma in enumerate(spec.sigmas):
        noisy = add_gaussian_noise(images, sigma, spec.noise_seed ^ i)
        probs = net.attribute_probabilities(noisy, grid)
        for t, params in enumerate(grid):
            acc = accuracy(probs[t], labels, spec.threshold)
            for name, a in zip(attribute_names, acc):
                records.append(SweepRecord(sigma, params.n, params.beta, name, float(a)))
            records.append(SweepRecord(sigma, params.n, params.beta, MEAN_ATTRIBUTE, float(np.mean(acc))))
        logger.info(
            "sigma %.2f: baseline %.4f, best %.4f",
            sigma,
            float(np.mean(accuracy(probs[grid.index(IDENTITY)], labels, spec.threshold))),
            max(r.accuracy for r in records[-len(grid) * (K + 1) :] if r.attribute == MEAN_ATTRIBUTE),
        )
    return SweepResult(records, attribute_names)


class DeltaRow(NamedTuple):
    sigma: float
    best_n: float
    best_beta: float
    best_acc: float
    baseline_acc: float
    delta: float


def baseline_delta(result: SweepResult) -> List[DeltaRow]:
    """Compare the best transformation against the baseline (1, 0) at every noise level.
        Ties are resolved toward the baseline, then smaller n, then smaller beta.

    Args:
        result (SweepResult): the sweep

    Raises:
        ValidationError: if the baseline is missing at some noise level

    Returns:
        List[DeltaRow]: one row per noise level
    """
    rows = []
    for sigma in result.sigmas():
        cells = [r for r in result.mean_records() if r.sigma == sigma]
        baseline = [r for r in cells if r.n == 1.0 and r.beta == 0.0]
        if not baseline:
            raise ValidationError(f"The baseline (1, 0) is missing at sigma {sigma}")
        best = min(cells, key=lambda r: (-r.accuracy, not (r.n == 1.0 and r.beta == 0.0), r.n, r.beta))
        base = baseline[0].accuracy
        rows.append(DeltaRow(sigma, best.n, best.beta, best.accuracy, base, best.accuracy - base))
    return rows


def delta_csv(rows: Sequence[DeltaRow], path: str):
    with open(path, "w") as f:
        f.write(",".join(DeltaRow._fields) + "\n")
        for r in rows:
            f.write(",".join(format_float(v) for v in r) + "\n")


def mean_accuracy_curve(
    result: SweepResult, transform: TransformParams = IDENTITY
) -> Tuple[np.ndarray, np.ndarray]:
    """
        Noise levels and the mean accuracy of one transformation at each level
    """
    sigmas = result.sigmas()
    return np.array(sigmas), np.array([result.mean_accuracy(s, transform) for s in sigmas])


def noise_violations(accuracies: Sequence[float], tolerance: float = 0.02) -> List[int]:
    """
        Indices i where the accuracy increases by more than the tolerance from noise level i to i + 1
    """
    return [i for i in range(len(accuracies) - 1) if accuracies[i + 1] > accuracies[i] + tolerance]


def check_noise_improvement(rows: Sequence[DeltaRow], sigma: float = 0.3) -> bool:
    """
        Check that some transformation beats the baseline at the noise level (warns otherwise)
    """
    matching = [r for r in rows if np.isclose(r.sigma, sigma)]
    if not matching:
        warn(f"The sweep does not contain the noise level {sigma}", McanWarning)
        return False
    row = matching[0]
    if row.delta > 0 and not (row.best_n == 1.0 and row.best_beta == 0.0):
        logger.info(
            "sigma %g: (n, beta) = (%g, %g) improves the mean accuracy by %.4f",
            sigma,
            row.best_n,
            row.best_beta,
            row.delta,
        )
        return True
    warn(f"No transformation improves on the baseline at sigma {sigma}", McanWarning)
    return False
