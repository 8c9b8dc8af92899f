# This script contains the optimisers and the training loop

import logging
import time
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple
import numpy as np
from mcan.autodiff import Tape, backward, recording, zero_grad
from mcan.checkpoint import save_checkpoint
from mcan.data import Sample, images_and_labels
from mcan.network import ABLATIONS, MultiAttrNet, NetConfig, init_params
from mcan.objective import L1_REDUCTIONS, LossBreakdown, LossWeights, total_loss
from mcan.robustness import evaluate
from mcan.transform import IDENTITY
from mcan.utils import (
    NonFiniteLossError,
    ShapeError,
    ValidationError,
    batch_ranges,
    format_float,
)

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


class TrainConfig(NamedTuple):
    """
        Parameters of the training loop
    """

    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_weights: LossWeights = LossWeights()
    ablation: str = "full"
    seed: int = 0
    checkpoint_path: Optional[str] = None
    l1_reduction: str = "sum"
    clip_norm: Optional[float] = None
    train_fraction: float = 0.8

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValidationError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"Unknown optimizer '{self.optimizer}', expected one of {OPTIMIZERS}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValidationError("Invalid Adam parameters")
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"Unknown ablation '{self.ablation}', expected one of {ABLATIONS}")
        if self.l1_reduction not in L1_REDUCTIONS:
            raise ValidationError(f"Unknown L1 reduction '{self.l1_reduction}'")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValidationError(f"clip_norm must be positive, got {self.clip_norm}")
        if not 0 < self.train_fraction < 1:
            raise ValidationError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        self.loss_weights.validate()
        return self

    def to_dict(self) -> Dict:
        d = self._asdict()
        d["loss_weights"] = self.loss_weights._asdict()
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)


class AdamState(NamedTuple):
    m: np.ndarray
    v: np.ndarray


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """
        Gradient descent step: param - lr * grad
    """
    if np.shape(param) != np.shape(grad):
        raise ShapeError(f"Gradient shape {np.shape(grad)} does not match parameter shape {np.shape(param)}")
    return param - lr * grad


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> Tuple[np.ndarray, AdamState]:
    """Adam step with bias correction

    Args:
        param (np.ndarray): the parameter
        grad (np.ndarray): the gradient
        state (AdamState): first and second moment estimates
        lr (float): learning rate
        beta1 (float, optional): decay of the first moment. Defaults to 0.9.
        beta2 (float, optional): decay of the second moment. Defaults to 0.999.
        eps (float, optional): denominator offset. Defaults to 1e-8.
        t (int, optional): step number (starting from 1). Defaults to 1.

    Returns:
        Tuple[np.ndarray, AdamState]: the updated parameter and state
    """
    if t < 1:
        raise ValidationError(f"The Adam step number must be at least 1, got {t}")
    if np.shape(param) != np.shape(grad):
        raise ShapeError(f"Gradient shape {np.shape(grad)} does not match parameter shape {np.shape(param)}")
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v)


def clip_gradients(grads: Sequence[np.ndarray], clip_norm: Optional[float]) -> List[np.ndarray]:
    """
        Rescale the gradients so that their global L2 norm is at most clip_norm
    """
    if clip_norm is None:
        return list(grads)
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= clip_norm:
        return list(grads)
    logger.debug("Clipping the gradient norm %g to %g", norm, clip_norm)
    return [g * (clip_norm / norm) for g in grads]


class EpochRecord(NamedTuple):
    epoch: int
    l_b: float
    l_m: float
    l_r: float
    l_mask_l1: float
    total: float
    accuracy: float
    seconds: float


class TrainTrace:
    """
        Per-epoch mean loss breakdowns, held-out accuracies and durations
    """

    COLUMNS = ("epoch",) + LossBreakdown.COMPONENTS + ("accuracy",)

    def __init__(self, records: Optional[List[EpochRecord]] = None):
        self.records: List[EpochRecord] = records or []

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def rows(self) -> List[List[str]]:
        return [
            [str(r.epoch)] + [format_float(getattr(r, c)) for c in TrainTrace.COLUMNS[1:]]
            for r in self.records
        ]

    def to_csv(self, path: str):
        """
            Write the losses and accuracies (no wall-clock, so the file is reproducible)
        """
        with open(path, "w") as f:
            f.write(",".join(TrainTrace.COLUMNS) + "\n")
            for row in self.rows():
                f.write(",".join(row) + "\n")

    def timing_csv(self, path: str):
        with open(path, "w") as f:
            f.write("epoch,seconds\n")
            for r in self.records:
                f.write(f"{r.epoch},{format_float(r.seconds)}\n")


def _check_finite(breakdown: LossBreakdown, epoch: int, batch: int):
    for component in LossBreakdown.COMPONENTS:
        value = getattr(breakdown, component)
        if not np.isfinite(value):
            raise NonFiniteLossError(component, value, epoch, batch)


def train(
    net: MultiAttrNet,
    data: Sequence[Sample],
    config: TrainConfig = TrainConfig(),
    eval_data: Optional[Sequence[Sample]] = None,
) -> Tuple[MultiAttrNet, TrainTrace]:
    """Minimise the weighted objective with minibatches.
        Every epoch uses a seeded permutation of the data. Each batch is
        forwarded with the training-time masking (1 + M), differentiated,
        optionally clipped and stepped. The parameters are updated in place.

    Args:
        net (MultiAttrNet): the network (its components must match `config.ablation`)
        data (Sequence[Sample]): training samples
        config (TrainConfig, optional): the training parameters. Defaults to TrainConfig().
        eval_data (Optional[Sequence[Sample]], optional): held-out samples for the per-epoch accuracy. Defaults to None.

    Raises:
        ValidationError: if the data is empty or the network does not match the ablation
        NonFiniteLossError: if a loss component becomes NaN or infinite

    Returns:
        Tuple[MultiAttrNet, TrainTrace]: the trained network and the trace
    """
    config.validate()
    if len(data) == 0:
        raise ValidationError("Cannot train on an empty dataset")
    if net.config.ablation != config.ablation:
        raise ValidationError(
            f"The network components ({net.config.ablation}) do not match the ablation '{config.ablation}'"
        )
    images, labels = images_and_labels(data)
    if labels.shape[1] != net.config.num_attributes:
        raise ShapeError(
            f"The data has {labels.shape[1]} attributes, the network {net.config.num_attributes}"
        )
    if eval_data:
        eval_images, eval_labels = images_and_labels(eval_data)
    rng = np.random.default_rng(config.seed)
    params = net.parameters()
    states = [AdamState(np.zeros_like(p.values), np.zeros_like(p.values)) for p in params]
    step = 0
    trace = TrainTrace()
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(images.shape[0])
        sums = np.zeros(len(LossBreakdown.COMPONENTS))
        for b, (lo, hi) in enumerate(batch_ranges(len(order), config.batch_size)):
            idx = order[lo:hi]
            zero_grad(params)
            tape = Tape()
            with recording(tape):
                breakdown = total_loss(
                    net, (images[idx], labels[idx]), config.loss_weights, config.l1_reduction
                )
            _check_finite(breakdown, epoch, b)
            backward(breakdown.root, tape)
            grads = clip_gradients([p.grad for p in params], config.clip_norm)
            step += 1
            for i, (p, g) in enumerate(zip(params, grads)):
                if config.optimizer == "sgd":
                    p.values = sgd_step(p.values, g, config.learning_rate)
                else:
                    p.values, states[i] = adam_step(
                        p.values,
                        g,
                        states[i],
                        config.learning_rate,
                        config.adam_beta1,
                        config.adam_beta2,
                        config.adam_eps,
                        step,
                    )
            sums += len(idx) * np.array([getattr(breakdown, c) for c in LossBreakdown.COMPONENTS])
        means = sums / images.shape[0]
        accuracy = np.nan
        if eval_data:
            accuracy = float(np.mean(evaluate(net, (eval_images, eval_labels), IDENTITY)))
        seconds = time.perf_counter() - start
        trace.records.append(EpochRecord(epoch, *means, accuracy, seconds))
        logger.info(
            "epoch %d/%d  l_b %.4f  l_m %.4f  l_r %.4f  l1 %.2f  total %.4f  accuracy %.4f  (%.1fs)",
            epoch,
            config.epochs,
            *means,
            accuracy,
            seconds,
        )
    if config.checkpoint_path:
        save_checkpoint(net, config, config.checkpoint_path)
    return net, trace


class AblationResult(NamedTuple):
    ablation: str
    accuracy: float
    trace: TrainTrace
    net: MultiAttrNet


def ablation_study(
    train_data: Sequence[Sample],
    eval_data: Sequence[Sample],
    net_config: NetConfig,
    config: TrainConfig = TrainConfig(),
    ablations: Sequence[str] = ABLATIONS,
) -> List[AblationResult]:
    """Train one network per ablation (with and without the reconstructor and the multi-label head)

    Args:
        train_data (Sequence[Sample]): training samples
        eval_data (Sequence[Sample]): held-out samples
        net_config (NetConfig): the architecture (the enabled components are set per ablation)
        config (TrainConfig, optional): the training parameters. Defaults to TrainConfig().
        ablations (Sequence[str], optional): the ablations. Defaults to ABLATIONS.

    Returns:
        List[AblationResult]: held-out mean accuracy, trace and network per ablation
    """
    results = []
    eval_images, eval_labels = images_and_labels(eval_data)
    for ablation in ablations:
        logger.info("Training the '%s' ablation", ablation)
        net = init_params(net_config.with_ablation(ablation))
        net, trace = train(
            net, train_data, config._replace(ablation=ablation, checkpoint_path=None), eval_data
        )
        accuracy = float(np.mean(evaluate(net, (eval_images, eval_labels), IDENTITY)))
        results.append(AblationResult(ablation, accuracy, trace, net))
    return results
