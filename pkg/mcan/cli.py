"""
    This script contains the command line interface.

    Every command resolves a run config (defaults, then the `--config` JSON
    file, then the explicit flags) and writes it as `run_config.json` into its
    output directory, so that `--config out/run_config.json` reproduces the run.
    Exit codes: 0 on success, 1 on runtime failures and 2 on usage errors.
"""

import argparse
import copy
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import numpy as np
from matplotlib.figure import Figure
from mcan.analysis import (
    attribute_correlation,
    export_masks,
    feature_correlation,
    importance_csv,
    importance_matrix,
    localization_score,
    top_k_channels,
)
from mcan.checkpoint import load_checkpoint
from mcan.data import DatasetSpec, Sample, export_synthetic, generate_synthetic, load_dataset, split
from mcan.network import ABLATIONS, MultiAttrNet, NetConfig, init_params
from mcan.objective import L1_REDUCTIONS, LossWeights
from mcan.optimisation import OPTIMIZERS, TrainConfig, ablation_study, train
from mcan.plot import plot_curves, plot_masks, plot_sweep, plot_trace, print_accuracy
from mcan.robustness import SweepSpec, baseline_delta, check_noise_improvement, delta_csv, evaluate, run_sweep
from mcan.transform import TransformParams, curve_samples
from mcan.utils import McanException, ValidationError, format_float

logger = logging.getLogger(__name__)

RUN_CONFIG = "run_config.json"
SPLITS = ("all", "train", "test")


def default_run_config() -> Dict[str, Dict[str, Any]]:
    """
        The fully default run config (sections net, train, dataset, sweep, eval, curve, analyze, paths)
    """
    dataset = DatasetSpec()._asdict()
    dataset["attribute_names"] = list(dataset["attribute_names"])
    sweep = SweepSpec()._asdict()
    for key in ("sigmas", "ns", "betas"):
        sweep[key] = [float(v) for v in sweep[key]]
    return {
        "net": NetConfig.desk()._asdict(),
        "train": TrainConfig().to_dict(),
        "dataset": dataset,
        "sweep": sweep,
        "eval": {"n": 1.0, "beta": 0.0, "threshold": 0.5, "split": "test"},
        "curve": {"ns": [1.0], "betas": [0.0], "count": 101},
        "analyze": {"samples": 200, "top": 5, "mask_sample": 0},
        "paths": {"data": None, "out": None, "checkpoint": None},
    }


def merge_config(base: Dict[str, Dict[str, Any]], update: Dict[str, Dict[str, Any]]) -> Dict:
    """
        Overlay a (partial) run config, rejecting unknown sections and keys
    """
    out = copy.deepcopy(base)
    for section, values in update.items():
        if section not in out or not isinstance(values, dict):
            raise ValidationError(f"Unknown config section '{section}'")
        for key, value in values.items():
            if key not in out[section]:
                raise ValidationError(f"Unknown config key '{section}.{key}'")
            if isinstance(out[section][key], dict) and isinstance(value, dict):
                out[section][key].update(value)
            else:
                out[section][key] = value
    return out


def load_run_config(path: Optional[str]) -> Dict:
    cfg = default_run_config()
    if path is None:
        return cfg
    with open(path, "r") as f:
        try:
            update = json.load(f)
        except ValueError as e:
            raise ValidationError(f"Invalid config file '{path}': {e}")
    return merge_config(cfg, update)


def write_run_config(cfg: Dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, RUN_CONFIG), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


# flag -> (section, key)
OVERRIDES = {
    "data": ("paths", "data"),
    "out": ("paths", "out"),
    "checkpoint": ("paths", "checkpoint"),
    "samples": ("dataset", "num_samples"),
    "image_size": ("dataset", "image_size"),
    "attributes": ("dataset", "attribute_names"),
    "data_seed": ("dataset", "seed"),
    "channels": ("net", "feature_channels"),
    "net_image_size": ("net", "image_size"),
    "head_hidden": ("net", "head_hidden"),
    "net_seed": ("net", "seed"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "learning_rate"),
    "optimizer": ("train", "optimizer"),
    "ablation": ("train", "ablation"),
    "seed": ("train", "seed"),
    "l1_reduction": ("train", "l1_reduction"),
    "clip_norm": ("train", "clip_norm"),
    "train_fraction": ("train", "train_fraction"),
    "n": ("eval", "n"),
    "beta": ("eval", "beta"),
    "threshold": ("eval", "threshold"),
    "split": ("eval", "split"),
    "sigmas": ("sweep", "sigmas"),
    "ns": ("sweep", "ns"),
    "betas": ("sweep", "betas"),
    "eval_samples": ("sweep", "eval_samples"),
    "noise_seed": ("sweep", "noise_seed"),
    "curve_n": ("curve", "ns"),
    "curve_beta": ("curve", "betas"),
    "count": ("curve", "count"),
    "analyze_samples": ("analyze", "samples"),
    "top": ("analyze", "top"),
    "mask_sample": ("analyze", "mask_sample"),
}
LAMBDAS = {"lambda_b": "lambda_b", "lambda_m": "lambda_m", "lambda_r": "lambda_r", "lambda_1": "lambda_1"}


def apply_cli_overrides(cfg: Dict, args: argparse.Namespace) -> Dict:
    """
        Overwrite the config values of all flags that were given explicitly
    """
    out = copy.deepcopy(cfg)
    if getattr(args, "preset", None) == "paper":
        out["net"]["feature_channels"] = NetConfig.paper().feature_channels
    for flag, (section, key) in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[section][key] = list(value) if isinstance(value, tuple) else value
    for flag, key in LAMBDAS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out["train"]["loss_weights"][key] = value
    return out


def float_list(text: str) -> Tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got '{text}'")


def name_list(text: str) -> Tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def curve_count(text: str) -> int:
    try:
        count = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
    if count < 2:
        raise argparse.ArgumentTypeError(f"at least two curve samples are needed, got {count}")
    return count


def _train_config(cfg: Dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"]).validate()


def _net_config(cfg: Dict, names: Sequence[str], samples: Sequence[Sample]) -> NetConfig:
    net = dict(cfg["net"])
    net["num_attributes"] = len(names)
    net["image_channels"] = int(samples[0].image.shape[0])
    return NetConfig(**net).with_ablation(cfg["train"]["ablation"]).validate()


def _select_split(
    samples: List[Sample], which: str, train_config: Optional[TrainConfig]
) -> List[Sample]:
    if which not in SPLITS:
        raise ValidationError(f"Unknown split '{which}', expected one of {SPLITS}")
    if which == "all":
        return samples
    if train_config is None:
        logger.warning("The checkpoint has no training config, evaluating on all samples")
        return samples
    train_part, test_part = split(samples, train_config.train_fraction, train_config.seed)
    return train_part if which == "train" else test_part


def _load_model_and_data(cfg: Dict) -> Tuple[MultiAttrNet, Optional[TrainConfig], List[Sample], List[str]]:
    net, train_config = load_checkpoint(cfg["paths"]["checkpoint"])
    cfg["net"] = net.config._asdict()
    if train_config is not None:
        cfg["train"] = train_config.to_dict()
    samples, names = load_dataset(cfg["paths"]["data"], net.config.image_size, net.config.image_channels)
    if len(names) != net.config.num_attributes:
        raise ValidationError(
            f"The dataset has {len(names)} attributes, the checkpoint {net.config.num_attributes}"
        )
    return net, train_config, samples, names


def _save_figure(plotter: Callable[[Figure], None], path: str, size=(6.4, 4.8)):
    fig = Figure(figsize=size)
    plotter(fig)
    fig.savefig(path)


def cmd_gen_data(cfg: Dict, args: argparse.Namespace) -> int:
    """
        Generate a synthetic dataset and export it
    """
    d = cfg["dataset"]
    spec = DatasetSpec(d["num_samples"], d["image_size"], tuple(d["attribute_names"]), d["seed"])
    samples = generate_synthetic(spec.validate())
    out = cfg["paths"]["out"]
    export_synthetic(samples, spec.attribute_names, out, spec.seed)
    write_run_config(cfg, out)
    return 0


def cmd_train(cfg: Dict, args: argparse.Namespace) -> int:
    """
        Train a network on a dataset, write the checkpoint and the trace
    """
    out = cfg["paths"]["out"]
    if cfg["paths"]["checkpoint"] is None:
        cfg["paths"]["checkpoint"] = os.path.join(out, "model.mcan")
    samples, names = load_dataset(cfg["paths"]["data"], cfg["net"]["image_size"])
    net_config = _net_config(cfg, names, samples)
    cfg["net"] = net_config._asdict()
    config = _train_config(cfg)._replace(checkpoint_path=cfg["paths"]["checkpoint"])
    write_run_config(cfg, out)
    train_part, test_part = split(samples, config.train_fraction, config.seed)
    net, trace = train(init_params(net_config), train_part, config, test_part)
    trace.to_csv(os.path.join(out, "trace.csv"))
    trace.timing_csv(os.path.join(out, "timing.csv"))
    if args.plots:
        _save_figure(lambda fig: plot_trace(trace, fig=fig), os.path.join(out, "trace.png"), (10, 4))
    return 0


def _accuracy_csv(path: str, names: Sequence[str], acc: np.ndarray, key: str = "attribute"):
    with open(path, "w") as f:
        f.write(f"{key},accuracy\n")
        for name, a in zip(names, acc):
            f.write(f"{name},{format_float(a)}\n")
        f.write(f"__mean__,{format_float(np.mean(acc))}\n")


def cmd_eval(cfg: Dict, args: argparse.Namespace) -> int:
    """
        Evaluate a checkpoint with a mask transformation
    """
    net, train_config, samples, names = _load_model_and_data(cfg)
    e = cfg["eval"]
    transform = TransformParams(float(e["n"]), float(e["beta"])).validate()
    samples = _select_split(samples, e["split"], train_config)
    acc = evaluate(net, samples, transform, float(e["threshold"]))
    out = cfg["paths"]["out"]
    write_run_config(cfg, out)
    _accuracy_csv(os.path.join(out, "accuracy.csv"), names, acc)
    if not args.quiet:
        print_accuracy(acc, names)
    return 0


def cmd_analyze(cfg: Dict, args: argparse.Namespace) -> int:
    """
        Export masks, channel importance, correlations and localization scores
    """
    net, _, samples, names = _load_model_and_data(cfg)
    a = cfg["analyze"]
    out = cfg["paths"]["out"]
    write_run_config(cfg, out)
    subset = samples[: a["samples"]]
    if not 0 <= a["mask_sample"] < len(samples):
        raise ValidationError(f"mask_sample {a['mask_sample']} is out of range")
    sample = samples[a["mask_sample"]]
    for k in range(net.config.num_attributes):
        export_masks(net, sample, k, os.path.join(out, "masks"))
    importance = importance_matrix(net, subset)
    importance_csv(importance, os.path.join(out, "importance.csv"), names)
    top = min(a["top"], net.config.feature_channels)
    with open(os.path.join(out, "top_channels.json"), "w") as f:
        json.dump({n: top_k_channels(s, top) for n, s in zip(names, importance)}, f, indent=1)
    features = feature_correlation(net, subset)
    features.to_json(os.path.join(out, "feature_correlation.json"))
    features.to_csv(os.path.join(out, "feature_correlation.csv"))
    attributes = attribute_correlation(net, subset, names)
    attributes.to_json(os.path.join(out, "attribute_correlation.json"))
    attributes.to_csv(os.path.join(out, "attribute_correlation.csv"))
    if all(s.supports is not None for s in subset):
        with open(os.path.join(out, "localization.csv"), "w") as f:
            f.write("attribute,score\n")
            for k, name in enumerate(names):
                if any(s.labels[k] == 1 for s in subset):
                    f.write(f"{name},{format_float(localization_score(net, subset, k))}\n")
                else:
                    logger.warning("No positive samples for '%s', no localization score", name)
    else:
        logger.warning("The dataset has no supports, the localization scores are omitted")
    if args.plots:
        for k, name in enumerate(names):
            _save_figure(
                lambda fig: plot_masks(net, sample, k, name=name, fig=fig),
                os.path.join(out, f"masks_attr{k}.png"),
                (12.8, 2.0),
            )
    return 0


def cmd_sweep(cfg: Dict, args: argparse.Namespace) -> int:
    """
        Evaluate the transformation grid under increasing Gaussian noise
    """
    net, train_config, samples, names = _load_model_and_data(cfg)
    s = cfg["sweep"]
    spec = SweepSpec(
        tuple(s["sigmas"]),
        tuple(s["ns"]),
        tuple(s["betas"]),
        s["eval_samples"],
        s["noise_seed"],
        s["threshold"],
    ).validate()
    samples = _select_split(samples, cfg["eval"]["split"], train_config)
    out = cfg["paths"]["out"]
    write_run_config(cfg, out)
    result = run_sweep(net, samples, spec, names)
    result.to_csv(os.path.join(out, "sweep.csv"))
    deltas = baseline_delta(result)
    delta_csv(deltas, os.path.join(out, "summary.csv"))
    if any(np.isclose(d.sigma, 0.3) for d in deltas):
        check_noise_improvement(deltas, 0.3)
    if args.plots:
        _save_figure(lambda fig: plot_sweep(result, fig=fig), os.path.join(out, "sweep.png"))
    return 0


def cmd_curve(cfg: Dict, args: argparse.Namespace) -> int:
    """
        Sample the transformation curves (m, g(m))
    """
    c = cfg["curve"]
    if c["count"] < 2:
        raise ValidationError(f"At least two curve samples are needed, got {c['count']}")
    transforms = [TransformParams(float(n), float(b)).validate() for n in c["ns"] for b in c["betas"]]
    out = cfg["paths"]["out"]
    write_run_config(cfg, out)
    with open(os.path.join(out, "curve.csv"), "w") as f:
        if len(transforms) == 1:
            f.write("m,g\n")
            for m, g in curve_samples(transforms[0], c["count"]):
                f.write(f"{format_float(m)},{format_float(g)}\n")
        else:
            f.write("n,beta,m,g\n")
            for t in transforms:
                for m, g in curve_samples(t, c["count"]):
                    f.write(f"{format_float(t.n)},{format_float(t.beta)},{format_float(m)},{format_float(g)}\n")
    if args.plots:
        _save_figure(lambda fig: plot_curves(transforms, c["count"], fig=fig), os.path.join(out, "curve.png"))
    return 0


def cmd_ablate(cfg: Dict, args: argparse.Namespace) -> int:
    """
        Train all four ablations (with and without the reconstructor and the multi-label head)
    """
    out = cfg["paths"]["out"]
    samples, names = load_dataset(cfg["paths"]["data"], cfg["net"]["image_size"])
    net_config = _net_config(cfg, names, samples)
    config = _train_config(cfg)
    write_run_config(cfg, out)
    train_part, test_part = split(samples, config.train_fraction, config.seed)
    results = ablation_study(train_part, test_part, net_config, config)
    for r in results:
        r.trace.to_csv(os.path.join(out, f"trace_{r.ablation}.csv"))
    with open(os.path.join(out, "ablation.csv"), "w") as f:
        f.write("ablation,accuracy\n")
        for r in results:
            f.write(f"{r.ablation},{format_float(r.accuracy)}\n")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, ("out",)),
    "train": (cmd_train, ("data", "out")),
    "eval": (cmd_eval, ("checkpoint", "data", "out")),
    "analyze": (cmd_analyze, ("checkpoint", "data", "out")),
    "sweep": (cmd_sweep, ("checkpoint", "data", "out")),
    "curve": (cmd_curve, ("out",)),
    "ablate": (cmd_ablate, ("data", "out")),
}


def _add_training_flags(p: argparse.ArgumentParser):
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default OUT/model.mcan)")
    p.add_argument("--preset", choices=("desk", "paper"), default=None, help="network size preset")
    p.add_argument("--image-size", dest="net_image_size", type=int, default=None, help="network input size")
    p.add_argument("--channels", type=int, default=None, help="feature and mask channels")
    p.add_argument("--head-hidden", type=int, default=None)
    p.add_argument("--net-seed", type=int, default=None, help="initialisation seed")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="learning rate")
    p.add_argument("--optimizer", choices=OPTIMIZERS, default=None)
    p.add_argument("--ablation", choices=ABLATIONS, default=None)
    p.add_argument("--seed", type=int, default=None, help="shuffling and split seed")
    p.add_argument("--lambda-b", type=float, default=None)
    p.add_argument("--lambda-m", type=float, default=None)
    p.add_argument("--lambda-r", type=float, default=None)
    p.add_argument("--lambda-1", type=float, default=None)
    p.add_argument("--l1-reduction", choices=L1_REDUCTIONS, default=None)
    p.add_argument("--clip-norm", type=float, default=None, help="global gradient norm limit")
    p.add_argument("--train-fraction", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcan", description="Multi-attribute classification with multi-channel attention masks"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON run config (flags override it)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--plots", action="store_true", help="also save PNG figures")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--samples", type=int, default=None, help="number of images")
    p.add_argument("--seed", dest="data_seed", type=int, default=None, help="generator seed")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--attributes", type=name_list, default=None, help="comma separated attributes")

    p = sub.add_parser("train", parents=[common], help="train a network")
    p.add_argument("--data", default=None, help="dataset directory")
    _add_training_flags(p)

    p = sub.add_parser("ablate", parents=[common], help="train all ablations")
    p.add_argument("--data", default=None, help="dataset directory")
    _add_training_flags(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--n", type=float, default=None, help="transformation slope")
    p.add_argument("--beta", type=float, default=None, help="transformation suppression")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--split", choices=SPLITS, default=None)

    p = sub.add_parser("analyze", parents=[common], help="analyse the attention masks")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--samples", dest="analyze_samples", type=int, default=None)
    p.add_argument("--top", type=int, default=None, help="channels per attribute")
    p.add_argument("--mask-sample", type=int, default=None, help="sample for the mask images")

    p = sub.add_parser("sweep", parents=[common], help="noise robustness sweep")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--sigmas", type=float_list, default=None)
    p.add_argument("--ns", type=float_list, default=None)
    p.add_argument("--betas", type=float_list, default=None)
    p.add_argument("--eval-samples", type=int, default=None)
    p.add_argument("--noise-seed", type=int, default=None)
    p.add_argument("--split", choices=SPLITS, default=None)

    p = sub.add_parser("curve", parents=[common], help="sample the transformation curves")
    p.add_argument("--n", dest="curve_n", type=float, nargs="+", default=None)
    p.add_argument("--beta", dest="curve_beta", type=float, nargs="+", default=None)
    p.add_argument("--count", type=curve_count, default=None)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    logging.getLogger("mcan").setLevel(level)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    command, required = COMMANDS[args.command]
    try:
        cfg = apply_cli_overrides(load_run_config(args.config), args)
    except (McanException, OSError) as e:
        print(f"mcan: error: {e}", file=sys.stderr)
        return 1
    missing = [r for r in required if cfg["paths"][r] is None]
    if missing:
        parser.error(f"{args.command} requires " + ", ".join("--" + m for m in missing))
    try:
        return command(cfg, args)
    except (McanException, OSError) as e:
        print(f"mcan: error: {e}", file=sys.stderr)
        return 1
