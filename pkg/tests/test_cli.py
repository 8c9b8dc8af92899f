import json
import os
import numpy as np
import pytest
from mcan import cli
from mcan.checkpoint import load_checkpoint
from mcan.cli import (
    apply_cli_overrides,
    build_parser,
    default_run_config,
    load_run_config,
    main,
    merge_config,
)
from mcan.data import load_dataset
from mcan.network import init_params
from mcan.utils import ValidationError

from .utils import *


def _read(path: str) -> str:
    with open(path) as f:
        return f.read()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    model = str(root / "model")
    assert main(["gen-data", "--out", data, "--samples", "20", "--image-size", "16", "--seed", "3", "-q"]) == 0
    code = main(
        [
            "train",
            "--data", data,
            "--out", model,
            "--image-size", "16",
            "--channels", "4",
            "--head-hidden", "3",
            "--epochs", "1",
            "--batch-size", "8",
            "-q",
        ]
    )
    assert code == 0
    return root, data, model


def test_config():
    print("Testing run configs")
    cfg = default_run_config()
    assert cfg["net"]["feature_channels"] == 32
    assert cfg["train"]["loss_weights"]["lambda_r"] == 4.0
    assert cfg["sweep"]["sigmas"][6] == 0.3
    merged = merge_config(cfg, {"train": {"epochs": 3, "loss_weights": {"lambda_1": 0.0}}})
    assert merged["train"]["epochs"] == 3
    assert merged["train"]["loss_weights"] == {"lambda_b": 1.0, "lambda_m": 1.0, "lambda_r": 4.0, "lambda_1": 0.0}
    assert cfg["train"]["epochs"] == 15
    with pytest.raises(ValidationError):
        merge_config(cfg, {"training": {}})
    with pytest.raises(ValidationError):
        merge_config(cfg, {"train": {"epoch": 3}})
    args = build_parser().parse_args(["train", "--preset", "paper", "--epochs", "2", "--lambda-1", "0"])
    out = apply_cli_overrides(cfg, args)
    assert out["net"]["feature_channels"] == 128
    assert out["train"]["epochs"] == 2
    assert out["train"]["loss_weights"]["lambda_1"] == 0.0
    assert out["train"]["batch_size"] == cfg["train"]["batch_size"]
    args = build_parser().parse_args(["sweep", "--sigmas", "0,0.1,0.3"])
    assert apply_cli_overrides(cfg, args)["sweep"]["sigmas"] == [0.0, 0.1, 0.3]


def test_config_file(tmp_path):
    print("Testing config files")
    path = str(tmp_path / "cfg.json")
    with open(path, "w") as f:
        json.dump({"curve": {"count": 3}}, f)
    assert load_run_config(path)["curve"]["count"] == 3
    out = str(tmp_path / "out")
    assert main(["curve", "--config", path, "--out", out, "-q"]) == 0
    assert _read(os.path.join(out, "curve.csv")) == "m,g\n0.0,0.0\n0.5,0.5\n1.0,1.0\n"
    # the written config reproduces the run
    again = str(tmp_path / "again")
    assert main(["curve", "--config", os.path.join(out, "run_config.json"), "--out", again, "-q"]) == 0
    assert _read(os.path.join(again, "curve.csv")) == _read(os.path.join(out, "curve.csv"))
    with open(path, "w") as f:
        f.write("{not json")
    assert main(["curve", "--config", path, "--out", out, "-q"]) == 1
    with open(path, "w") as f:
        json.dump({"curve": {"points": 3}}, f)
    assert main(["curve", "--config", path, "--out", out, "-q"]) == 1


def test_curve(tmp_path):
    print("Testing the curve command")
    out = str(tmp_path)
    assert main(["curve", "--out", out, "--n", "0", "--beta", "0.5", "--count", "5", "-q"]) == 0
    lines = _read(os.path.join(out, "curve.csv")).splitlines()
    assert lines[0] == "m,g"
    assert len(lines) == 6
    assert all(float(l.split(",")[1]) == pytest.approx(0.25) for l in lines[1:])
    assert main(["curve", "--out", out, "--n", "1", "2", "--beta", "0", "1", "--count", "3", "-q"]) == 0
    lines = _read(os.path.join(out, "curve.csv")).splitlines()
    assert lines[0] == "n,beta,m,g"
    assert len(lines) == 1 + 4 * 3
    assert lines[-1] == "2.0,1.0,1.0,1.0"
    with pytest.raises(SystemExit) as e:
        main(["curve", "--out", out, "--count", "1"])
    assert e.value.code == 2
    assert main(["curve", "--out", out, "--n", "1", "--beta", "2", "-q"]) == 1


def test_usage_errors(tmp_path):
    print("Testing usage errors")
    with pytest.raises(SystemExit) as e:
        main(["gen-data"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["eval", "--out", str(tmp_path)])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["train", "--optimizer", "lbfgs"])
    assert e.value.code == 2


def test_gen_data(trained):
    print("Testing the gen-data command")
    _, data, _ = trained
    samples, names = load_dataset(data)
    assert len(samples) == 20
    assert samples[0].image.shape == (1, 16, 16)
    assert samples[0].supports is not None
    assert len(names) == 6
    cfg = json.loads(_read(os.path.join(data, "run_config.json")))
    assert cfg["dataset"]["seed"] == 3


def test_train(trained):
    print("Testing the train command")
    _, _, model = trained
    for name in ("model.mcan", "trace.csv", "timing.csv", "run_config.json"):
        assert os.path.isfile(os.path.join(model, name))
    net, config = load_checkpoint(os.path.join(model, "model.mcan"))
    assert net.config.feature_channels == 4
    assert net.config.image_size == 16
    assert config.epochs == 1
    assert config.checkpoint_path is None
    assert len(_read(os.path.join(model, "trace.csv")).splitlines()) == 2


def test_eval(trained, tmp_path, capsys):
    print("Testing the eval command")
    _, data, model = trained
    checkpoint = os.path.join(model, "model.mcan")
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["eval", "--checkpoint", checkpoint, "--data", data, "--out", a]) == 0
    assert "Mean" in capsys.readouterr().out
    assert main(["eval", "--checkpoint", checkpoint, "--data", data, "--out", b, "--n", "1", "--beta", "0", "-q"]) == 0
    assert _read(os.path.join(a, "accuracy.csv")) == _read(os.path.join(b, "accuracy.csv"))
    lines = _read(os.path.join(a, "accuracy.csv")).splitlines()
    assert lines[0] == "attribute,accuracy"
    assert lines[1].startswith("circle,")
    assert lines[-1].startswith("__mean__,")
    c = str(tmp_path / "c")
    assert main(["eval", "--checkpoint", checkpoint, "--data", data, "--out", c, "--n", "4", "--beta", "1", "--split", "all", "-q"]) == 0
    acc = [float(l.split(",")[1]) for l in _read(os.path.join(c, "accuracy.csv")).splitlines()[1:]]
    assert all(0 <= v <= 1 for v in acc)


def test_eval_errors(trained, tmp_path, capsys):
    print("Testing eval failures")
    _, data, model = trained
    bad = str(tmp_path / "bad.mcan")
    with open(bad, "wb") as f:
        f.write(b"MCAN garbage")
    assert main(["eval", "--checkpoint", bad, "--data", data, "--out", str(tmp_path), "-q"]) == 1
    assert "mcan: error:" in capsys.readouterr().err
    missing = str(tmp_path / "missing.mcan")
    assert main(["eval", "--checkpoint", missing, "--data", data, "--out", str(tmp_path), "-q"]) == 1
    checkpoint = os.path.join(model, "model.mcan")
    assert main(["eval", "--checkpoint", checkpoint, "--data", data, "--out", str(tmp_path), "--beta", "1.5", "-q"]) == 1


def test_analyze(trained, tmp_path):
    print("Testing the analyze command")
    _, data, model = trained
    checkpoint = os.path.join(model, "model.mcan")
    out = str(tmp_path / "analysis")
    assert main(["analyze", "--checkpoint", checkpoint, "--data", data, "--out", out, "--top", "2", "-q"]) == 0
    assert os.path.isfile(os.path.join(out, "masks", "attr5_ch3.pgm"))
    assert os.path.isfile(os.path.join(out, "masks", "attr0_index.json"))
    top = json.loads(_read(os.path.join(out, "top_channels.json")))
    assert len(top["circle"]) == 2
    corr = json.loads(_read(os.path.join(out, "feature_correlation.json")))
    assert np.array(corr["matrix"]).shape == (4, 4)
    corr = json.loads(_read(os.path.join(out, "attribute_correlation.json")))
    assert corr["labels"][0] == "circle"
    assert _read(os.path.join(out, "localization.csv")).startswith("attribute,score\n")
    assert len(_read(os.path.join(out, "importance.csv")).splitlines()) == 1 + 6 * 4


def test_analyze_without_supports(trained, tmp_path):
    print("Testing the analyze command without supports")
    root, data, model = trained
    plain = str(tmp_path / "plain")
    os.makedirs(plain)
    for name in os.listdir(data):
        if name not in ("supports.json", "run_config.json"):
            with open(os.path.join(data, name), "rb") as f, open(os.path.join(plain, name), "wb") as g:
                g.write(f.read())
    out = str(tmp_path / "analysis")
    checkpoint = os.path.join(model, "model.mcan")
    assert main(["analyze", "--checkpoint", checkpoint, "--data", plain, "--out", out, "-q"]) == 0
    assert not os.path.exists(os.path.join(out, "localization.csv"))
    assert os.path.isfile(os.path.join(out, "importance.csv"))


def test_sweep(trained, tmp_path):
    print("Testing the sweep command")
    _, data, model = trained
    checkpoint = os.path.join(model, "model.mcan")
    out = str(tmp_path / "sweep")
    args = ["sweep", "--checkpoint", checkpoint, "--data", data, "--out", out, "--sigmas", "0", "--ns", "1,2", "--betas", "0,1", "-q"]
    assert main(args) == 0
    lines = _read(os.path.join(out, "sweep.csv")).splitlines()
    assert len(lines) == 1 + 4 * 7
    summary = _read(os.path.join(out, "summary.csv")).splitlines()
    assert len(summary) == 2
    assert summary[1].startswith("0.0,")
    first = _read(os.path.join(out, "sweep.csv"))
    assert main(args) == 0
    assert _read(os.path.join(out, "sweep.csv")) == first


def test_train_non_finite(trained, tmp_path, monkeypatch, capsys):
    print("Testing the train command with a non-finite loss")
    _, data, _ = trained

    def nan_params(config):
        net = init_params(config)
        net.params["binhead.0.dense.bias"].values[:] = np.nan
        return net

    monkeypatch.setattr(cli, "init_params", nan_params)
    out = str(tmp_path / "model")
    args = ["train", "--data", data, "--out", out, "--image-size", "16", "--channels", "4", "--head-hidden", "3"]
    assert main(args + ["--epochs", "1", "--batch-size", "8", "-q"]) == 1
    assert "l_b" in capsys.readouterr().err
    assert not os.path.exists(os.path.join(out, "model.mcan"))
    assert not os.path.exists(os.path.join(out, "trace.csv"))
    assert [f for f in os.listdir(out) if f.startswith(".")] == []
