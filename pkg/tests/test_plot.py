# These tests check if the plotting and printing functions run

import numpy as np
import pytest
from matplotlib import pyplot as plt
from mcan.optimisation import EpochRecord, TrainTrace
from mcan.objective import LossBreakdown
from mcan.plot import (
    fill_attribute_names,
    plot_curves,
    plot_masks,
    plot_sweep,
    plot_trace,
    print_accuracy,
    print_breakdown,
)
from mcan.robustness import SweepSpec, run_sweep
from mcan.transform import DEFAULT_GRID, IDENTITY
from mcan.utils import McanException, McanWarning

from .utils import *


def test_names():
    print("Testing attribute names")
    assert fill_attribute_names(None, 2) == ["Attribute 0", "Attribute 1"]
    assert fill_attribute_names(["a", "b"], 2) == ["a", "b"]
    assert fill_attribute_names(["a"], -1) == ["a"]
    with pytest.warns(McanWarning):
        assert fill_attribute_names(["a", "b", "c"], 2) == ["a", "b"]
    with pytest.warns(McanWarning):
        assert fill_attribute_names(["a"], 2) == ["a", "Attribute 1"]


def test_print(capsys):
    print("Testing printing")
    capsys.readouterr()
    print_accuracy(np.array([0.5, 1.0]), ["x", "y"], decimals=2)
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "Attribute Accuracy"
    assert lines[1].split() == ["Attribute:", "x", "y", "Mean"]
    assert lines[2].split() == ["Accuracy:", "0.50", "1.00", "0.75"]
    print_breakdown(LossBreakdown(0.5, 0.25, 0.125, 10.0, 1.0), title="")
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5
    assert lines[0].split() == ["l_b:", "0.5000"]


def test_plots():
    print("Testing plots")
    plot_curves(DEFAULT_GRID[:5] + (IDENTITY,), 21, fig=plt.figure())
    net = toy_net()
    samples = data_create(4, 16)
    plot_masks(net, samples[0], 2, 3, "circle", fig=plt.figure())
    plot_masks(net, samples[0], 0, fig=plt.figure())
    with pytest.raises(McanException):
        plot_masks(net, samples[0]._replace(image=np.zeros((2, 16, 16))), 0, fig=plt.figure())
    spec = SweepSpec(sigmas=(0.0, 0.1), ns=(1.0, 2.0), betas=(0.0, 0.5), eval_samples=4)
    plot_sweep(run_sweep(net, samples, spec), fig=plt.figure())
    trace = TrainTrace([EpochRecord(e, 0.5, 0.4, 0.1, 20.0, 1.0, 0.6 + e / 10, 0.1) for e in (1, 2, 3)])
    plot_trace(trace, fig=plt.figure())
    # plt.show()
    plt.close("all")
