import numpy as np
import pytest

from salnet import models
from salnet.cli import run_gradcheck, tiny_shallow_spec
from salnet.errors import ConfigError
from salnet.gradcheck import grad_check, relative_error
from salnet.layers import LayerParams, LayerSpec


def test_relative_error_definition():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 0.0) == 0.0


def test_single_conv_layer(rng):
    spec = LayerSpec.conv(3, 2, name="c")
    p = LayerParams(rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2))
    report = grad_check((spec, p), rng.standard_normal((2, 2, 4, 4)), 1e-5)
    assert set(report.params) == {"c.weights", "c.bias"}
    assert report.passed(1e-4)


def test_detects_wrong_gradient(rng, monkeypatch):
    import salnet.gradcheck as gc

    real = gc.layer_backward

    def broken(*args, **kw):
        gx, gp = real(*args, **kw)
        return gx * 1.1, gp

    monkeypatch.setattr(gc, "layer_backward", broken)
    report = grad_check((LayerSpec.relu(), None), rng.standard_normal((3, 3)) + 2.0)
    assert not report.passed(1e-4)


def test_shrunken_network_end_to_end():
    net = models.build(tiny_shallow_spec(), models.HeInit(), seed=0, dtype=np.float64)
    x = np.random.default_rng(0).uniform(-1, 1, (2,) + net.spec.input_shape)
    report = grad_check(net, x, 1e-5, max_entries=40)
    assert report.passed(1e-3), report.params


def test_epsilon_and_precision_guards(rng):
    with pytest.raises(ConfigError):
        grad_check((LayerSpec.relu(), None), rng.standard_normal(3), 1e-2)
    net = models.build(tiny_shallow_spec(), seed=0)
    with pytest.raises(ConfigError):
        grad_check(net, rng.standard_normal((1, 3, 24, 24)))


def test_non_finite_input_reported():
    report = grad_check((LayerSpec.relu(), None), np.array([1.0, np.nan]))
    assert report.problems and not report.passed(1.0)


def test_cli_suite_one_seed():
    rows = run_gradcheck(seeds=1)
    kinds = {r[0] for r in rows}
    assert kinds == {"conv", "deconv", "maxpool", "relu", "fully_connected", "maxout", "dropout",
                     "shallow-tiny"}
    assert all(r[3] for r in rows), rows
