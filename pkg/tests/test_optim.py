import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from salnet import data, models, optim
from salnet.errors import ConfigError, DivergenceError
from salnet.layers import LayerParams


def test_euclidean_loss_matches_direct_sum(rng):
    pred, target = rng.random((1, 1, 48, 48)), rng.random((1, 1, 48, 48))
    loss, grad = optim.euclidean_loss(pred, target, 1)
    direct = 0.0
    for p, t in zip(pred.ravel(), target.ravel()):
        direct += (p - t) ** 2
    assert abs(loss - direct / 2) <= 1e-12 * direct
    np.testing.assert_allclose(grad, pred - target)


def test_euclidean_loss_zero_for_identical(rng):
    a = rng.random((2, 1, 4, 4))
    loss, grad = optim.euclidean_loss(a, a, 2)
    assert loss == 0.0 and not grad.any()


def _one_param_state(p0=0.0):
    params = {"p": np.array([p0])}
    return params, optim.OptState({"p": np.zeros(1)})


def test_nesterov_two_steps():
    cfg = optim.TrainConfig(momentum=0.9, weight_decay=0.0, max_iters=2)
    params, state = _one_param_state()
    optim.sgd_nesterov_step(params, {"p": np.array([1.0])}, state, cfg, 0.1)
    assert abs(state.velocity["p"][0] - -0.1) <= 1e-12
    assert abs(params["p"][0] - -0.19) <= 1e-12
    optim.sgd_nesterov_step(params, {"p": np.array([1.0])}, state, cfg, 0.1)
    assert abs(state.velocity["p"][0] - -0.19) <= 1e-12
    assert abs(params["p"][0] - -0.461) <= 1e-12
    assert state.iteration == 2


def test_zero_momentum_is_plain_sgd():
    cfg = optim.TrainConfig(momentum=0.0, weight_decay=0.0, max_iters=1)
    params, state = _one_param_state(1.0)
    optim.sgd_nesterov_step(params, {"p": np.array([2.0])}, state, cfg, 0.25)
    assert params["p"][0] == 0.5


def test_weight_decay_shrinks_with_zero_gradient():
    cfg = optim.TrainConfig(momentum=0.0, weight_decay=0.1, max_iters=1)
    params, state = _one_param_state(1.0)
    optim.sgd_nesterov_step(params, {"p": np.zeros(1)}, state, cfg, 0.5)
    assert params["p"][0] == pytest.approx(0.95)


def test_non_finite_update_raises():
    cfg = optim.TrainConfig(max_iters=1)
    params, state = _one_param_state()
    with pytest.raises(DivergenceError) as info:
        optim.sgd_nesterov_step(params, {"p": np.array([np.inf])}, state, cfg, 0.1)
    assert info.value.block == "p"


def test_deep_schedule():
    s = optim.deep_schedule()
    assert abs(optim.lr_at(s, 0) - 0.01 / 76_800) <= 1e-12
    assert f"{optim.lr_at(s, 0):.1e}" == "1.3e-07"
    assert optim.lr_at(s, 99) == optim.lr_at(s, 0)
    assert optim.lr_at(s, 100) == optim.lr_at(s, 0) / 2
    assert optim.lr_at(s, 10**6) == s.floor_lr


def test_shallow_schedule_endpoints():
    s = optim.shallow_schedule()
    assert optim.lr_at(s, epoch=0) == 0.03
    assert optim.lr_at(s, epoch=999) == 0.0001
    lrs = [optim.lr_at(s, epoch=e) for e in range(1000)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


@given(base=st.floats(1e-6, 1.0), interval=st.integers(1, 50), it=st.integers(0, 5000))
def test_step_schedule_bounds(base, interval, it):
    s = optim.StepHalving(base, interval)
    lr = optim.lr_at(s, it)
    assert s.floor_lr <= lr <= base
    assert lr >= optim.lr_at(s, it + 1)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        optim.StepHalving(0.01, 10, floor_lr=0.1)
    with pytest.raises(ConfigError):
        optim.InterpolatedDecay(1e-4, 0.03, 10)
    with pytest.raises(ConfigError):
        optim.TrainConfig()


@given(seed=st.integers(0, 1000), cap=st.floats(0.01, 5.0))
def test_maxnorm_rows(seed, cap):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((6, 9)) * rng.uniform(0.1, 3.0)
    out = optim.apply_maxnorm(LayerParams(w, np.zeros(6)), cap)
    norms = np.linalg.norm(out.weights, axis=1)
    assert np.all(norms <= cap + 1e-9)
    small = np.linalg.norm(w, axis=1) <= cap
    np.testing.assert_array_equal(out.weights[small], w[small])


def _tiny_problem(n=4):
    samples = data.synth_generate(n, 96, seed=3)
    stats = data.compute_stats(samples)
    return data.prepare_arrays("shallow", samples, stats, target_hw=(24, 24))


def test_training_reduces_loss_and_is_reproducible():
    x, y = _tiny_problem()
    net = models.build(models.shallow_small_spec(), seed=0)
    cfg = optim.TrainConfig(base_lr=0.01, batch_size=2, max_iters=30, seed=4)
    a = optim.train(net, (x, y), cfg)
    b = optim.train(net, (x, y), cfg)
    assert [r.train_loss for r in a.history] == [r.train_loss for r in b.history]
    for p, q in zip(a.network.parameter_arrays(), b.network.parameter_arrays()):
        assert p.tobytes() == q.tobytes()
    first = np.mean(a.train_losses[:4])
    assert np.mean(a.train_losses[-4:]) < first
    # the argument network is untouched
    assert np.all(net.params["fc1"].bias == np.float32(0.1))


def test_train_with_validation_and_maxnorm(tmp_path):
    x, y = _tiny_problem()
    net = models.build(models.shallow_small_spec(), seed=0)
    cfg = optim.TrainConfig(base_lr=0.01, batch_size=2, max_epochs=2, maxnorm_cap=0.05,
                            val_interval=2)
    res = optim.train(net, (x[:2], y[:2]), cfg, val=(x[2:], y[2:]))
    assert len(res.history) == 2
    assert [it for it, _ in res.val_losses] == [1]
    for name in ("fc1", "fc2"):
        assert np.linalg.norm(res.network.params[name].weights, axis=1).max() <= 0.05 + 1e-6
    optim.write_history(res.history, tmp_path / "h.tsv")
    back = optim.read_history(tmp_path / "h.tsv")
    assert [r.iteration for r in back] == [0, 1]
    assert math.isnan(back[0].val_loss) and back[1].val_loss == res.history[1].val_loss


def test_divergence_reported():
    x, y = _tiny_problem(2)
    net = models.build(models.shallow_small_spec(), seed=0)
    cfg = optim.TrainConfig(base_lr=1e6, batch_size=2, max_iters=50, weight_decay=0)
    with pytest.raises(DivergenceError):
        optim.train(net, (x, y), cfg)
