"""Central finite-difference gradient checks for layers and whole networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .layers import LayerParams, LayerSpec, layer_backward, layer_forward


@dataclass
class GradCheckReport:
    """Max relative error per parameter block (``"conv1.weights"`` ...) and input."""

    params: dict[str, float] = field(default_factory=dict)
    input: float = 0.0
    problems: list[str] = field(default_factory=list)

    @property
    def max_error(self):
        return max([self.input, *self.params.values()])

    def passed(self, threshold):
        return not self.problems and self.max_error < threshold


def relative_error(analytic, numeric):
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-12)


class _LayerTarget:
    def __init__(self, spec: LayerSpec, params: LayerParams | None, seed):
        self.spec = spec
        self.params = params
        self.seed = seed
        self.proj = None

    def blocks(self):
        if self.params is None:
            return {}
        name = self.spec.name or self.spec.kind
        return {f"{name}.weights": self.params.weights, f"{name}.bias": self.params.bias}

    def _forward(self, x):
        # reseeded so dropout draws the same mask on every evaluation
        rng = np.random.default_rng(self.seed)
        return layer_forward(self.spec, self.params, x, rng=rng, train=True)

    def _init(self, y):
        if self.proj is None:
            self.proj = np.random.default_rng(self.seed + 1).standard_normal(y.shape)
            # a constant offset leaves the gradient unchanged; measuring from the
            # unperturbed output keeps rounding in the loss proportional to the change
            self.base = y.copy()

    def loss(self, x):
        y, _ = self._forward(x)
        self._init(y)
        return float(np.sum(self.proj * (y - self.base)))

    def gradients(self, x):
        y, cache = self._forward(x)
        self._init(y)
        gx, gp = layer_backward(self.spec, self.params, cache, self.proj)
        grads = {}
        if gp is not None:
            name = self.spec.name or self.spec.kind
            grads = {f"{name}.weights": gp.weights, f"{name}.bias": gp.bias}
        return gx, grads


class _NetworkTarget:
    def __init__(self, network, seed):
        from .optim import euclidean_loss

        self.net = network
        self.seed = seed
        self.target = None
        self._loss = euclidean_loss

    def blocks(self):
        return dict(self.net.parameter_blocks())

    def _out(self, x):
        rng = np.random.default_rng(self.seed)
        y, caches = self.net.forward(x, train=True, rng=rng)
        if self.target is None:
            self.target = np.random.default_rng(self.seed + 1).uniform(0, 1, y.shape)
            self.base = y.copy()
        return y, caches

    def loss(self, x):
        # Euclidean loss minus its value at the unperturbed output, expanded so
        # that the cancellation happens per entry rather than after summation
        y, _ = self._out(x)
        d = y - self.base
        return float(np.sum(d * d) + 2.0 * np.sum(d * (self.base - self.target))) / (2.0 * y.shape[0])

    def gradients(self, x):
        y, caches = self._out(x)
        _, g = self._loss(y, self.target, y.shape[0])
        gx, grads = self.net.backward(caches, g)
        return gx, {f"{k}.{part}": getattr(v, part) for k, v in grads.items()
                    for part in ("weights", "bias")}


def grad_check(model, x, epsilon=1e-5, *, seed=0, max_entries=None, rng=None):
    """Compare analytic gradients against central differences.

    ``model`` is a ``Network`` or a ``(LayerSpec, LayerParams | None)`` pair.
    The scalar loss is a fixed random projection of a layer's output, or the
    Euclidean loss against a fixed random target for a network. When
    ``max_entries`` is set, at most that many randomly chosen entries of each
    block are perturbed (drawn from ``rng``).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    if isinstance(model, tuple):
        spec, params = model
        if params is not None:
            params = params.astype(np.float64)
        target = _LayerTarget(spec, params, seed)
    else:
        if any(b.dtype != np.float64 for b in model.parameter_arrays()):
            raise ConfigError("gradient checks require a float64 network")
        target = _NetworkTarget(model, seed)
    if rng is None:
        rng = np.random.default_rng(seed + 2)

    report = GradCheckReport()
    gx, grads = target.gradients(x)
    for name, g in [("input", gx), *grads.items()]:
        if not np.all(np.isfinite(g)):
            report.problems.append(f"non-finite analytic gradient in {name}")
    if report.problems:
        return report

    def numeric(arr, idx):
        old = arr[idx]
        arr[idx] = old + epsilon
        up = target.loss(x)
        arr[idx] = old - epsilon
        down = target.loss(x)
        arr[idx] = old
        return (up - down) / (2 * epsilon)

    def check_block(name, arr, analytic):
        size = arr.size
        if max_entries is not None and size > max_entries:
            flat = rng.choice(size, size=max_entries, replace=False)
        else:
            flat = np.arange(size)
        worst = 0.0
        for f in flat:
            idx = np.unravel_index(f, arr.shape)
            num = numeric(arr, idx)
            if not np.isfinite(num):
                report.problems.append(f"non-finite loss while perturbing {name}{idx}")
                return float("inf")
            worst = max(worst, float(relative_error(analytic[idx], num)))
        return worst

    report.input = check_block("input", x, gx)
    blocks = target.blocks()
    for name, arr in blocks.items():
        report.params[name] = check_block(name, arr, grads[name])
    return report
