"""Euclidean loss, Nesterov SGD, learning-rate schedules, max-norm and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .layers import LayerParams

log = logging.getLogger(__name__)


def euclidean_loss(pred, target, batch):
    """``sum((pred - target)**2) / (2 * batch)`` and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    diff = pred - target
    d64 = diff.astype(np.float64, copy=False)
    loss = float(np.dot(d64.ravel(), d64.ravel())) / (2.0 * batch)
    return loss, diff / batch


# ---------------------------------------------------------------- schedules

@dataclass(frozen=True)
class StepHalving:
    base_lr: float
    interval_iters: int = 100
    floor_lr: float | None = None

    def __post_init__(self):
        if self.base_lr <= 0 or self.interval_iters < 1:
            raise ConfigError("step schedule needs base_lr > 0 and interval >= 1")
        if self.floor_lr is None:
            object.__setattr__(self, "floor_lr", self.base_lr / 1024)
        if self.floor_lr > self.base_lr:
            raise ConfigError("floor_lr must not exceed base_lr")


@dataclass(frozen=True)
class InterpolatedDecay:
    start_lr: float
    end_lr: float
    total_epochs: int

    def __post_init__(self):
        if not 0 < self.end_lr <= self.start_lr:
            raise ConfigError("decay schedule needs 0 < end_lr <= start_lr")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")


@dataclass(frozen=True)
class Constant:
    lr: float


def deep_schedule(predictions_per_image=320 * 240, base=0.01, interval_iters=100,
                  floor_lr=None):
    lr = base / predictions_per_image
    return StepHalving(lr, interval_iters, floor_lr)


def shallow_schedule(total_epochs=1000, start_lr=0.03, end_lr=1e-4):
    return InterpolatedDecay(start_lr, end_lr, total_epochs)


def lr_at(schedule, iteration=0, epoch=0):
    if isinstance(schedule, StepHalving):
        return max(schedule.floor_lr,
                   schedule.base_lr * 0.5 ** (iteration // schedule.interval_iters))
    if isinstance(schedule, InterpolatedDecay):
        last = schedule.total_epochs - 1
        if last == 0 or epoch <= 0:
            return schedule.start_lr
        if epoch >= last:
            return schedule.end_lr
        # geometric interpolation, hitting both endpoints exactly
        return schedule.start_lr * (schedule.end_lr / schedule.start_lr) ** (epoch / last)
    if isinstance(schedule, Constant):
        return schedule.lr
    raise ConfigError(f"unknown schedule {schedule!r}")


# ---------------------------------------------------------------- config & state

@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: object = None
    batch_size: int = 8
    max_iters: int | None = None
    max_epochs: int | None = None
    # row-norm cap on the fully connected layers; None disables it
    maxnorm_cap: float | None = 2.0
    maxnorm_layers: Sequence[str] | None = None
    val_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.maxnorm_cap is not None and self.maxnorm_cap <= 0:
            raise ConfigError("maxnorm cap must be positive")
        if self.max_iters is None and self.max_epochs is None:
            raise ConfigError("set max_iters or max_epochs")
        for v in (self.max_iters, self.max_epochs):
            if v is not None and v < 0:
                raise ConfigError("iteration/epoch limits must be >= 0")
        if self.schedule is None:
            self.schedule = Constant(self.base_lr)


@dataclass
class OptState:
    velocity: dict[str, np.ndarray]
    iteration: int = 0
    epoch: int = 0

    @classmethod
    def zeros_like(cls, network):
        return cls({name: np.zeros_like(a) for name, a in network.parameter_blocks()})


def sgd_nesterov_step(params: dict, grads: dict, state: OptState, cfg: TrainConfig, lr):
    """In-place Nesterov SGD on ``{block_name: array}`` dicts.

    ``v <- mu*v - lr*(g + wd*p)``; ``p <- p + mu*v - lr*(g + wd*p)``.
    """
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    mu, wd = cfg.momentum, cfg.weight_decay
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        step = g * lr
        if wd:
            step += p * (wd * lr)
        v = state.velocity[name]
        v *= mu
        v -= step
        update = v * mu
        update -= step
        if not np.all(np.isfinite(update)):
            raise DivergenceError(f"non-finite update for {name} at iteration {state.iteration}",
                                  iteration=state.iteration, block=name)
        p += update
    state.iteration += 1
    return params, state


def apply_maxnorm(params: LayerParams, cap) -> LayerParams:
    """Rescale each output unit's incoming weight row to L2 norm <= cap."""
    if cap <= 0:
        raise ConfigError("max-norm cap must be positive")
    w = params.weights
    norms = np.sqrt(np.sum(w.astype(np.float64) ** 2, axis=1, keepdims=True))
    scale = np.where(norms > cap, cap / np.maximum(norms, 1e-300), 1.0)
    return LayerParams((w * scale).astype(w.dtype), params.bias.copy())


# ---------------------------------------------------------------- training loop

@dataclass
class HistoryRow:
    iteration: int
    lr: float
    train_loss: float
    val_loss: float = math.nan


@dataclass
class TrainResult:
    network: object
    history: list[HistoryRow] = field(default_factory=list)

    @property
    def train_losses(self):
        return [r.train_loss for r in self.history]

    @property
    def val_losses(self):
        return [(r.iteration, r.val_loss) for r in self.history if not math.isnan(r.val_loss)]


def dataset_loss(network, x, y, batch_size=8):
    """Mean per-image Euclidean loss of ``network`` in test mode."""
    total = 0.0
    for i in range(0, len(x), batch_size):
        pred = network(x[i:i + batch_size])
        total += euclidean_loss(pred, y[i:i + batch_size].astype(pred.dtype), 1)[0]
    return total / len(x)


def train(network, dataset, cfg: TrainConfig, *, val=None,
          callbacks: Sequence[Callable[[HistoryRow], None]] = ()) -> TrainResult:
    """Minibatch Nesterov SGD on ``dataset = (inputs, targets)``.

    Works on a copy; the argument network is left untouched. Batches come from
    a per-epoch permutation drawn from ``cfg.seed``, so two runs with the same
    seed produce identical histories.
    """
    x, y = dataset
    x = np.asarray(x, dtype=network.dtype)
    y = np.asarray(y, dtype=network.dtype)
    if len(x) == 0:
        raise ConfigError("empty training set")
    if x.shape[1:] != network.spec.input_shape:
        raise ShapeError(f"samples have shape {x.shape[1:]}, network expects "
                         f"{network.spec.input_shape}")
    net = network.copy()
    rng = np.random.default_rng(cfg.seed)
    state = OptState.zeros_like(net)
    n = len(x)
    bs = min(cfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    limit = cfg.max_iters
    if cfg.max_epochs is not None:
        by_epochs = cfg.max_epochs * per_epoch
        limit = by_epochs if limit is None else min(limit, by_epochs)
    fc_names = [l.name for l in net.spec.layers if l.kind == "fully_connected"]
    maxnorm_names = list(cfg.maxnorm_layers) if cfg.maxnorm_layers is not None else fc_names
    result = TrainResult(net)
    order = None
    params = dict(net.parameter_blocks())

    for it in range(limit):
        epoch, pos = divmod(it, per_epoch)
        if pos == 0:
            order = rng.permutation(n)
        idx = np.sort(order[pos * bs:(pos + 1) * bs])
        state.epoch = epoch
        lr = lr_at(cfg.schedule, it, epoch)

        # overflow surfaces as a DivergenceError below, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            pred, caches = net.forward(x[idx], train=True, rng=rng)
            loss, g = euclidean_loss(pred, y[idx], len(idx))
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at iteration {it}", iteration=it)
            _, grads = net.backward(caches, g, need_input=False)
            flat = {f"{k}.{part}": getattr(v, part) for k, v in grads.items()
                    for part in ("weights", "bias")}
            sgd_nesterov_step(params, flat, state, cfg, lr)
        if cfg.maxnorm_cap is not None:
            for name in maxnorm_names:
                clipped = apply_maxnorm(net.params[name], cfg.maxnorm_cap)
                net.params[name].weights[...] = clipped.weights

        row = HistoryRow(it, lr, loss)
        if val is not None and ((it + 1) % cfg.val_interval == 0 or it + 1 == limit):
            row.val_loss = dataset_loss(net, np.asarray(val[0], net.dtype),
                                        np.asarray(val[1], net.dtype), bs)
            log.info("iter %d lr %.3g train %.5g val %.5g", it, lr, loss, row.val_loss)
        result.history.append(row)
        for cb in callbacks:
            cb(row)
    return result


def write_history(history, path):
    """Tab-separated ``iteration lr train_loss val_loss`` stream (val empty when absent)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration\tlr\ttrain_loss\tval_loss\n")
        for r in history:
            val = "" if math.isnan(r.val_loss) else repr(r.val_loss)
            fh.write(f"{r.iteration}\t{r.lr!r}\t{r.train_loss!r}\t{val}\n")


def read_history(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            it, lr, tl, vl = line.rstrip("\n").split("\t")
            rows.append(HistoryRow(int(it), float(lr), float(tl),
                                   float(vl) if vl else math.nan))
    return rows
