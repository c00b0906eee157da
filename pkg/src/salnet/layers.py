"""Forward/backward kernels for the fixed layer zoo.

Tensors are plain numpy arrays. Spatial layers take ``(C, H, W)`` or a batch
``(N, C, H, W)``; vector layers take ``(D,)`` or ``(N, ...)``, in which case
axis 0 is the batch. Every forward returns ``(output, cache)`` and the cache
is the only state a backward call needs, so a network's parameters are never
mutated by a pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from .errors import ConfigError, ShapeError

KINDS = ("conv", "deconv", "maxpool", "relu", "fully_connected", "maxout", "dropout")
PARAMETRIC = ("conv", "deconv", "fully_connected")

# fields each kind may carry; everything else must stay None
_ALLOWED = {
    "conv": {"kernel", "stride", "pad", "out_channels"},
    "deconv": {"kernel", "stride", "pad", "out_channels"},
    "maxpool": {"kernel", "stride"},
    "relu": set(),
    "fully_connected": {"out_units"},
    "maxout": {"pieces"},
    "dropout": {"ratio"},
}
_REQUIRED = {
    "conv": {"kernel", "out_channels"},
    "deconv": {"kernel", "out_channels"},
    "maxpool": {"kernel"},
    "fully_connected": {"out_units"},
    "maxout": {"pieces"},
    "dropout": {"ratio"},
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: tuple[int, int] | None = None
    stride: int | None = None
    pad: int | None = None
    out_channels: int | None = None
    out_units: int | None = None
    pieces: int | None = None
    ratio: float | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        allowed = _ALLOWED[self.kind] | {"kind", "name"}
        for f in fields(self):
            if f.name not in allowed and getattr(self, f.name) is not None:
                raise ConfigError(f"{self.kind} layer does not take {f.name}")
        for req in _REQUIRED.get(self.kind, ()):
            if getattr(self, req) is None:
                raise ConfigError(f"{self.kind} layer requires {req}")
        if self.kernel is not None:
            k = tuple(int(v) for v in self.kernel)
            if len(k) != 2 or min(k) < 1:
                raise ConfigError(f"kernel must be two positive extents, got {self.kernel}")
            object.__setattr__(self, "kernel", k)
        if self.kind in ("conv", "deconv"):
            object.__setattr__(self, "stride", 1 if self.stride is None else int(self.stride))
            object.__setattr__(self, "pad", 0 if self.pad is None else int(self.pad))
        if self.kind == "maxpool" and self.stride is None:
            object.__setattr__(self, "stride", self.kernel[0])
        if self.stride is not None and self.stride < 1:
            raise ConfigError("stride must be positive")
        if self.pad is not None and self.pad < 0:
            raise ConfigError("pad must be non-negative")
        for attr in ("out_channels", "out_units"):
            v = getattr(self, attr)
            if v is not None and v < 1:
                raise ConfigError(f"{attr} must be positive")
        if self.pieces is not None and self.pieces < 2:
            raise ConfigError("maxout needs at least 2 pieces")
        if self.ratio is not None and not 0.0 <= self.ratio <= 1.0:
            raise ConfigError("dropout ratio must lie in [0, 1]")

    # convenience constructors
    @classmethod
    def conv(cls, kernel, out_channels, stride=1, pad=0, name=None):
        return cls("conv", kernel=_pair(kernel), stride=stride, pad=pad,
                   out_channels=out_channels, name=name)

    @classmethod
    def deconv(cls, kernel, out_channels, stride=1, pad=0, name=None):
        return cls("deconv", kernel=_pair(kernel), stride=stride, pad=pad,
                   out_channels=out_channels, name=name)

    @classmethod
    def maxpool(cls, kernel=2, stride=None, name=None):
        return cls("maxpool", kernel=_pair(kernel), stride=stride, name=name)

    @classmethod
    def relu(cls, name=None):
        return cls("relu", name=name)

    @classmethod
    def fc(cls, out_units, name=None):
        return cls("fully_connected", out_units=out_units, name=name)

    @classmethod
    def maxout(cls, pieces=2, name=None):
        return cls("maxout", pieces=pieces, name=name)

    @classmethod
    def dropout(cls, ratio=0.5, name=None):
        return cls("dropout", ratio=ratio, name=name)

    @property
    def has_params(self):
        return self.kind in PARAMETRIC


def _pair(k):
    return (k, k) if np.isscalar(k) else tuple(k)


@dataclass
class LayerParams:
    """Weights and bias of one parameterized layer.

    conv: weights ``(C_out, C_in, kH, kW)``; deconv: ``(C_in, C_out, kH, kW)``
    (the same array a convolution in the opposite direction would use);
    fully connected: ``(out, in)``. Bias has one entry per output channel/unit.
    """

    weights: np.ndarray
    bias: np.ndarray

    def copy(self):
        return LayerParams(self.weights.copy(), self.bias.copy())

    def astype(self, dtype):
        return LayerParams(self.weights.astype(dtype), self.bias.astype(dtype))


@dataclass
class LayerCache:
    kind: str
    input_shape: tuple
    output_shape: tuple
    batched: bool
    values: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------- shape algebra

def conv_extent(n, k, stride, pad, what="extent"):
    span = n + 2 * pad - k
    if span < 0:
        raise ConfigError(f"kernel {k} larger than padded {what} {n + 2 * pad}")
    if span % stride:
        raise ConfigError(
            f"{what} {n} with kernel {k}, stride {stride}, pad {pad} "
            f"gives a non-integer output extent")
    return span // stride + 1


def deconv_extent(n, k, stride, pad):
    out = stride * (n - 1) + k - 2 * pad
    if out < 1:
        raise ConfigError(f"deconvolution output extent {out} is not positive")
    return out


def output_shape(spec: LayerSpec, in_shape, params_in=None):
    """Per-sample output shape of ``spec`` for per-sample input ``in_shape``."""
    in_shape = tuple(int(v) for v in in_shape)
    kind = spec.kind
    if kind in ("conv", "deconv", "maxpool"):
        if len(in_shape) != 3:
            raise ShapeError(f"{kind} expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        kh, kw = spec.kernel
        if kind == "conv":
            return (spec.out_channels,
                    conv_extent(h, kh, spec.stride, spec.pad, "height"),
                    conv_extent(w, kw, spec.stride, spec.pad, "width"))
        if kind == "deconv":
            return (spec.out_channels,
                    deconv_extent(h, kh, spec.stride, spec.pad),
                    deconv_extent(w, kw, spec.stride, spec.pad))
        if kh > h or kw > w:
            raise ConfigError(f"pooling window {spec.kernel} larger than input {h}x{w}")
        return (c, conv_extent(h, kh, spec.stride, 0, "height"),
                conv_extent(w, kw, spec.stride, 0, "width"))
    if kind == "fully_connected":
        return (spec.out_units,)
    if kind == "maxout":
        if in_shape[0] % spec.pieces:
            raise ConfigError(
                f"maxout: {in_shape[0]} channels/units not divisible by {spec.pieces} pieces")
        return (in_shape[0] // spec.pieces,) + in_shape[1:]
    return in_shape


def param_shapes(spec: LayerSpec, in_shape):
    """``(weights_shape, bias_shape)`` for a parameterized layer, else None."""
    if spec.kind == "conv":
        return (spec.out_channels, in_shape[0]) + spec.kernel, (spec.out_channels,)
    if spec.kind == "deconv":
        return (in_shape[0], spec.out_channels) + spec.kernel, (spec.out_channels,)
    if spec.kind == "fully_connected":
        return (spec.out_units, int(np.prod(in_shape))), (spec.out_units,)
    return None


# ---------------------------------------------------------------- helpers

def _as_batch(x, spatial):
    x = np.asarray(x)
    if spatial:
        if x.ndim == 3:
            return x[None], False
        if x.ndim == 4:
            return x, True
        raise ShapeError(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")
    if x.ndim == 1:
        return x[None], False
    return x, True


def _unbatch(y, batched):
    return y if batched else y[0]


def _check_grad(cache: LayerCache, kind, grad_out):
    grad_out = np.asarray(grad_out)
    if cache.kind != kind:
        raise ShapeError(f"cache from a {cache.kind} layer passed to {kind} backward")
    if grad_out.shape != cache.output_shape:
        raise ShapeError(
            f"{kind} backward: grad_out shape {grad_out.shape} != forward output "
            f"shape {cache.output_shape}")
    return grad_out if cache.batched else grad_out[None]


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _strided(a, dy, dx, stride, oh, ow):
    return a[:, :, dy:dy + stride * (oh - 1) + 1:stride, dx:dx + stride * (ow - 1) + 1:stride]


# im2col is one big GEMM but materializes N*Ho*Wo*C*kH*kW values; above this
# budget the per-offset loop keeps memory at the size of the output instead
IM2COL_BUDGET = 1 << 25


def _im2col(xp, kh, kw, stride, oh, ow):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]        # n, c, oh, ow, kh, kw
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def _fits(n, c, oh, ow, kh, kw):
    return n * c * oh * ow * kh * kw <= IM2COL_BUDGET


def _correlate(xp, w, stride, oh, ow):
    """y[n,o,i,j] = sum_{c,dy,dx} xp[n,c,i*s+dy,j*s+dx] * w[o,c,dy,dx]."""
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    if _fits(n, c, oh, ow, kh, kw):
        y = _im2col(xp, kh, kw, stride, oh, ow) @ w.reshape(o, -1).T
        return np.ascontiguousarray(y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    acc = np.zeros((n, oh, ow, o), dtype=np.result_type(xp, w))
    for dy in range(kh):
        for dx in range(kw):
            acc += np.tensordot(_strided(xp, dy, dx, stride, oh, ow), w[:, :, dy, dx],
                                axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def _correlate_adjoint(g, w, stride, full_h, full_w):
    """Adjoint of ``_correlate`` with respect to its input: scatter g through w."""
    n, o, oh, ow = g.shape
    _, c, kh, kw = w.shape
    out = np.zeros((n, c, full_h, full_w), dtype=np.result_type(g, w))
    if _fits(n, c, oh, ow, kh, kw):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        cols = (gmat @ w.reshape(o, -1)).reshape(n, oh, ow, c, kh, kw)
        cols = cols.transpose(0, 3, 4, 5, 1, 2)                  # n, c, kh, kw, oh, ow
        for dy in range(kh):
            for dx in range(kw):
                _strided(out, dy, dx, stride, oh, ow)[...] += cols[:, :, dy, dx]
        return out
    for dy in range(kh):
        for dx in range(kw):
            part = np.tensordot(g, w[:, :, dy, dx], axes=([1], [0]))  # n, oh, ow, c
            _strided(out, dy, dx, stride, oh, ow)[...] += part.transpose(0, 3, 1, 2)
    return out


def _correlate_wgrad(xp, g, stride, kh, kw):
    """dL/dw for ``_correlate``: gw[o,c,dy,dx] = sum g[n,o,i,j] xp[n,c,i*s+dy,j*s+dx]."""
    n, o, oh, ow = g.shape
    c = xp.shape[1]
    if _fits(n, c, oh, ow, kh, kw):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        return (gmat.T @ _im2col(xp, kh, kw, stride, oh, ow)).reshape(o, c, kh, kw)
    gw = np.zeros((o, c, kh, kw), dtype=np.result_type(xp, g))
    for dy in range(kh):
        for dx in range(kw):
            gw[:, :, dy, dx] = np.tensordot(g, _strided(xp, dy, dx, stride, oh, ow),
                                            axes=([0, 2, 3], [0, 2, 3]))
    return gw


def _check_params(spec, params, in_shape):
    if params is None:
        raise ConfigError(f"{spec.kind} layer needs parameters")
    wshape, bshape = param_shapes(spec, in_shape)
    if params.weights.shape != wshape:
        raise ShapeError(
            f"{spec.kind} weights have shape {params.weights.shape}, input {in_shape} "
            f"needs {wshape} (dimension 1 = input depth)")
    if params.bias.shape != bshape:
        raise ShapeError(f"{spec.kind} bias has shape {params.bias.shape}, expected {bshape}")


# ---------------------------------------------------------------- forward ops

def conv2d_forward(x, params: LayerParams, spec: LayerSpec):
    xb, batched = _as_batch(x, spatial=True)
    if spec.kind != "conv":
        raise ConfigError(f"conv2d_forward got a {spec.kind} spec")
    _check_params(spec, params, xb.shape[1:])
    _, oh, ow = output_shape(spec, xb.shape[1:])
    xp = _pad(xb, spec.pad)
    y = _correlate(xp, params.weights, spec.stride, oh, ow)
    y += params.bias[None, :, None, None]
    y = _unbatch(y, batched)
    return y, LayerCache("conv", np.shape(x), y.shape, batched, {"input": xb})


def deconv2d_forward(x, params: LayerParams, spec: LayerSpec):
    xb, batched = _as_batch(x, spatial=True)
    if spec.kind != "deconv":
        raise ConfigError(f"deconv2d_forward got a {spec.kind} spec")
    _check_params(spec, params, xb.shape[1:])
    _, oh, ow = output_shape(spec, xb.shape[1:])
    kh, kw = spec.kernel
    s, p = spec.stride, spec.pad
    full = _correlate_adjoint(xb, params.weights, s,
                              s * (xb.shape[2] - 1) + kh, s * (xb.shape[3] - 1) + kw)
    y = np.ascontiguousarray(full[:, :, p:p + oh, p:p + ow])
    y += params.bias[None, :, None, None]
    y = _unbatch(y, batched)
    return y, LayerCache("deconv", np.shape(x), y.shape, batched, {"input": xb})


def maxpool_forward(x, spec: LayerSpec):
    xb, batched = _as_batch(x, spatial=True)
    _, oh, ow = output_shape(spec, xb.shape[1:])
    kh, kw = spec.kernel
    s = spec.stride
    win = np.lib.stride_tricks.sliding_window_view(xb, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s][:, :, :oh, :ow].reshape(xb.shape[:2] + (oh, ow, kh * kw))
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    y = _unbatch(np.ascontiguousarray(y), batched)
    return y, LayerCache("maxpool", np.shape(x), y.shape, batched,
                         {"argmax": arg, "input_shape": xb.shape})


def relu_forward(x):
    x = np.asarray(x)
    return np.maximum(x, 0), LayerCache("relu", x.shape, x.shape, True, {"input": x})


def fully_connected_forward(x, params: LayerParams):
    xb, batched = _as_batch(x, spatial=False)
    flat = xb.reshape(xb.shape[0], -1)
    if params.weights.shape[1] != flat.shape[1]:
        raise ShapeError(
            f"fully_connected: input has {flat.shape[1]} values per sample, "
            f"weights expect {params.weights.shape[1]}")
    y = flat @ params.weights.T + params.bias
    y = _unbatch(y, batched)
    return y, LayerCache("fully_connected", np.shape(x), y.shape, batched,
                         {"input": flat, "input_shape": xb.shape})


def maxout_forward(x, spec: LayerSpec):
    xb, batched = _as_batch(x, spatial=False)
    output_shape(spec, xb.shape[1:])
    k = spec.pieces
    # contiguous groups: piece j covers channels [j*D/k, (j+1)*D/k)
    grouped = xb.reshape((xb.shape[0], k, xb.shape[1] // k) + xb.shape[2:])
    arg = grouped.argmax(axis=1)
    y = np.take_along_axis(grouped, arg[:, None], axis=1)[:, 0]
    y = _unbatch(y, batched)
    return y, LayerCache("maxout", np.shape(x), y.shape, batched,
                         {"argmax": arg, "grouped_shape": grouped.shape})


def dropout_forward(x, spec: LayerSpec, rng=None, train_mode=False):
    x = np.asarray(x)
    r = spec.ratio
    if not train_mode or r == 0.0:
        return x.copy(), LayerCache("dropout", x.shape, x.shape, True, {"mask": None})
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    if r == 1.0:
        mask = np.zeros(x.shape, dtype=x.dtype)
    else:
        mask = (rng.random(x.shape) >= r).astype(x.dtype) / x.dtype.type(1.0 - r)
    return x * mask, LayerCache("dropout", x.shape, x.shape, True, {"mask": mask})


def layer_forward(spec: LayerSpec, params, x, *, rng=None, train=False):
    kind = spec.kind
    if kind == "conv":
        return conv2d_forward(x, params, spec)
    if kind == "deconv":
        return deconv2d_forward(x, params, spec)
    if kind == "maxpool":
        return maxpool_forward(x, spec)
    if kind == "relu":
        return relu_forward(x)
    if kind == "fully_connected":
        return fully_connected_forward(x, params)
    if kind == "maxout":
        return maxout_forward(x, spec)
    return dropout_forward(x, spec, rng, train)


# ---------------------------------------------------------------- backward

def layer_backward(spec: LayerSpec, params, cache: LayerCache, grad_out, need_input=True):
    """Return ``(grad_in, grad_params)``; grad_params is None for parameter-free layers.

    ``need_input=False`` lets a network's first layer skip the input gradient
    (grad_in is then None).
    """
    kind = spec.kind
    g = _check_grad(cache, kind, grad_out)

    if kind == "conv":
        xb = cache.values["input"]
        kh, kw = spec.kernel
        s, p = spec.stride, spec.pad
        xp = _pad(xb, p)
        gw = _correlate_wgrad(xp, g, s, kh, kw)
        gb = g.sum(axis=(0, 2, 3))
        if not need_input:
            return None, LayerParams(gw, gb)
        gxp = _correlate_adjoint(g, params.weights, s, xp.shape[2], xp.shape[3])
        gx = gxp[:, :, p:p + xb.shape[2], p:p + xb.shape[3]]
        return _unbatch(np.ascontiguousarray(gx), cache.batched), LayerParams(gw, gb)

    if kind == "deconv":
        xb = cache.values["input"]
        kh, kw = spec.kernel
        s, p = spec.stride, spec.pad
        # re-embed the cropped gradient into the uncropped output frame
        full_h = s * (xb.shape[2] - 1) + kh
        full_w = s * (xb.shape[3] - 1) + kw
        gfull = np.zeros((g.shape[0], g.shape[1], full_h, full_w), dtype=g.dtype)
        gfull[:, :, p:p + g.shape[2], p:p + g.shape[3]] = g
        gx = _correlate(gfull, params.weights, s, xb.shape[2], xb.shape[3])
        gw = _correlate_wgrad(gfull, xb, s, kh, kw)
        gb = g.sum(axis=(0, 2, 3))
        return _unbatch(gx, cache.batched), LayerParams(gw, gb)

    if kind == "maxpool":
        arg = cache.values["argmax"]
        n, c, h, w = cache.values["input_shape"]
        kh, kw = spec.kernel
        s = spec.stride
        oh, ow = arg.shape[2:]
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        for dy in range(kh):
            for dx in range(kw):
                hit = arg == dy * kw + dx
                _strided(gx, dy, dx, s, oh, ow)[...] += np.where(hit, g, 0)
        return _unbatch(gx, cache.batched), None

    if kind == "relu":
        return g * (cache.values["input"] > 0), None

    if kind == "fully_connected":
        flat = cache.values["input"]
        gw = g.T @ flat
        gb = g.sum(axis=0)
        gx = (g @ params.weights).reshape(cache.values["input_shape"])
        return _unbatch(gx, cache.batched), LayerParams(gw, gb)

    if kind == "maxout":
        arg = cache.values["argmax"]
        gx = np.zeros(cache.values["grouped_shape"], dtype=g.dtype)
        np.put_along_axis(gx, arg[:, None], g[:, None], axis=1)
        gx = gx.reshape((gx.shape[0], -1) + gx.shape[3:])
        return _unbatch(gx, cache.batched), None

    mask = cache.values["mask"]
    return (g.copy() if mask is None else g * mask), None
