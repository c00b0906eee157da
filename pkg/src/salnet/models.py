"""Network specs, construction, initialization and resource accounting."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .layers import (LayerParams, LayerSpec, layer_backward, layer_forward,
                     output_shape, param_shapes)

BYTES_PER_VALUE = 4
OUTPUT_KINDS = ("vector_map", "full_resolution")
_SHORT = {"conv": "conv", "deconv": "deconv", "maxpool": "pool", "relu": "relu",
          "fully_connected": "fc", "maxout": "maxout", "dropout": "drop"}


@dataclass
class NetSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    output_kind: str = "vector_map"
    output_side: int | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input shape must be (C, H, W), got {self.input_shape}")
        if self.output_kind not in OUTPUT_KINDS:
            raise ConfigError(f"unknown output kind {self.output_kind!r}")
        if self.output_kind == "vector_map" and not self.output_side:
            raise ConfigError("vector_map output needs output_side")
        counts: dict[str, int] = {}
        named = []
        for layer in self.layers:
            short = _SHORT[layer.kind]
            counts[short] = counts.get(short, 0) + 1
            if layer.name is None:
                layer = replace(layer, name=f"{short}{counts[short]}")
            named.append(layer)
        names = [l.name for l in named]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {self.name}")
        self.layers = named

    def with_input(self, height, width):
        return replace(self, input_shape=(self.input_shape[0], height, width))

    @property
    def weight_layers(self):
        return [l for l in self.layers if l.has_params]


def infer_shapes(spec: NetSpec, input_shape=None):
    """Per-layer output shapes; validates the declared output kind."""
    shape = tuple(input_shape or spec.input_shape)
    shapes = []
    for layer in spec.layers:
        try:
            shape = output_shape(layer, shape)
        except (ConfigError, ShapeError) as exc:
            raise type(exc)(f"{spec.name}/{layer.name}: {exc}") from None
        shapes.append(shape)
    if spec.output_kind == "vector_map":
        if int(np.prod(shape)) != spec.output_side ** 2:
            raise ConfigError(
                f"{spec.name}: final output has {int(np.prod(shape))} values, "
                f"cannot form a {spec.output_side}x{spec.output_side} map")
    elif shape[0] != 1 or len(shape) != 3:
        raise ConfigError(f"{spec.name}: full-resolution output must be 1xHxW, got {shape}")
    return shapes


# ---------------------------------------------------------------- presets

def shallow_spec(variant="salicon", *, depths=None, fc_units=None, input_hw=(96, 96),
                 output_side=None, dropout=None):
    """Three conv/relu/pool stages, FC, pairwise maxout, FC reshaped to a square map.

    ``depths`` and ``fc_units`` override the conv depths and the two FC widths,
    which is how the desk-scale variants are built.
    """
    if variant not in ("salicon", "isun"):
        raise ConfigError(f"unknown shallow variant {variant!r}")
    if depths is None:
        depths = (32, 64, 128 if variant == "salicon" else 64)
    if fc_units is None:
        fc_units = (4608, 2304)
    if output_side is None:
        output_side = int(round(np.sqrt(fc_units[1])))
    layers = []
    for k, d in zip((5, 3, 3), depths):
        layers += [LayerSpec.conv(k, d), LayerSpec.relu(), LayerSpec.maxpool(2, 2)]
    layers.append(LayerSpec.fc(fc_units[0]))
    if dropout:
        layers.append(LayerSpec.dropout(dropout))
    layers += [LayerSpec.maxout(2), LayerSpec.fc(fc_units[1])]
    name = f"shallow-{variant}"
    spec = NetSpec(name, (3,) + tuple(input_hw), layers, "vector_map", output_side)
    infer_shapes(spec)
    return spec


def shallow_small_spec():
    """Channel-shrunken shallow net (8/16/32, FC 1152/576, 24x24 map) for desk runs."""
    spec = shallow_spec("salicon", depths=(8, 16, 32), fc_units=(1152, 576))
    spec.name = "shallow-small"
    return spec


def deep_spec(input_hw=(240, 320)):
    """Ten weight layers: nine convolutions and a final stride-4 deconvolution."""
    c, r, p = LayerSpec.conv, LayerSpec.relu, LayerSpec.maxpool
    layers = [
        c(7, 96, pad=3), r(), p(2, 2),
        c(5, 256, pad=2), r(), p(2, 2),
        c(3, 512, pad=1), r(),
        c(5, 512, pad=2), r(),
        c(5, 512, pad=2), r(),
        c(7, 256, pad=3), r(),
        c(11, 128, pad=5), r(),
        c(11, 32, pad=5), r(),
        c(13, 1, pad=6),
        LayerSpec.deconv(8, 1, stride=4, pad=2),
    ]
    spec = NetSpec("deep", (3,) + tuple(input_hw), layers, "full_resolution")
    infer_shapes(spec)
    return spec


PRESETS = {
    "shallow-salicon": lambda: shallow_spec("salicon"),
    "shallow-isun": lambda: shallow_spec("isun"),
    "shallow-small": shallow_small_spec,
    "deep": deep_spec,
}


def preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(
            f"unknown spec preset {name!r}; choose from {', '.join(PRESETS)}") from None


# ---------------------------------------------------------------- accounting

@dataclass
class ParamCount:
    per_layer: list[tuple[str, int]]

    @property
    def total(self):
        return sum(n for _, n in self.per_layer)


def count_parameters(spec: NetSpec) -> ParamCount:
    rows = []
    shape = spec.input_shape
    for layer, out in zip(spec.layers, infer_shapes(spec)):
        shapes = param_shapes(layer, shape)
        if shapes is not None:
            rows.append((layer.name, int(np.prod(shapes[0])) + int(np.prod(shapes[1]))))
        shape = out
    return ParamCount(rows)


@dataclass
class BlobRow:
    label: str
    shape: tuple
    values: int
    params: int


def _blob_label(layer: LayerSpec, shape):
    if layer.kind in ("conv", "deconv"):
        return f"{layer.kind}{layer.kernel[0]}-{layer.out_channels}"
    if layer.kind == "maxpool":
        return f"maxpool{layer.kernel[0]}"
    if layer.kind == "fully_connected":
        return f"FC-{layer.out_units}"
    return layer.kind


def blob_table(spec: NetSpec, input_shape=None) -> list[BlobRow]:
    """One row per stored blob, in the layout of a per-layer memory table.

    ReLU and dropout run in place and add no blob. A maxout with k pieces
    stores its k slices and the max. A vector output gains a final reshaped
    ``output`` row.
    """
    shape = tuple(input_shape or spec.input_shape)
    rows = [BlobRow("input", shape, int(np.prod(shape)), 0)]
    counts = dict(count_parameters(spec if input_shape is None
                                   else spec.with_input(*shape[1:])).per_layer)
    for layer, out in zip(spec.layers, infer_shapes(spec, shape)):
        if layer.kind in ("relu", "dropout"):
            continue
        if layer.kind == "maxout":
            piece = (shape[0] // layer.pieces,) + tuple(shape[1:])
            for j in range(layer.pieces):
                rows.append(BlobRow(f"slice{j + 1}", piece, int(np.prod(piece)), 0))
        rows.append(BlobRow(_blob_label(layer, out), out, int(np.prod(out)),
                            counts.get(layer.name, 0)))
        shape = out
    if spec.output_kind == "vector_map":
        side = spec.output_side
        rows.append(BlobRow("output", (1, side, side), side * side, 0))
    return rows


@dataclass
class MemoryEstimate:
    blob_values: int
    param_values: int

    @property
    def blob_bytes_test(self):
        return BYTES_PER_VALUE * self.blob_values

    @property
    def blob_bytes_train(self):
        # backprop keeps one error signal per stored value
        return 2 * self.blob_bytes_test

    @property
    def param_bytes(self):
        return BYTES_PER_VALUE * self.param_values

    @property
    def total_train_bytes(self):
        return self.blob_bytes_train + self.param_bytes

    @property
    def total_test_bytes(self):
        return self.blob_bytes_test + self.param_bytes


def estimate_memory(spec: NetSpec, input_shape=None) -> MemoryEstimate:
    rows = blob_table(spec, input_shape)
    params = count_parameters(spec if input_shape is None
                              else spec.with_input(*tuple(input_shape)[1:])).total
    return MemoryEstimate(sum(r.values for r in rows), params)


def mib(n_bytes):
    return n_bytes / 2 ** 20


# ---------------------------------------------------------------- network

class Network:
    """A spec plus one ``LayerParams`` per weight layer, keyed by layer name."""

    def __init__(self, spec: NetSpec, params=None, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.shapes = infer_shapes(spec)
        expected = {}
        shape = spec.input_shape
        for layer, out in zip(spec.layers, self.shapes):
            if layer.has_params:
                expected[layer.name] = param_shapes(layer, shape)
            shape = out
        self._expected = expected
        if params is None:
            params = {name: LayerParams(np.zeros(w, self.dtype), np.zeros(b, self.dtype))
                      for name, (w, b) in expected.items()}
        self.params = {}
        for name, (w, b) in expected.items():
            if name not in params:
                raise FormatError(f"missing parameters for layer {name}")
            p = params[name]
            if p.weights.shape != w or p.bias.shape != b:
                raise ShapeError(
                    f"layer {name}: parameters {p.weights.shape}/{p.bias.shape}, "
                    f"spec needs {w}/{b}")
            self.params[name] = p.astype(self.dtype)

    def copy(self):
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()}, self.dtype)

    def astype(self, dtype):
        return Network(self.spec, self.params, dtype)

    def parameter_blocks(self):
        for name, p in self.params.items():
            yield f"{name}.weights", p.weights
            yield f"{name}.bias", p.bias

    def parameter_arrays(self):
        return [a for _, a in self.parameter_blocks()]

    def forward(self, x, *, train=False, rng=None):
        """Batched forward; returns ``(maps (N,1,h,w), caches)``."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != self.spec.input_shape and self.spec.output_kind == "vector_map":
            raise ShapeError(
                f"{self.spec.name} expects input {self.spec.input_shape}, got {x.shape[1:]}")
        if x.shape[1] != self.spec.input_shape[0]:
            raise ShapeError(f"{self.spec.name} expects {self.spec.input_shape[0]} channels, "
                             f"got {x.shape[1]}")
        caches = []
        for layer in self.spec.layers:
            x, cache = layer_forward(layer, self.params.get(layer.name), x, rng=rng, train=train)
            caches.append(cache)
        if self.spec.output_kind == "vector_map":
            side = self.spec.output_side
            x = x.reshape(x.shape[0], 1, side, side)
        return x, caches

    def backward(self, caches, grad_out, need_input=True):
        """Backpropagate ``grad_out`` (shape of the forward output); returns
        ``(grad_input, {layer_name: LayerParams of gradients})``."""
        g = np.asarray(grad_out)
        if self.spec.output_kind == "vector_map":
            g = g.reshape(caches[-1].output_shape)
        grads = {}
        last = len(caches) - 1
        for i, (layer, cache) in enumerate(zip(reversed(self.spec.layers), reversed(caches))):
            g, gp = layer_backward(layer, self.params.get(layer.name), cache, g,
                                   need_input=need_input or i < last)
            if gp is not None:
                grads[layer.name] = gp
        return g, grads

    def __call__(self, x):
        return self.forward(x)[0]


# ---------------------------------------------------------------- initialization

@dataclass(frozen=True)
class GaussianInit:
    std: float = 0.01
    bias: float = 0.1


@dataclass(frozen=True)
class HeInit:
    pass


def fan_in(layer: LayerSpec, weights_shape):
    if layer.kind == "fully_connected":
        return weights_shape[1]
    # deconv weights are (C_in, C_out, kH, kW); each output sums over C_out*kH*kW terms
    return int(np.prod(weights_shape[1:]))


def init_weights(network: Network, scheme=GaussianInit(), rng=None) -> Network:
    """Return a copy of ``network`` with freshly drawn parameters.

    Layers are visited in spec order so a given seed always yields the same values.
    """
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    params = {}
    for layer in network.spec.weight_layers:
        w_shape = network.params[layer.name].weights.shape
        b_shape = network.params[layer.name].bias.shape
        if isinstance(scheme, GaussianInit):
            w = rng.normal(0.0, scheme.std, w_shape)
            b = np.full(b_shape, scheme.bias)
        elif isinstance(scheme, HeInit):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in(layer, w_shape)), w_shape)
            b = np.zeros(b_shape)
        else:
            raise ConfigError(f"unknown init scheme {scheme!r}")
        params[layer.name] = LayerParams(w, b)
    return Network(network.spec, params, network.dtype)


def build(spec: NetSpec, scheme=None, seed=0, dtype=np.float32) -> Network:
    if scheme is None:
        scheme = GaussianInit() if spec.output_kind == "vector_map" else HeInit()
    return init_weights(Network(spec, dtype=dtype), scheme, np.random.default_rng(seed))
