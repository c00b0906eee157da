"""Spec text files, the binary model format, and external weight import.

Model file layout (all integers little-endian)::

    b"SALNET01"                 8-byte magic
    u32 version                 currently 1
    u32 n, n bytes              spec in canonical text form (UTF-8)
    u32 n, n bytes              metadata as canonical JSON (UTF-8)
    u32 block count
    per block:
        u16 n, n bytes          block name, e.g. "conv1.weights"
        u8 ndim, ndim x u32     shape
        u32 crc32               of the payload bytes
        payload                 float32 little-endian, row-major
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .layers import LayerParams, LayerSpec
from .models import Network, NetSpec, infer_shapes

MAGIC = b"SALNET01"
VERSION = 1
_F32 = np.dtype("<f4")


# ---------------------------------------------------------------- spec text

def format_spec(spec: NetSpec) -> str:
    """Canonical text: header lines, then one layer per line."""
    lines = [f"name {spec.name}", "input " + " ".join(str(v) for v in spec.input_shape)]
    if spec.output_kind == "vector_map":
        lines.append(f"output vector_map {spec.output_side}")
    else:
        lines.append("output full_resolution")
    for layer in spec.layers:
        parts = [layer.kind]
        if layer.kernel is not None:
            parts.append(f"kernel={layer.kernel[0]}x{layer.kernel[1]}")
        if layer.stride is not None:
            parts.append(f"stride={layer.stride}")
        if layer.pad is not None:
            parts.append(f"pad={layer.pad}")
        if layer.out_channels is not None:
            parts.append(f"channels={layer.out_channels}")
        if layer.out_units is not None:
            parts.append(f"units={layer.out_units}")
        if layer.pieces is not None:
            parts.append(f"pieces={layer.pieces}")
        if layer.ratio is not None:
            parts.append(f"ratio={layer.ratio!r}")
        parts.append(f"name={layer.name}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


_KEYS = {"kernel": "kernel", "stride": "stride", "pad": "pad", "channels": "out_channels",
         "units": "out_units", "pieces": "pieces", "ratio": "ratio", "name": "name"}


def parse_spec(text: str) -> NetSpec:
    name, input_shape, kind, side = None, None, None, None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        try:
            if head == "name":
                name = rest[0]
            elif head == "input":
                input_shape = tuple(int(v) for v in rest)
            elif head == "output":
                kind = rest[0]
                side = int(rest[1]) if kind == "vector_map" else None
            else:
                kw = {}
                for tok in rest:
                    key, _, val = tok.partition("=")
                    if key not in _KEYS:
                        raise ConfigError(f"unknown key {key!r}")
                    if key == "kernel":
                        kw["kernel"] = tuple(int(v) for v in val.lower().split("x"))
                    elif key == "ratio":
                        kw["ratio"] = float(val)
                    elif key == "name":
                        kw["name"] = val
                    else:
                        kw[_KEYS[key]] = int(val)
                layers.append(LayerSpec(head, **kw))
        except (ValueError, IndexError, ConfigError) as exc:
            raise ConfigError(f"spec line {lineno} ({raw.strip()!r}): {exc}") from None
    if name is None or input_shape is None or kind is None:
        raise ConfigError("spec needs name, input and output lines")
    spec = NetSpec(name, input_shape, layers, kind, side)
    infer_shapes(spec)
    return spec


def load_spec_file(path) -> NetSpec:
    return parse_spec(Path(path).read_text(encoding="utf-8"))


def shipped_spec_path(name):
    return Path(__file__).with_name("specs") / f"{name}.spec"


# ---------------------------------------------------------------- model files

def _pack_str(b: bytes, fmt="<I"):
    return struct.pack(fmt, len(b)) + b


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated model file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_model(network: Network, path, metadata=None):
    """Write ``network`` (parameters stored as float32) to ``path``."""
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION),
             _pack_str(format_spec(network.spec).encode()), _pack_str(meta)]
    blocks = list(network.parameter_blocks())
    parts.append(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        payload = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        parts.append(_pack_str(name.encode(), "<H"))
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<I", zlib.crc32(payload)))
        parts.append(payload)
    Path(path).write_bytes(b"".join(parts))


def read_blocks(path):
    """Return ``(spec, metadata, {block_name: float32 array})`` from a model file."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(8) != MAGIC:
        raise FormatError(f"{path}: not a salnet model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    (n,) = r.unpack("<I")
    spec = parse_spec(r.take(n).decode())
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode())
    (count,) = r.unpack("<I")
    blocks = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (crc,) = r.unpack("<I")
        payload = r.take(int(np.prod(shape)) * 4)
        if zlib.crc32(payload) != crc:
            raise FormatError(f"{path}: checksum mismatch in block {name}")
        blocks[name] = np.frombuffer(payload, dtype=_F32).reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after last block")
    return spec, meta, blocks


def load_model(path, with_metadata=False):
    spec, meta, blocks = read_blocks(path)
    params = {}
    for layer in spec.weight_layers:
        try:
            params[layer.name] = LayerParams(blocks[f"{layer.name}.weights"],
                                             blocks[f"{layer.name}.bias"])
        except KeyError:
            raise FormatError(f"{path}: no parameters stored for layer {layer.name}") from None
    net = Network(spec, params, np.float32)
    return (net, meta) if with_metadata else net


# ---------------------------------------------------------------- transfer import

def _donor_blocks(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == MAGIC:
        return read_blocks(path)[2]
    try:
        with np.load(path, allow_pickle=False) as npz:
            return {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: neither a salnet model nor an .npz weight archive ({exc})") from None


def export_weights(network: Network, path, layers=None):
    """Write ``<layer>.weights`` / ``<layer>.bias`` arrays to an .npz donor archive."""
    arrays = {name: arr for name, arr in network.parameter_blocks()
              if layers is None or name.split(".")[0] in layers}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def import_external_weights(network: Network, path, layer_map) -> Network:
    """Copy donor layers into ``network``.

    ``layer_map`` maps target layer names to donor layer names; the donor is a
    salnet model file or an .npz archive holding ``<donor>.weights`` and
    ``<donor>.bias``. Unmapped layers keep their values. Returns a new network.
    """
    out = network.copy()
    if not layer_map:
        return out
    donor = _donor_blocks(path)
    for target, source in layer_map.items():
        if target not in out.params:
            raise ConfigError(f"network has no weight layer {target!r}")
        for part in ("weights", "bias"):
            key = f"{source}.{part}"
            if key not in donor:
                raise FormatError(f"{path}: donor has no block {key}")
            src = np.asarray(donor[key])
            dst = getattr(out.params[target], part)
            if src.shape != dst.shape:
                raise ShapeError(f"layer {target} {part}: donor {source} has shape {src.shape}, "
                                 f"target needs {dst.shape}")
            dst[...] = src
    return out
