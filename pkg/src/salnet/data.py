"""Dataset I/O, preprocessing, mirroring, splitting and the synthetic blob corpus."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".bmp", ".jpg", ".jpeg")
RAW_RANGE = (0.0, 255.0)


@dataclass
class SaliencyMap:
    """2-D map with a declared closed value range."""

    values: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 3 and self.values.shape[0] == 1:
            self.values = self.values[0]
        if self.values.ndim != 2:
            raise ConfigError(f"saliency map must be 2-D, got {self.values.shape}")
        lo, hi = self.value_range
        if self.values.size and (self.values.min() < lo - 1e-9 or self.values.max() > hi + 1e-9):
            raise ConfigError(f"map values leave declared range {self.value_range}")

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class Sample:
    id: str
    image: np.ndarray                       # (3, H, W) float, raw 8-bit values
    gt_map: np.ndarray | None = None        # (H, W) in [0, 1]
    fixations: np.ndarray | None = None     # (K, 2) integer (x, y)
    image_range: tuple[float, float] = RAW_RANGE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"{self.id}: image must be (3, H, W), got {self.image.shape}")
        h, w = self.image.shape[1:]
        if self.gt_map is not None:
            self.gt_map = np.asarray(self.gt_map, dtype=np.float64)
            if self.gt_map.shape != (h, w):
                raise DataError(f"{self.id}: map extents {self.gt_map.shape} differ from "
                                f"image extents {(h, w)}")
        if self.fixations is not None:
            self.fixations = np.asarray(self.fixations, dtype=np.int64).reshape(-1, 2)
            xs, ys = self.fixations[:, 0], self.fixations[:, 1]
            if np.any((xs < 0) | (xs >= w) | (ys < 0) | (ys >= h)):
                raise DataError(f"{self.id}: fixation outside the {w}x{h} image")

    @property
    def hw(self):
        return self.image.shape[1:]


# ---------------------------------------------------------------- resizing

def _axis_weights(n_in, n_out):
    # half-pixel centres, clamped at the borders
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(a, size):
    """Bilinear resize of the last two axes of ``a`` to ``size = (h, w)``."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[-2:]
    oh, ow = size
    if (h, w) == (oh, ow):
        return a.copy()
    y0, y1, fy = _axis_weights(h, oh)
    x0, x1, fx = _axis_weights(w, ow)
    rows = a[..., y0, :] * (1 - fy)[:, None] + a[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx


def minmax_normalize(a, eps=1e-12):
    """Scale to [0, 1]; a (near-)constant input maps to all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo < eps:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


# ---------------------------------------------------------------- preprocessing

@dataclass
class PreprocessStats:
    pixel_mean: tuple[float, float, float]
    map_mean: float = 0.5

    def to_dict(self):
        return {"pixel_mean": list(self.pixel_mean), "map_mean": self.map_mean}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(v) for v in d["pixel_mean"]), float(d.get("map_mean", 0.5)))


def compute_stats(samples) -> PreprocessStats:
    """Per-channel mean pixel and scalar mean map value over ``samples``."""
    total = np.zeros(3)
    count = 0
    msum, mcount = 0.0, 0
    for s in samples:
        total += s.image.reshape(3, -1).sum(axis=1)
        count += s.image.shape[1] * s.image.shape[2]
        if s.gt_map is not None:
            msum += float(s.gt_map.sum())
            mcount += s.gt_map.size
    if count == 0:
        raise DataError("cannot compute statistics of an empty sample list")
    return PreprocessStats(tuple(float(v) for v in total / count),
                           msum / mcount if mcount else 0.5)


def center_to_unit(values, mean, lo, hi):
    """Subtract ``mean`` then scale linearly so [lo, hi] lands inside [-1, 1]."""
    mean = np.asarray(mean, dtype=np.float64)
    scale = np.maximum(mean - lo, hi - mean)
    scale = np.where(scale > 0, scale, 1.0)
    return (values - mean) / scale


DEFAULT_SIZES = {"shallow": ((96, 96), (48, 48)), "deep": ((240, 320), (240, 320))}


def preprocess_image(kind, image, stats: PreprocessStats, input_hw=None, image_range=RAW_RANGE):
    if kind not in DEFAULT_SIZES:
        raise ConfigError(f"unknown network kind {kind!r}")
    if tuple(image_range) != RAW_RANGE:
        raise ConfigError(f"image already mapped to {image_range}; expected raw 8-bit input")
    input_hw = input_hw or DEFAULT_SIZES[kind][0]
    img = resize_bilinear(image, input_hw)
    mean = np.asarray(stats.pixel_mean)[:, None, None]
    return np.clip(center_to_unit(img, mean, 0.0, 255.0), -1.0, 1.0)


def preprocess_for(kind, sample: Sample, stats: PreprocessStats, *, input_hw=None,
                   target_hw=None, need_target=True):
    """Network input and regression target for ``sample``.

    shallow: image -> [-1, 1], map -> min-max [0, 1] at ``target_hw``.
    deep: image and map both mean-centred and mapped into [-1, 1].
    """
    default_in, default_out = DEFAULT_SIZES.get(kind, (None, None))
    x = preprocess_image(kind, sample.image, stats, input_hw, sample.image_range)
    if not need_target:
        return x, None
    if sample.gt_map is None:
        raise DataError(f"{sample.id}: no ground-truth map to build a target from")
    target_hw = target_hw or default_out
    m = resize_bilinear(sample.gt_map, target_hw)
    if kind == "shallow":
        t = minmax_normalize(m)
    else:
        t = np.clip(center_to_unit(m, stats.map_mean, 0.0, 1.0), -1.0, 1.0)
    return x, t[None]


def prepare_arrays(kind, samples, stats, *, input_hw=None, target_hw=None):
    xs, ts = zip(*(preprocess_for(kind, s, stats, input_hw=input_hw, target_hw=target_hw)
                   for s in samples))
    return np.stack(xs), np.stack(ts)


# ---------------------------------------------------------------- augmentation & split

def mirror_sample(s: Sample, suffix="_flip") -> Sample:
    w = s.image.shape[2]
    fix = None
    if s.fixations is not None:
        fix = s.fixations.copy()
        fix[:, 0] = w - 1 - fix[:, 0]
    return replace(s, id=s.id + suffix, image=s.image[:, :, ::-1].copy(),
                   gt_map=None if s.gt_map is None else s.gt_map[:, ::-1].copy(),
                   fixations=fix, meta=dict(s.meta))


def augment_mirror(samples):
    samples = list(samples)
    return samples + [mirror_sample(s) for s in samples]


def split(samples, train_fraction=0.8, seed=0):
    if not 0 < train_fraction < 1:
        raise ConfigError("train_fraction must lie strictly between 0 and 1")
    samples = list(samples)
    n_train = int(round(len(samples) * train_fraction))
    if n_train == 0 or n_train == len(samples):
        raise ConfigError(f"split of {len(samples)} samples at {train_fraction} leaves a side empty")
    order = np.random.default_rng(seed).permutation(len(samples))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


# ---------------------------------------------------------------- disk I/O

def _read_image(path, sample_id):
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "P", "1", "I;16", "I"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
                return np.repeat(arr[None], 3, axis=0)
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
            return arr.transpose(2, 0, 1).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"{sample_id}: cannot read image {path}: {exc}") from None


def _read_map(path, sample_id):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"{sample_id}: cannot read map {path}: {exc}") from None


def read_fixations(path, sample_id=""):
    pts = []
    try:
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    x, y = (int(v) for v in line.split(","))
                except ValueError:
                    raise DataError(f"{sample_id}: bad fixation line {n} in {path}: {line!r}") from None
                pts.append((x, y))
    except OSError as exc:
        raise DataError(f"{sample_id}: cannot read fixations {path}: {exc}") from None
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


def write_fixations(path, points):
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in np.asarray(points).reshape(-1, 2):
            fh.write(f"{int(x)},{int(y)}\n")


def _find(directory: Path, stem):
    for suf in IMAGE_SUFFIXES:
        p = directory / (stem + suf)
        if p.exists():
            return p
    return None


def load_dataset(root) -> list[Sample]:
    """Read ``root/images``, optional ``root/maps`` and ``root/fixations`` (matched by basename)."""
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DataError(f"dataset root {root} has no images/ directory")
    files = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    samples = []
    for path in files:
        sid = path.stem
        image = _read_image(path, sid)
        gt = fix = None
        mpath = _find(root / "maps", sid) if (root / "maps").is_dir() else None
        if mpath is not None:
            gt = _read_map(mpath, sid)
            if gt.shape != image.shape[1:]:
                raise DataError(f"{sid}: map extents {gt.shape} differ from image extents "
                                f"{image.shape[1:]}")
        fpath = root / "fixations" / (sid + ".txt")
        if fpath.exists():
            fix = read_fixations(fpath, sid)
        samples.append(Sample(sid, image, gt, fix))
    return samples


def to_uint8(a):
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def save_dataset(samples, root, stats: PreprocessStats | None = None):
    root = Path(root)
    for sub in ("images", "maps", "fixations"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(to_uint8(s.image.transpose(1, 2, 0))).save(root / "images" / f"{s.id}.png")
        if s.gt_map is not None:
            Image.fromarray(to_uint8(s.gt_map * 255.0), mode="L").save(root / "maps" / f"{s.id}.png")
        if s.fixations is not None:
            write_fixations(root / "fixations" / f"{s.id}.txt", s.fixations)
    if stats is not None:
        write_meta(root / "meta.txt", stats)


def write_meta(path, stats: PreprocessStats):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("pixel_mean " + " ".join(repr(float(v)) for v in stats.pixel_mean) + "\n")
        fh.write(f"map_mean {float(stats.map_mean)!r}\n")


def read_meta(path) -> PreprocessStats:
    vals = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                vals[parts[0]] = [float(v) for v in parts[1:]]
    try:
        return PreprocessStats(tuple(vals["pixel_mean"]), vals.get("map_mean", [0.5])[0])
    except KeyError:
        raise DataError(f"{path}: missing pixel_mean") from None


# ---------------------------------------------------------------- synthetic corpus

def _blob_field(side, centers, sigmas, amps):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    field_ = np.zeros((side, side))
    for (cx, cy), s, a in zip(centers, sigmas, amps):
        field_ += a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    return field_


def synth_sample(rng, side, sample_id, n_fix=20):
    """One dark image with 1-3 bright, well separated Gaussian blobs.

    The ground-truth map is the blob intensity scaled to a peak of 1, quantized
    to 8 bits, and fixations are drawn with probability proportional to it.
    """
    n_blobs = int(rng.integers(1, 4))
    sig_lo, sig_hi = side / 16, side / 9
    margin = int(np.ceil(sig_hi))
    centers, sigmas = [], []
    while len(centers) < n_blobs:
        c = tuple(int(v) for v in rng.integers(margin, side - margin, size=2))
        s = float(rng.uniform(sig_lo, sig_hi))
        if all(np.hypot(c[0] - o[0], c[1] - o[1]) >= 3.5 * max(s, so)
               for o, so in zip(centers, sigmas)):
            centers.append(c)
            sigmas.append(s)
    amps = rng.uniform(0.6, 1.0, size=n_blobs)
    intensity = _blob_field(side, centers, sigmas, amps)
    gt = np.rint(intensity / intensity.max() * 255.0) / 255.0

    background = rng.uniform(10, 30)
    tint = rng.uniform(0.85, 1.0, size=3)
    noise = rng.normal(0, 2.0, size=(3, side, side))
    image = background + (235.0 - background) * np.minimum(intensity, 1.0)[None] * tint[:, None, None]
    image = np.clip(np.rint(image + noise), 0, 255)

    p = gt.ravel() / gt.sum()
    flat = rng.choice(gt.size, size=n_fix, p=p)
    fix = np.stack([flat % side, flat // side], axis=1)
    meta = {"centers": centers, "sigmas": sigmas, "amplitudes": amps.tolist()}
    return Sample(sample_id, image, gt, fix, meta=meta)


def synth_generate(n, side=96, seed=0, out_dir=None, n_fix=20) -> list[Sample]:
    if side < 32:
        raise ConfigError("synthetic images need side >= 32")
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    samples = [synth_sample(rng, side, f"synth_{i:04d}", n_fix) for i in range(n)]
    if out_dir is not None:
        save_dataset(samples, out_dir, compute_stats(samples))
    return samples
