"""Saliency scores: Similarity, CC, and the Judd / Borji / shuffled AUC variants.

All AUCs are computed as the tie-corrected Mann-Whitney statistic, which is
exactly the trapezoidal area under the ROC curve swept over every distinct
value. A tie between a positive and a negative counts one half, so a constant
prediction scores 0.5.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import minmax_normalize
from .errors import ConfigError, ShapeError

METRICS = ("similarity", "cc", "auc_shuffled", "auc_borji", "auc_judd")


class ConstantMapWarning(RuntimeWarning):
    pass


def _map(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {a.shape}")
    return a


def _fix(fix, shape=None):
    fix = np.asarray(fix, dtype=np.int64).reshape(-1, 2)
    if len(fix) == 0:
        raise ConfigError("empty fixation set")
    if shape is not None:
        h, w = shape
        if np.any((fix[:, 0] < 0) | (fix[:, 0] >= w) | (fix[:, 1] < 0) | (fix[:, 1] >= h)):
            raise ShapeError(f"fixations fall outside the {w}x{h} prediction")
    return fix


def fixation_map(fix, extents, sigma_fix=8.0):
    """Gaussian-blurred fixation impulses, min-max scaled to [0, 1]."""
    h, w = extents
    fix = _fix(fix, (h, w))
    impulses = np.zeros((h, w))
    np.add.at(impulses, (fix[:, 1], fix[:, 0]), 1.0)
    if sigma_fix > 0:
        from scipy.ndimage import gaussian_filter  # deferred: slow import

        impulses = gaussian_filter(impulses, sigma_fix, mode="constant", truncate=4.0)
    return minmax_normalize(impulses)


def roc_auc(pos, neg):
    """P(pos > neg) + 0.5 P(pos == neg) via average ranks."""
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    n_pos, n_neg = len(pos), len(neg)
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("AUC needs at least one positive and one negative")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    sorted_v = allv[order]
    # average rank of each tie group, 1-based
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], len(sorted_v)]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(allv))
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_judd(pred, fix):
    """Positives: prediction at each fixation; negatives: every non-fixated pixel."""
    pred = _map(pred)
    fix = _fix(fix, pred.shape)
    mask = np.ones(pred.shape, dtype=bool)
    mask[fix[:, 1], fix[:, 0]] = False
    if not mask.any():
        raise ConfigError("every pixel is fixated; no negatives left")
    return roc_auc(pred[fix[:, 1], fix[:, 0]], pred[mask])


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def auc_borji(pred, fix, n_splits=100, n_neg_per_fix=1, rng=None):
    """Mean AUC over splits whose negatives are uniform draws from non-fixated pixels."""
    pred = _map(pred)
    fix = _fix(fix, pred.shape)
    rng = _rng(rng)
    mask = np.ones(pred.shape, dtype=bool)
    mask[fix[:, 1], fix[:, 0]] = False
    pool = pred[mask]
    if pool.size == 0:
        raise ConfigError("every pixel is fixated; no negatives left")
    pos = pred[fix[:, 1], fix[:, 0]]
    k = len(fix) * n_neg_per_fix
    return float(np.mean([roc_auc(pos, pool[rng.integers(0, pool.size, size=k)])
                          for _ in range(n_splits)]))


def auc_shuffled(pred, fix, other_fixations, n_splits=100, rng=None):
    """Mean AUC over splits whose negatives are fixations pooled from other images."""
    pred = _map(pred)
    fix = _fix(fix, pred.shape)
    rng = _rng(rng)
    h, w = pred.shape
    other = np.asarray(other_fixations, dtype=np.int64).reshape(-1, 2)
    inside = (other[:, 0] >= 0) & (other[:, 0] < w) & (other[:, 1] >= 0) & (other[:, 1] < h)
    other = other[inside]
    if len(other) == 0:
        raise ConfigError("empty shuffled-negative pool")
    pos = pred[fix[:, 1], fix[:, 0]]
    neg_vals = pred[other[:, 1], other[:, 0]]
    k = len(fix)
    replace = len(other) < k
    return float(np.mean([roc_auc(pos, neg_vals[rng.choice(len(other), size=k, replace=replace)])
                          for _ in range(n_splits)]))


def cc(pred, gt):
    """Pearson correlation; 0.0 (with a ConstantMapWarning) when either map is flat."""
    a, b = _map(pred), _map(gt)
    if a.shape != b.shape:
        raise ShapeError(f"cc: extents {a.shape} vs {b.shape}")
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.sum(a * a)) * float(np.sum(b * b)))
    if den == 0.0:
        warnings.warn("cc of a constant map is undefined; returning 0", ConstantMapWarning,
                      stacklevel=2)
        return 0.0
    return float(np.sum(a * b) / den)


def similarity(pred, gt):
    """Histogram intersection of the two maps after each is scaled to unit sum."""
    a, b = _map(pred), _map(gt)
    if a.shape != b.shape:
        raise ShapeError(f"similarity: extents {a.shape} vs {b.shape}")
    if np.any(a < 0) or np.any(b < 0):
        raise ConfigError("similarity needs non-negative maps")
    sa, sb = a.sum(), b.sum()
    if sa <= 0 or sb <= 0:
        raise ConfigError("similarity of a zero-sum map is undefined")
    return float(np.minimum(a / sa, b / sb).sum())


# ---------------------------------------------------------------- reports

@dataclass
class EvalConfig:
    n_splits: int = 100
    sigma_fix: float = 8.0
    seed: int = 0


@dataclass
class ImageScores:
    id: str
    similarity: float = math.nan
    cc: float = math.nan
    auc_shuffled: float = math.nan
    auc_borji: float = math.nan
    auc_judd: float = math.nan
    notes: list[str] = field(default_factory=list)

    def value(self, metric):
        return getattr(self, metric)


def _judd_key(score):
    v = score if isinstance(score, float) else score.auc_judd
    return -math.inf if math.isnan(v) else v


@dataclass
class MetricReport:
    rows: list[ImageScores]
    name: str = "model"

    @property
    def aggregate(self):
        out = {}
        for m in METRICS:
            vals = [r.value(m) for r in self.rows if not math.isnan(r.value(m))]
            out[m] = float(np.mean(vals)) if vals else math.nan
        return out

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (-_judd_key(r), r.id))

    def to_delimited(self, sep=","):
        lines = [sep.join(("id",) + METRICS + ("notes",))]
        for r in self.sorted_rows():
            lines.append(sep.join([r.id] + [_fmt(r.value(m)) for m in METRICS]
                                  + [";".join(r.notes)]))
        agg = self.aggregate
        lines.append(sep.join(["mean"] + [_fmt(agg[m]) for m in METRICS] + [""]))
        return "\n".join(lines) + "\n"

    def to_table(self):
        header = ("id",) + METRICS
        body = [[r.id] + [_fmt(r.value(m), 4) for m in METRICS] for r in self.sorted_rows()]
        agg = self.aggregate
        body.append(["mean"] + [_fmt(agg[m], 4) for m in METRICS])
        widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
        fmt_row = lambda row: "  ".join(str(v).ljust(w) if i == 0 else str(v).rjust(w)
                                        for i, (v, w) in enumerate(zip(row, widths)))
        rule = "-" * len(fmt_row(header))
        lines = [fmt_row(header), rule] + [fmt_row(b) for b in body[:-1]] + [rule, fmt_row(body[-1])]
        skipped = [f"{r.id}: {n}" for r in self.sorted_rows() for n in r.notes]
        if skipped:
            lines += ["", "notes:"] + [f"  {s}" for s in skipped]
        return "\n".join(lines) + "\n"


def _fmt(v, digits=6):
    return "nan" if math.isnan(v) else f"{v:.{digits}f}"


def evaluate(samples, predictions, config: EvalConfig = EvalConfig(), name="model") -> MetricReport:
    """Score ``predictions`` (mapping id -> 2-D map, or a list aligned with samples).

    Map metrics use the sample's ground-truth map when present, else a map
    built from its fixations. Shuffled-AUC negatives come from the fixations of
    every other sample. Each image gets its own generator derived from
    ``(seed, index)``, so scores do not depend on evaluation order.
    """
    samples = list(samples)
    if not isinstance(predictions, dict):
        predictions = {s.id: p for s, p in zip(samples, predictions)}
    rows = []
    for i, s in enumerate(samples):
        if s.id not in predictions:
            raise ConfigError(f"no prediction for {s.id}")
        pred = _map(predictions[s.id])
        if pred.shape != tuple(s.hw):
            raise ShapeError(f"{s.id}: prediction extents {pred.shape} differ from image "
                             f"extents {tuple(s.hw)}")
        row = ImageScores(s.id)
        has_fix = s.fixations is not None and len(s.fixations) > 0
        ref = s.gt_map
        if ref is None and has_fix:
            ref = fixation_map(s.fixations, pred.shape, config.sigma_fix)
        if ref is None:
            row.notes.append("no ground truth: similarity/cc skipped")
        else:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ConstantMapWarning)
                row.cc = cc(pred, ref)
            if caught:
                row.notes.append("constant map: cc set to 0")
            try:
                row.similarity = similarity(pred, ref)
            except ConfigError as exc:
                row.notes.append(f"similarity skipped ({exc})")
        if not has_fix:
            row.notes.append("no fixations: AUCs skipped")
        else:
            rng = np.random.default_rng([config.seed, i])
            row.auc_judd = auc_judd(pred, s.fixations)
            row.auc_borji = auc_borji(pred, s.fixations, config.n_splits, rng=rng)
            others = [o.fixations for j, o in enumerate(samples)
                      if j != i and o.fixations is not None and len(o.fixations)]
            if others:
                row.auc_shuffled = auc_shuffled(pred, s.fixations, np.concatenate(others),
                                                config.n_splits, rng=rng)
            else:
                row.notes.append("no other images: shuffled AUC skipped")
        rows.append(row)
    return MetricReport(rows, name)


def compare_models(reports) -> str:
    """Aligned table of aggregate scores, best AUC Judd first."""
    reports = list(reports.values()) if isinstance(reports, dict) else list(reports)
    ranked = sorted(reports, key=lambda r: (-_judd_key(r.aggregate["auc_judd"]), r.name))
    width = max([5] + [len(r.name) for r in ranked])
    lines = ["model".ljust(width) + "".join(m.rjust(14) for m in METRICS)]
    for r in ranked:
        agg = r.aggregate
        lines.append(r.name.ljust(width) + "".join(_fmt(agg[m], 4).rjust(14) for m in METRICS))
    return "\n".join(lines) + "\n"
