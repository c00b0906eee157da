"""``salnet`` command line: train, predict, eval, inspect, gradcheck, synth.

Exit codes: 0 success, 1 gradient check failure, 2 invalid flags or spec,
3 data/I-O error, 4 training divergence, 5 shape mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import data, metrics, models, modelio, optim
from .errors import ConfigError, DataError, DivergenceError, FormatError, ShapeError
from .gradcheck import grad_check
from .layers import LayerParams, LayerSpec
from .predict import PostProcessConfig, network_kind, predict_sample

log = logging.getLogger("salnet")

EXIT_OK, EXIT_GRADCHECK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_SHAPE = 0, 1, 2, 3, 4, 5

# reference prints that disagree with the recomputed values
KNOWN_DISCREPANCIES = {
    "shallow-salicon": [
        "conv5-32 parameters: reference row prints 2,400; (5x5x3)x32+32 = 2,432",
        "conv3-128 blob: reference row prints 30,976; 20x20x128 = 51,200 "
        "(only 51,200 reproduces the 601,216 blob total)",
    ],
}


def _count(v):
    n = int(v)
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return n


def _positive_float(v):
    x = float(v)
    if not x > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return x


def _threads(args):
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("SALNET_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ConfigError(f"SALNET_THREADS must be an integer, got {env!r}") from None


def resolve_spec(args) -> models.NetSpec:
    if getattr(args, "spec_file", None):
        return modelio.load_spec_file(args.spec_file)
    return models.preset(args.spec)


def _add_spec_flags(p, default="shallow-salicon"):
    p.add_argument("--spec", default=default,
                   help=f"named preset ({', '.join(models.PRESETS)})")
    p.add_argument("--spec-file", type=Path, help="spec text file; overrides --spec")


# ---------------------------------------------------------------- train

def cmd_train(args):
    spec = resolve_spec(args)
    if not args.data.is_dir():
        raise DataError(f"dataset directory {args.data} does not exist")
    samples = data.load_dataset(args.data)
    samples = [s for s in samples if s.gt_map is not None]
    if not samples:
        raise DataError(f"{args.data}: no samples with ground-truth maps")
    kind = "shallow" if spec.output_kind == "vector_map" else "deep"
    if args.val_fraction > 0 and len(samples) > 1:
        train_s, val_s = data.split(samples, 1 - args.val_fraction, args.seed)
    else:
        train_s, val_s = samples, []
    stats = data.compute_stats(train_s)
    if args.mirror:
        train_s = data.augment_mirror(train_s)
    in_hw = spec.input_shape[1:]
    out_hw = (spec.output_side,) * 2 if kind == "shallow" else in_hw
    x, y = data.prepare_arrays(kind, train_s, stats, input_hw=in_hw, target_hw=out_hw)
    val = data.prepare_arrays(kind, val_s, stats, input_hw=in_hw, target_hw=out_hw) if val_s else None

    scheme = models.HeInit() if args.init == "he" else models.GaussianInit(args.init_std, args.init_bias)
    net = models.build(spec, scheme, seed=args.seed)
    epochs_equiv = max(1, -(-args.iters * args.batch_size // len(x))) if args.iters else 1
    if args.schedule == "step":
        schedule = optim.StepHalving(args.lr, args.lr_interval, args.lr_floor)
    elif args.schedule == "decay":
        schedule = optim.InterpolatedDecay(args.lr, args.end_lr, args.epochs or epochs_equiv)
    else:
        schedule = optim.Constant(args.lr)
    cfg = optim.TrainConfig(base_lr=args.lr, momentum=args.momentum,
                            weight_decay=args.weight_decay, schedule=schedule,
                            batch_size=args.batch_size, max_iters=args.iters,
                            max_epochs=args.epochs, maxnorm_cap=args.maxnorm,
                            val_interval=args.val_interval, seed=args.seed)
    t0 = time.perf_counter()
    result = optim.train(net, (x, y), cfg, val=val)
    elapsed = time.perf_counter() - t0

    args.out.mkdir(parents=True, exist_ok=True)
    meta = {"kind": kind, "stats": stats.to_dict(), "seed": args.seed}
    modelio.save_model(result.network, args.out / "model.salnet", meta)
    optim.write_history(result.history, args.out / "loss_history.tsv")
    final = result.history[-1].train_loss if result.history else float("nan")
    mse = float(np.mean((result.network(x) - y) ** 2)) if len(x) else float("nan")
    summary = {"spec": spec.name, "iterations": len(result.history), "train_samples": len(x),
               "val_samples": len(val_s), "final_train_loss": final, "train_mse": mse,
               "seconds": round(elapsed, 2)}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- predict / eval

def _load_model(path):
    try:
        net, meta = modelio.load_model(path, with_metadata=True)
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from None
    stats = data.PreprocessStats.from_dict(meta["stats"]) if "stats" in meta else None
    return net, stats


def cmd_predict(args):
    net, stats = _load_model(args.model)
    root = args.data
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    samples = data.load_dataset(root)
    if stats is None:
        meta = root / "meta.txt"
        stats = data.read_meta(meta) if meta.exists() else data.compute_stats(samples)
    post = PostProcessConfig(sigma=args.sigma)
    args.out.mkdir(parents=True, exist_ok=True)

    def run(s):
        return s, predict_sample(net, s, stats, post)

    with ThreadPoolExecutor(max_workers=_threads(args)) as pool:
        for s, m in pool.map(run, samples):
            Image.fromarray(data.to_uint8(m.values * 255.0), mode="L").save(args.out / f"{s.id}.png")
            if args.raw:
                write_raw_map(args.out / f"{s.id}.f32", m.values)
    print(f"wrote {len(samples)} maps to {args.out}")
    return EXIT_OK


def write_raw_map(path, values):
    values = np.asarray(values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(f"salnet-map f32le {values.shape[0]} {values.shape[1]}\n".encode())
        fh.write(values.tobytes())


def read_raw_map(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        h, w = int(header[2]), int(header[3])
        return np.frombuffer(fh.read(), dtype="<f4").reshape(h, w).astype(np.float64)


def _read_prediction(pred_dir: Path, sid):
    raw = pred_dir / f"{sid}.f32"
    if raw.exists():
        return read_raw_map(raw)
    for suf in data.IMAGE_SUFFIXES:
        p = pred_dir / f"{sid}{suf}"
        if p.exists():
            with Image.open(p) as im:
                return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    raise DataError(f"no prediction for {sid} in {pred_dir}")


def cmd_eval(args):
    if not args.data.is_dir():
        raise DataError(f"dataset directory {args.data} does not exist")
    if not args.pred.is_dir():
        raise DataError(f"prediction directory {args.pred} does not exist")
    samples = data.load_dataset(args.data)
    preds = {s.id: _read_prediction(args.pred, s.id) for s in samples}
    cfg = metrics.EvalConfig(n_splits=args.splits, sigma_fix=args.sigma_fix, seed=args.seed)
    report = metrics.evaluate(samples, preds, cfg, name=args.name)
    text = report.to_delimited() if args.format == "csv" else report.to_table()
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- inspect

def _shape_str(shape):
    if len(shape) == 1:
        return f"1x1x{shape[0]}"
    c, h, w = shape
    return f"1x{h}x{w}" if c == 1 else f"{w}x{h}x{c}"


def inspect_text(spec: models.NetSpec):
    rows = models.blob_table(spec)
    counts = models.count_parameters(spec)
    mem = models.estimate_memory(spec)
    lines = [f"spec: {spec.name}  input {'x'.join(map(str, spec.input_shape))}  "
             f"output {spec.output_kind}", ""]
    header = f"{'layer':<12} {'blob data [W x H x D]':>28} {'parameters':>16}"
    lines += [header, "-" * len(header)]
    for r in rows:
        blob = f"{_shape_str(r.shape)} = {r.values:,}"
        lines.append(f"{r.label:<12} {blob:>28} {r.params:>16,}")
    lines.append("-" * len(header))
    lines.append(f"{'total':<12} {mem.blob_values:>28,} {counts.total:>16,}")
    lines.append("")
    lines.append(f"weight layers          {len(spec.weight_layers)}")
    lines.append(f"parameters             {counts.total:,}")
    lines.append(f"blob bytes (test)      {mem.blob_bytes_test:,}  ({models.mib(mem.blob_bytes_test):.2f} MB)")
    lines.append(f"blob bytes (train)     {mem.blob_bytes_train:,}  ({models.mib(mem.blob_bytes_train):.2f} MB)")
    lines.append(f"parameter bytes        {mem.param_bytes:,}  ({models.mib(mem.param_bytes):.2f} MB)")
    lines.append(f"total (train)          {mem.total_train_bytes:,}  ({models.mib(mem.total_train_bytes):.2f} MB)")
    lines.append(f"total (test)           {mem.total_test_bytes:,}  ({models.mib(mem.total_test_bytes):.2f} MB)")
    trace = []
    for layer, shape in zip([None] + spec.layers, [spec.input_shape] + models.infer_shapes(spec)):
        if len(shape) == 3 and (layer is None or layer.kind not in ("relu", "dropout")):
            trace.append(f"{shape[1]}x{shape[2]}")
    lines.append("spatial trace          " + " -> ".join(trace))
    notes = KNOWN_DISCREPANCIES.get(spec.name, [])
    if notes:
        lines.append("")
        lines += [f"note: {n}" for n in notes]
    return "\n".join(lines) + "\n"


def cmd_inspect(args):
    sys.stdout.write(inspect_text(resolve_spec(args)))
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck

def _layer_cases(rng):
    """One randomly sized instance of every layer kind (extents 2-4)."""
    def ext():
        return int(rng.integers(2, 5))

    def params(ws, bs):
        return LayerParams(rng.standard_normal(ws), rng.standard_normal(bs))

    n, c, h, w, o = ext(), ext(), ext() + 2, ext() + 2, ext()
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    h += (stride - (h + 2 * pad - k) % stride) % stride
    w += (stride - (w + 2 * pad - k) % stride) % stride
    x = rng.standard_normal((n, c, h, w))
    out_units = ext()
    pieces = int(rng.integers(2, 4))
    return [
        (LayerSpec.conv(k, o, stride, pad), params((o, c, k, k), (o,)), x),
        (LayerSpec.deconv(k, o, stride, min(pad, k // 2)), params((c, o, k, k), (o,)), x),
        (LayerSpec.maxpool(2, int(rng.integers(1, 3))), None, rng.standard_normal((n, c, 4, 4))),
        (LayerSpec.relu(), None, x),
        (LayerSpec.fc(out_units), params((out_units, c * h * w), (out_units,)), x),
        (LayerSpec.maxout(pieces), None, rng.standard_normal((n, pieces * ext(), ext()))),
        (LayerSpec.dropout(float(rng.uniform(0.1, 0.9))), None, x),
    ]


def tiny_shallow_spec():
    """Shallow topology on a 24x24 input with a 4x4 output map, small enough to check fully."""
    spec = models.shallow_spec("salicon", depths=(2, 3, 4), fc_units=(8, 16), input_hw=(24, 24))
    spec.name = "shallow-tiny"
    return spec


def run_gradcheck(seeds=3, threshold=1e-4, net_threshold=1e-3, epsilon=1e-5):
    rows = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for spec, params, x in _layer_cases(rng):
            rep = grad_check((spec, params), x, epsilon, seed=seed)
            rows.append((spec.kind, seed, rep.max_error, rep.passed(threshold), rep.problems))
        net = models.build(tiny_shallow_spec(), models.HeInit(), seed=seed, dtype=np.float64)
        x = rng.uniform(-1, 1, (2,) + net.spec.input_shape)
        # every parameter block has < 200 entries; only the input is subsampled
        rep = grad_check(net, x, epsilon, seed=seed, max_entries=200)
        rows.append(("shallow-tiny", seed, rep.max_error, rep.passed(net_threshold), rep.problems))
    return rows


def cmd_gradcheck(args):
    rows = run_gradcheck(args.seeds, args.threshold, args.net_threshold, args.epsilon)
    print(f"{'target':<16} {'seed':>4} {'max rel err':>12}  result")
    for kind, seed, err, ok, problems in rows:
        extra = f"  {'; '.join(problems)}" if problems else ""
        print(f"{kind:<16} {seed:>4} {err:>12.3e}  {'PASS' if ok else 'FAIL'}{extra}")
    failed = sum(not r[3] for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} passed")
    return EXIT_OK if failed == 0 else EXIT_GRADCHECK


# ---------------------------------------------------------------- synth

def cmd_synth(args):
    samples = data.synth_generate(args.n, args.side, args.seed, args.out, n_fix=args.fixations)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="salnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network on a dataset directory")
    _add_spec_flags(t)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, default=Path("run"))
    t.add_argument("--iters", type=_count, default=None)
    t.add_argument("--epochs", type=_count, default=None)
    t.add_argument("--batch-size", type=_count, default=8)
    t.add_argument("--lr", type=_positive_float, default=0.01)
    t.add_argument("--schedule", choices=("constant", "step", "decay"), default="decay")
    t.add_argument("--end-lr", type=_positive_float, default=1e-4)
    t.add_argument("--lr-interval", type=_count, default=100)
    t.add_argument("--lr-floor", type=_positive_float, default=None)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--maxnorm", type=_positive_float, default=2.0,
                   help="row-norm cap on fully connected layers (default 2.0)")
    t.add_argument("--no-maxnorm", dest="maxnorm", action="store_const", const=None)
    t.add_argument("--init", choices=("gaussian", "he"), default="gaussian")
    t.add_argument("--init-std", type=_positive_float, default=0.01)
    t.add_argument("--init-bias", type=float, default=0.1)
    t.add_argument("--val-fraction", type=float, default=0.0)
    t.add_argument("--val-interval", type=_count, default=100)
    t.add_argument("--mirror", action=argparse.BooleanOptionalAction, default=True)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write one 8-bit map per image")
    pr.add_argument("--model", type=Path, required=True)
    pr.add_argument("--data", type=Path, required=True, help="dataset root with images/")
    pr.add_argument("--out", type=Path, required=True)
    pr.add_argument("--sigma", type=float, default=2.0)
    pr.add_argument("--raw", action="store_true", help="also write float32 maps (.f32)")
    pr.add_argument("--threads", type=_count, default=None)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score predicted maps against ground truth")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--pred", type=Path, required=True)
    e.add_argument("--out", type=Path, default=None)
    e.add_argument("--format", choices=("table", "csv"), default="table")
    e.add_argument("--splits", type=_count, default=100)
    e.add_argument("--sigma-fix", type=float, default=8.0)
    e.add_argument("--name", default="model")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threads", type=_count, default=None)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="per-layer blob and parameter accounting")
    _add_spec_flags(i)
    i.set_defaults(func=cmd_inspect)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    g.add_argument("--seeds", type=_count, default=3)
    g.add_argument("--epsilon", type=float, default=1e-5)
    g.add_argument("--threshold", type=float, default=1e-4)
    g.add_argument("--net-threshold", type=float, default=1e-3)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate a synthetic blob dataset")
    s.add_argument("--n", type=_count, default=8)
    s.add_argument("--side", type=_count, default=96)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fixations", type=_count, default=20)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "train" and args.iters is None and args.epochs is None:
        parser.error("train needs --iters or --epochs")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (ConfigError, FormatError) as exc:
        # a bad model file is an I/O problem; a bad spec or flag is a usage problem
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc, FormatError) else EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
