import filecmp
import json

import numpy as np
import pytest
from PIL import Image

from salnet import cli, data, modelio, models


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--n", "4", "--side", "96", "--seed", "1", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--spec", "shallow-small", "--data", str(synth_dir), "--out", str(out),
                     "--iters", "6", "--batch-size", "2", "--seed", "3"])
    assert code == 0
    return out


def test_synth_is_loadable_and_repeatable(synth_dir, tmp_path):
    assert len(data.load_dataset(synth_dir)) == 4
    cli.main(["synth", "--n", "4", "--side", "96", "--seed", "1", "--out", str(tmp_path)])
    for sub in ("images", "maps", "fixations"):
        cmp = filecmp.dircmp(synth_dir / sub, tmp_path / sub)
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only


def test_train_outputs(trained):
    assert (trained / "model.salnet").exists()
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["iterations"] == 6
    assert summary["train_samples"] == 8  # mirrored
    lines = (trained / "loss_history.tsv").read_text().splitlines()
    assert lines[0] == "iteration\tlr\ttrain_loss\tval_loss" and len(lines) == 7


def test_train_zero_iters_keeps_init(synth_dir, tmp_path):
    assert cli.main(["train", "--spec", "shallow-small", "--data", str(synth_dir),
                     "--out", str(tmp_path), "--iters", "0", "--seed", "4"]) == 0
    net = modelio.load_model(tmp_path / "model.salnet")
    init = models.build(models.shallow_small_spec(), models.GaussianInit(), seed=4)
    for a, b in zip(net.parameter_arrays(), init.parameter_arrays()):
        np.testing.assert_array_equal(a, b)


def test_train_is_reproducible(synth_dir, trained, tmp_path):
    cli.main(["train", "--spec", "shallow-small", "--data", str(synth_dir), "--out", str(tmp_path),
              "--iters", "6", "--batch-size", "2", "--seed", "3"])
    assert (tmp_path / "model.salnet").read_bytes() == (trained / "model.salnet").read_bytes()
    assert (tmp_path / "loss_history.tsv").read_text() == (trained / "loss_history.tsv").read_text()


def test_train_with_spec_file_and_validation(synth_dir, tmp_path):
    spec = tmp_path / "net.spec"
    spec.write_text(modelio.format_spec(models.shallow_small_spec()))
    code = cli.main(["train", "--spec-file", str(spec), "--data", str(synth_dir), "--out",
                     str(tmp_path / "o"), "--iters", "2", "--val-fraction", "0.25",
                     "--val-interval", "1", "--schedule", "step", "--no-mirror"])
    assert code == 0
    rows = (tmp_path / "o" / "loss_history.tsv").read_text().splitlines()[1:]
    assert all(r.split("\t")[3] for r in rows)


def test_train_errors(synth_dir, tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--iters", "1"]) == 3
    assert "nope" in capsys.readouterr().err
    assert cli.main(["train", "--spec", "bogus", "--data", str(synth_dir), "--iters", "1"]) == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--data", str(synth_dir)])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--data", str(synth_dir), "--iters", "-1"])
    assert info.value.code == 2
    code = cli.main(["train", "--spec", "shallow-small", "--data", str(synth_dir), "--out",
                     str(tmp_path / "d"), "--iters", "20", "--lr", "1e6", "--schedule", "constant"])
    assert code == 4


def test_predict_and_eval(synth_dir, trained, tmp_path):
    pred = tmp_path / "pred"
    assert cli.main(["predict", "--model", str(trained / "model.salnet"), "--data", str(synth_dir),
                     "--out", str(pred), "--raw", "--threads", "2"]) == 0
    for s in data.load_dataset(synth_dir):
        with Image.open(pred / f"{s.id}.png") as im:
            assert im.mode == "L" and im.size == (s.hw[1], s.hw[0])
        raw = cli.read_raw_map(pred / f"{s.id}.f32")
        assert raw.shape == s.hw and 0 <= raw.min() and raw.max() <= 1
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert cli.main(["eval", "--data", str(synth_dir), "--pred", str(pred), "--format", "csv",
                         "--splits", "10", "--seed", "5", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0].startswith("id,similarity,cc")


def test_ground_truth_as_prediction_scores_cc_one(synth_dir, tmp_path, capsys):
    assert cli.main(["eval", "--data", str(synth_dir), "--pred", str(synth_dir / "maps"),
                     "--splits", "5", "--format", "csv"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    ccs = [float(l.split(",")[2]) for l in lines[1:]]
    assert all(abs(c - 1.0) < 1e-9 for c in ccs)


def test_eval_shape_mismatch(synth_dir, tmp_path):
    pred = tmp_path / "small"
    pred.mkdir()
    for s in data.load_dataset(synth_dir):
        Image.fromarray(np.zeros((10, 10), np.uint8)).save(pred / f"{s.id}.png")
    assert cli.main(["eval", "--data", str(synth_dir), "--pred", str(pred)]) == 5
    assert cli.main(["eval", "--data", str(synth_dir), "--pred", str(tmp_path / "none")]) == 3


def test_predict_bad_model(synth_dir, tmp_path):
    bad = tmp_path / "bad.salnet"
    bad.write_bytes(b"garbage")
    assert cli.main(["predict", "--model", str(bad), "--data", str(synth_dir),
                     "--out", str(tmp_path / "p")]) == 3


def test_inspect_shallow(capsys):
    assert cli.main(["inspect", "--spec", "shallow-salicon"]) == 0
    out = capsys.readouterr().out
    for text in ("18,496", "73,856", "58,987,008", "5,310,720", "601,216", "2,404,864",
                 "1x48x48", "note: conv5-32"):
        assert text in out


def test_inspect_isun_and_deep(capsys):
    cli.main(["inspect", "--spec", "shallow-isun"])
    assert "conv3-64 " in capsys.readouterr().out
    cli.main(["inspect", "--spec", "deep"])
    out = capsys.readouterr().out
    assert "weight layers          10" in out and "25,806,210" in out
    assert out.rstrip().splitlines()[-1].endswith("60x80 -> 240x320")


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--seeds", "1"]) == 0
    assert "8/8 passed" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--seeds", "1", "--threshold", "1e-30"]) == 1


def test_threads_env(monkeypatch):
    class A:
        threads = None
    monkeypatch.setenv("SALNET_THREADS", "3")
    assert cli._threads(A()) == 3
    monkeypatch.setenv("SALNET_THREADS", "x")
    with pytest.raises(Exception):
        cli._threads(A())
