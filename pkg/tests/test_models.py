import numpy as np
import pytest

from salnet import models, modelio
from salnet.data import SaliencyMap
from salnet.errors import ConfigError, FormatError, ShapeError
from salnet.layers import LayerSpec
from salnet.predict import PostProcessConfig, predict, smooth_map

# per-layer counts recomputed as (kh*kw*cin)*cout + cout and (in*out) + out
SHALLOW_COUNTS = [("conv1", 2_432), ("conv2", 18_496), ("conv3", 73_856),
                  ("fc1", 58_987_008), ("fc2", 5_310_720)]
SHALLOW_BLOB_ROWS = [
    ("input", 27_648), ("conv5-32", 270_848), ("maxpool2", 67_712), ("conv3-64", 123_904),
    ("maxpool2", 30_976), ("conv3-128", 51_200), ("maxpool2", 12_800), ("FC-4608", 4_608),
    ("slice1", 2_304), ("slice2", 2_304), ("maxout", 2_304), ("FC-2304", 2_304),
    ("output", 2_304),
]


def test_shallow_per_layer_counts():
    assert models.count_parameters(models.preset("shallow-salicon")).per_layer == SHALLOW_COUNTS


def test_shallow_totals():
    spec = models.preset("shallow-salicon")
    assert models.count_parameters(spec).total == 64_392_512
    mem = models.estimate_memory(spec)
    assert mem.blob_values == 601_216
    assert mem.blob_bytes_test == 2_404_864
    assert mem.blob_bytes_train == 2 * mem.blob_bytes_test
    assert mem.param_bytes == 4 * 64_392_512
    assert abs(models.mib(mem.blob_bytes_test) - 2.29) < 0.005
    assert abs(models.mib(mem.param_bytes) - 246) < 1.0


def test_shallow_blob_rows():
    rows = models.blob_table(models.preset("shallow-salicon"))
    assert [(r.label, r.values) for r in rows] == SHALLOW_BLOB_ROWS
    assert rows[-1].shape == (1, 48, 48)


def test_shallow_fc_input_width():
    spec = models.preset("shallow-salicon")
    shapes = models.infer_shapes(spec)
    fc = [i for i, l in enumerate(spec.layers) if l.kind == "fully_connected"][0]
    assert int(np.prod(shapes[fc - 1])) == 12_800


def test_isun_third_conv_depth():
    spec = models.preset("shallow-isun")
    assert [l.out_channels for l in spec.layers if l.kind == "conv"] == [32, 64, 64]


def test_deep_constraints():
    spec = models.preset("deep")
    assert len(spec.weight_layers) == 10
    shapes = models.infer_shapes(spec)
    assert shapes[-1] == (1, 240, 320)
    assert max(s[1] for s in shapes[5:-1]) == 60
    total = models.count_parameters(spec).total
    assert total == 25_806_210
    assert abs(total - 25.8e6) / 25.8e6 < 0.001


def test_deep_other_input_extents():
    spec = models.deep_spec((96, 128))
    assert models.infer_shapes(spec)[-1] == (1, 96, 128)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        models.preset("resnet")


def test_vector_map_must_be_square():
    layers = [LayerSpec.fc(10)]
    with pytest.raises(ConfigError):
        models.infer_shapes(models.NetSpec("x", (1, 2, 2), layers, "vector_map", 3))


def test_auto_names_unique():
    spec = models.preset("deep")
    names = [l.name for l in spec.layers]
    assert len(set(names)) == len(names)
    assert names[:3] == ["conv1", "relu1", "pool1"]


# ---- initialization

def test_gaussian_init_statistics():
    net = models.build(models.preset("shallow-salicon").with_input(96, 96),
                       models.GaussianInit(0.01, 0.1), seed=3)
    w = net.params["fc2"].weights.ravel()[:1_000_000]
    assert abs(w.std() / 0.01 - 1) < 0.02
    for p in net.params.values():
        assert np.all(p.bias == np.float32(0.1))


def test_he_init_variance():
    spec = models.NetSpec("he", (64, 3, 3), [LayerSpec.conv(3, 128)] * 1 + [LayerSpec.fc(9)],
                          "vector_map", 3)
    w = np.concatenate([models.build(spec, models.HeInit(), seed=s, dtype=np.float64)
                        .params["conv1"].weights.ravel() for s in range(14)])
    assert w.size >= 1_000_000
    assert abs(w.var() / (2 / (3 * 3 * 64)) - 1) < 0.05


def test_build_is_seeded():
    spec = models.shallow_small_spec()
    a, b = models.build(spec, seed=5), models.build(spec, seed=5)
    for x, y in zip(a.parameter_arrays(), b.parameter_arrays()):
        assert x.tobytes() == y.tobytes()


# ---- network

def test_forward_output_shape(rng):
    net = models.build(models.shallow_small_spec())
    y = net(rng.standard_normal((2, 3, 96, 96)))
    assert y.shape == (2, 1, 24, 24)


def test_forward_rejects_wrong_input(rng):
    net = models.build(models.shallow_small_spec())
    with pytest.raises(ShapeError):
        net(rng.standard_normal((1, 3, 64, 64)))


def test_network_rejects_bad_params():
    spec = models.shallow_small_spec()
    params = models.build(spec).params
    params["conv1"] = params["conv2"]
    with pytest.raises(ShapeError):
        models.Network(spec, params)


# ---- serialization and transfer

def test_save_load_bit_exact(tmp_path):
    net = models.build(models.shallow_small_spec(), seed=9)
    modelio.save_model(net, tmp_path / "m.salnet", {"note": "x"})
    back, meta = modelio.load_model(tmp_path / "m.salnet", with_metadata=True)
    assert meta == {"note": "x"}
    assert back.spec == net.spec
    for (n1, a), (n2, b) in zip(net.parameter_blocks(), back.parameter_blocks()):
        assert n1 == n2 and a.tobytes() == b.tobytes()


def test_corrupt_file_detected(tmp_path):
    net = models.build(models.shallow_small_spec())
    path = tmp_path / "m.salnet"
    modelio.save_model(net, path)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        modelio.load_model(path)
    path.write_bytes(b"NOTAMODEL")
    with pytest.raises(FormatError):
        modelio.load_model(path)
    path.write_bytes(bytes(raw[:100]))
    with pytest.raises(FormatError):
        modelio.load_model(path)


@pytest.mark.parametrize("name", ["shallow-salicon", "shallow-isun", "shallow-small", "deep"])
def test_spec_text_round_trip(name):
    spec = models.preset(name)
    assert modelio.parse_spec(modelio.format_spec(spec)) == spec


@pytest.mark.parametrize("name,preset", [("shallow-salicon", "shallow-salicon"),
                                         ("shallow-small", "shallow-small"),
                                         ("deep-default", "deep")])
def test_shipped_specs_match_presets(name, preset):
    assert modelio.load_spec_file(modelio.shipped_spec_path(name)) == models.preset(preset)


def test_bad_spec_text():
    with pytest.raises(ConfigError):
        modelio.parse_spec("name x\ninput 3 8 8\noutput full_resolution\nconv kernel=3x3 wat=1\n")
    with pytest.raises(ConfigError):
        modelio.parse_spec("conv kernel=3x3 channels=1\n")


def test_import_first_three_convs(tmp_path):
    target = models.build(models.deep_spec((16, 16)), seed=0)
    donor = models.build(models.deep_spec((16, 16)), seed=1)
    modelio.export_weights(donor, tmp_path / "donor.npz", layers={"conv1", "conv2", "conv3"})
    out = modelio.import_external_weights(
        target, tmp_path / "donor.npz", {n: n for n in ("conv1", "conv2", "conv3")})
    changed = {name.split(".")[0] for (name, a), (_, b)
               in zip(out.parameter_blocks(), target.parameter_blocks()) if not np.array_equal(a, b)}
    assert changed == {"conv1", "conv2", "conv3"}
    np.testing.assert_array_equal(out.params["conv2"].weights, donor.params["conv2"].weights)


def test_import_shape_mismatch(tmp_path):
    target = models.build(models.deep_spec((16, 16)))
    donor = models.build(models.deep_spec((16, 16)))
    modelio.save_model(donor, tmp_path / "d.salnet")
    with pytest.raises(ShapeError):
        modelio.import_external_weights(target, tmp_path / "d.salnet", {"conv1": "conv2"})
    with pytest.raises(FormatError):
        modelio.import_external_weights(target, tmp_path / "d.salnet", {"conv1": "conv99"})


# ---- prediction

def test_predict_shallow_resizes_to_input(rng):
    net = models.build(models.preset("shallow-small"), seed=2)
    m = predict(net, rng.uniform(-1, 1, (3, 96, 96)))
    assert isinstance(m, SaliencyMap)
    assert m.values.shape == (96, 96)
    assert m.values.min() >= 0 and m.values.max() <= 1


def test_smoothing_keeps_isolated_peak():
    m = np.zeros((21, 21))
    m[7, 12] = 1.0
    out = smooth_map(m, 2.0)
    assert np.unravel_index(out.argmax(), out.shape) == (7, 12)
    assert abs(out.sum() - 1.0) < 1e-9


def test_no_smoothing_for_full_resolution(rng):
    net = models.build(models.deep_spec((16, 16)), seed=0)
    x = rng.uniform(-1, 1, (3, 16, 16))
    a = predict(net, x, PostProcessConfig(sigma=2.0))
    b = predict(net, x, PostProcessConfig(sigma=0.0))
    np.testing.assert_array_equal(a.values, b.values)
