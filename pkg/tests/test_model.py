import numpy as np
import pytest

from edgecnn.exceptions import ConfigError, FormatError, ShapeError
from edgecnn.fileformat import header_size, record_size
from edgecnn.model import (Checkpoint, build, export_deployed, graph_from_params, infer,
                           load_checkpoint, load_deployed, param_count, save_checkpoint,
                           save_deployed)


def expected_params(size, classes=5):
    # independent closed form: conv1 + conv2 + dense1 + dense2
    side = ((size - 2) // 2 - 2) // 2
    return (3 * 3 * 3 * 32 + 32) + (3 * 3 * 32 * 64 + 64) + (side * side * 64 * 128 + 128) \
        + (128 * classes + classes)


def test_table_one_layer_counts():
    g = build(256, 5)
    counts = [layer.param_count() for layer in g.param_layers()]
    assert counts == [896, 18496, 31490176, 645]
    assert param_count(g) == 31510213


@pytest.mark.parametrize("size,total", [(64, 1625797), (96, 3985093), (128, 7392965),
                                        (256, 31510213)])
def test_param_count_by_size(size, total):
    assert expected_params(size) == total
    assert param_count(build(size, 5)) == total


def test_param_count_is_additive():
    g = build(64, 5)
    dense_only = sum(layer.param_count() for layer in g.layers if layer.kind == "Dense")
    assert param_count(g) - dense_only == 896 + 18496


def test_table_one_shapes_256():
    rows = build(256, 5).summary()
    assert [(k, s) for k, s, _ in rows] == [
        ("Input", (None, 256, 256, 3)), ("Conv2D", (None, 254, 254, 32)),
        ("MaxPooling2D", (None, 127, 127, 32)), ("Dropout", (None, 127, 127, 32)),
        ("Conv2D", (None, 125, 125, 64)), ("MaxPooling2D", (None, 62, 62, 64)),
        ("Dropout", (None, 62, 62, 64)), ("Flatten", (None, 246016)),
        ("Dropout", (None, 246016)), ("Dense", (None, 128)), ("Dense", (None, 5))]


@pytest.mark.parametrize("size,chain", [(64, (62, 31, 29, 14)), (96, (94, 47, 45, 22)),
                                        (128, (126, 63, 61, 30)), (256, (254, 127, 125, 62))])
def test_spatial_chain(size, chain):
    shapes = [s for _, s in build(size, 5).shape_chain()]
    assert (shapes[1][0], shapes[2][0], shapes[4][0], shapes[5][0]) == chain


def test_build_rejects_bad_config():
    with pytest.raises(ConfigError):
        build(9, 5)
    with pytest.raises(ConfigError):
        build(64, 1)


def test_build_is_seeded():
    a, b = build(16, 3, seed=4), build(16, 3, seed=4)
    for k, v in a.named_params().items():
        assert np.array_equal(v, b.named_params()[k])


def test_infer_outputs_probabilities(rng):
    g = build(16, 5, seed=1)
    p = infer(g, rng.random((16, 16, 3)))
    assert p.shape == (5,) and abs(p.sum() - 1) < 1e-6
    with pytest.raises(ShapeError):
        infer(g, rng.random((17, 16, 3)))


def test_infer_zero_model_is_uniform():
    g = build(16, 5)
    for p in g.named_params().values():
        p[...] = 0
    np.testing.assert_allclose(infer(g, np.zeros((16, 16, 3))), np.full(5, 0.2))


def test_infer_is_deterministic(rng):
    g = build(16, 5, seed=2)
    x = rng.random((16, 16, 3))
    assert infer(g, x).tobytes() == infer(g, x).tobytes()


def test_checkpoint_round_trip_bytes(tmp_path, rng):
    g = build(16, 3, seed=5)
    ck = Checkpoint.from_graph(g, step=7, epoch=3, best_val_loss=0.125)
    for k in ck.m:
        ck.m[k] = rng.standard_normal(ck.m[k].shape).astype(np.float32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ck, path)
    loaded = load_checkpoint(path)
    for group in ("weights", "m", "v"):
        for k, a in getattr(ck, group).items():
            assert getattr(loaded, group)[k].tobytes() == a.tobytes()
    assert (loaded.step, loaded.epoch, loaded.best_val_loss) == (7, 3, 0.125)
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_size_formula(tmp_path):
    g = build(16, 3)
    ck = Checkpoint.from_graph(g)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ck, path)
    records = ck.records()
    expected = header_size(ck.meta()) + sum(record_size(k, t) for k, t in records.items())
    assert path.stat().st_size == expected
    payload = sum(t.nbytes for t in records.values())
    assert payload == 3 * 4 * param_count(g)


@pytest.mark.parametrize("cut", [1, 100])
def test_truncated_checkpoint_is_format_error(tmp_path, cut):
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint.from_graph(build(16, 3)), path)
    data = path.read_bytes()
    path.write_bytes(data[:-cut])
    with pytest.raises(FormatError) as err:
        load_checkpoint(path)
    assert err.value.offset is not None


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint.from_graph(build(16, 3)), path)
    data = bytearray(path.read_bytes())
    bad = bytes(b"XXXX" + data[4:])
    (tmp_path / "bad").write_bytes(bad)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "bad")
    data[4] = 99
    (tmp_path / "ver").write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(tmp_path / "ver")


def test_export_strips_optimizer_state(tmp_path):
    ck = Checkpoint.from_graph(build(16, 3))
    d = export_deployed(ck, "f32")
    save_deployed(d, tmp_path / "m.edgn")
    save_checkpoint(ck, tmp_path / "m.ckpt")
    back = load_deployed(tmp_path / "m.edgn")
    assert back.precision == "f32" and param_count(back) == param_count(ck)
    ratio = (tmp_path / "m.ckpt").stat().st_size / (tmp_path / "m.edgn").stat().st_size
    assert 2.9 < ratio < 3.0


def test_f16_export_halves_size():
    ck = Checkpoint.from_graph(build(32, 5))
    f32 = len(export_deployed(ck, "f32").to_bytes())
    f16 = len(export_deployed(ck, "f16").to_bytes())
    assert abs(f16 - f32 / 2) < 1024


def test_i8_export_requires_calibration():
    with pytest.raises(ConfigError):
        export_deployed(Checkpoint.from_graph(build(16, 3)), "i8")


def test_export_never_changes_param_count(rng):
    ck = Checkpoint.from_graph(build(16, 3))
    calib = rng.random((4, 16, 16, 3)).astype(np.float32)
    for precision in ("f32", "f16", "i8"):
        assert param_count(export_deployed(ck, precision, calib)) == param_count(ck)


def test_graph_from_params_reuses_arrays():
    g = build(16, 3)
    h = graph_from_params(g.config, g.named_params())
    assert h.named_params()["dense1.weight"] is g.named_params()["dense1.weight"]
