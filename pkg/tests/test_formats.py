import numpy as np
import pytest

from conftest import random_images
from hit.formats import (
    FormatError,
    load_checkpoint,
    read_map_csv,
    read_pgm,
    read_table,
    render_gray,
    save_checkpoint,
    write_map_csv,
    write_pgm,
    write_table,
)
from hit.model import HiT, HiTConfig


def small_model():
    return HiT(HiTConfig(depth=2, d_model=16, heads=2, image_size=16, patch_size=4, pool_layers=(1,), num_classes=3), seed=5)


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = small_model()
    save_checkpoint(tmp_path / "m.ckpt", model, seed=5, epoch=7)
    bundle = load_checkpoint(tmp_path / "m.ckpt")
    assert bundle.cfg == model.cfg and (bundle.seed, bundle.epoch) == (5, 7)
    x = random_images(model.cfg, 3, dtype=np.float32)
    assert np.array_equal(bundle.model().predict_logits(x), model.predict_logits(x))


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_model())
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(tmp_path / "long")


def test_pgm_round_trip(tmp_path):
    m = np.arange(12, dtype=float).reshape(3, 4)
    write_pgm(tmp_path / "s.pgm", m, upscale=2)
    img = read_pgm(tmp_path / "s.pgm")
    assert img.shape == (6, 8)
    np.testing.assert_array_equal(img, render_gray(m, 2))
    assert img.min() == 0 and img.max() == 255
    assert not render_gray(np.full((2, 2), 3.0)).any()


def test_map_csv_round_trip(tmp_path):
    m = np.random.default_rng(0).normal(size=(4, 4))
    write_map_csv(tmp_path / "s.csv", m, {"class": 2})
    back, meta = read_map_csv(tmp_path / "s.csv")
    assert np.array_equal(back, m) and meta == {"class": "2"}


def test_table_round_trip_and_atomicity(tmp_path):
    write_table(tmp_path / "t.csv", ["a", "b"], [(1, 0.5), (2, 0.25)], {"k": "v"})
    header, rows, meta = read_table(tmp_path / "t.csv")
    assert header == ["a", "b"] and rows == [["1", "0.5"], ["2", "0.25"]] and meta == {"k": "v"}
    assert sorted(p.name for p in tmp_path.iterdir()) == ["t.csv"]  # no temp files left
