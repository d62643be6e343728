import numpy as np

from rigface_lab import imageio


def test_quantize_round_to_nearest():
    vals = np.array([0.0, 0.5, 1.0, 0.2 / 255, 0.6 / 255, 1.7])
    assert imageio.quantize(vals).tolist() == [0, 128, 255, 0, 1, 255]


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (9, 7, 3)) / 255.0
    imageio.save_png(tmp_path / "a.png", img)
    assert np.array_equal(imageio.load_png(tmp_path / "a.png"), img)


def test_mask_roundtrip(tmp_path):
    m = np.random.default_rng(1).uniform(size=(5, 6)) > 0.5
    imageio.save_mask_png(tmp_path / "m.png", m)
    assert np.array_equal(imageio.load_mask_png(tmp_path / "m.png"), m)


def test_json_atomic(tmp_path):
    imageio.write_json(tmp_path / "x.json", {"b": 1, "a": [1, 2]})
    assert imageio.read_json(tmp_path / "x.json") == {"a": [1, 2], "b": 1}
    assert not (tmp_path / "x.json.tmp").exists()
