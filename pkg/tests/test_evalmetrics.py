import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigface_lab import evalmetrics, face3d, synthgen
from rigface_lab.evalmetrics import EditResult, mean_l1, rmse
from rigface_lab.face3d import FaceParams


def test_hand_cases():
    assert mean_l1([0.1, 0, 0], [0, 0, 0]) == pytest.approx(0.0333333, abs=1e-6)
    assert rmse([0.3, 0.4], [0, 0]) == pytest.approx(0.353553, abs=1e-6)
    assert mean_l1([], []) == 0.0
    with pytest.raises(ValueError):
        rmse([1, 2], [1, 2, 3])


def test_rmse_dominates_l1_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        a, b = rng.normal(size=n), rng.normal(size=n)
        assert rmse(a, b) >= mean_l1(a, b) - 1e-15


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_metrics_zero_on_self(v):
    assert mean_l1(v, v) == 0.0 and rmse(v, v) == 0.0


def test_gaussian_window():
    w = evalmetrics.gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(w, w.T) and np.allclose(w, w[::-1])


def test_ssim_self_and_symmetry():
    rng = np.random.default_rng(1)
    x, y = rng.uniform(size=(24, 20, 3)), rng.uniform(size=(24, 20, 3))
    assert evalmetrics.ssim(x, x) == 1.0
    assert evalmetrics.ssim(x, y) == pytest.approx(evalmetrics.ssim(y, x), abs=1e-12)
    assert evalmetrics.ssim(x, y) < 0.5


def test_ssim_constant_images_closed_form():
    # no variance: SSIM reduces to the luminance term
    a, b = 0.3, 0.7
    c1 = 0.01 ** 2
    expected = (2 * a * b + c1) / (a * a + b * b + c1)
    got = evalmetrics.ssim(np.full((16, 16), a), np.full((16, 16), b))
    assert got == pytest.approx(expected, abs=1e-10)


def test_ssim_rejects_small_or_mismatched():
    with pytest.raises(ValueError):
        evalmetrics.ssim(np.zeros((8, 8)), np.ones((8, 8)))
    with pytest.raises(ValueError):
        evalmetrics.ssim(np.zeros((16, 16)), np.zeros((16, 17)))


def test_masked_ssim_ignores_face_pixels():
    rng = np.random.default_rng(2)
    x, y = rng.uniform(size=(32, 32, 3)), rng.uniform(size=(32, 32, 3))
    mask = np.zeros((32, 32), bool)
    mask[8:20, 10:24] = True
    base = evalmetrics.masked_ssim(x, y, mask)
    x2 = x.copy()
    x2[mask] = rng.uniform(size=(mask.sum(), 3))
    assert evalmetrics.masked_ssim(x2, y, mask) == base
    x3 = x.copy()
    x3[~mask] = 0.0
    assert evalmetrics.masked_ssim(x3, y, mask) != base


def shift_extractor(image, known, free, budget):
    """Fake extractor: every free group shifts by the image mean."""
    m = float(np.mean(image))
    return known.replace(**{g: getattr(known, g) + m for g in free})


def _result(mode, edit_val, ref_val, name=""):
    p = FaceParams.neutral()
    return EditResult(mode, np.full((16, 16, 3), edit_val), np.full((16, 16, 3), ref_val), p, p,
                      face_mask=np.zeros((16, 16), bool), name=name)


@pytest.mark.parametrize("mode,keys", [
    ("pose", {"apd", "p_rmse"}),
    ("expression", {"aed", "e_rmse", "ssim"}),
    ("lighting", {"ald", "l_rmse", "ssim"}),
    ("combined", {"apd", "p_rmse", "aed", "e_rmse", "ald", "l_rmse"}),
])
def test_mode_routing(mode, keys):
    row = evalmetrics.evaluate_one(_result(mode, 0.6, 0.5), extractor=shift_extractor)
    assert set(row) - {"name", "mode"} == keys | {"id_l2"}
    for k in keys - {"ssim"}:
        assert row[k] == pytest.approx(0.1, abs=1e-12)


def test_unknown_mode():
    with pytest.raises(ValueError):
        evalmetrics.evaluate_one(_result("zoom", 0.5, 0.5), extractor=shift_extractor)


def test_shuffle_invariance():
    rng = np.random.default_rng(3)
    results = [_result(m, rng.uniform(), rng.uniform(), str(i))
               for i, m in enumerate(["pose", "lighting", "expression", "pose", "lighting", "combined"] * 2)]
    a = evalmetrics.evaluate(results, extractor=shift_extractor)
    order = rng.permutation(len(results))
    b = evalmetrics.evaluate([results[i] for i in order], extractor=shift_extractor)
    assert a.aggregates == b.aggregates and a.overall == b.overall


def test_empty_report(tmp_path):
    rep = evalmetrics.evaluate([])
    assert rep.empty
    json_path, txt_path = rep.write(tmp_path)
    assert evalmetrics.EMPTY_MARKER in txt_path.read_text()
    assert evalmetrics.load_report(json_path)["empty"] is True


def test_report_table(tmp_path):
    rep = evalmetrics.evaluate([_result("pose", 0.6, 0.5), _result("lighting", 0.2, 0.5)],
                               extractor=shift_extractor)
    text = rep.to_text()
    assert text.startswith("# " + evalmetrics.HEADER)
    for col in evalmetrics.COLUMNS:
        assert col in text
    assert rep.aggregates["pose"]["apd"] == pytest.approx(0.1)
    assert "apd" not in rep.aggregates["lighting"]
    data = rep.to_dict()
    assert data["fit_budget"] == evalmetrics.DEFAULT_BUDGET and len(data["per_sample"]) == 2
    assert math.isfinite(rep.overall["id_l2"])


@pytest.fixture(scope="module")
def face_pair():
    pair = synthgen.generate_pair(8, 0, (48, 48))
    return pair


def test_perfect_edit_scores(face_pair):
    p = face_pair.target_params
    img = face3d.render(p, (48, 48)).image

    def oracle(image, known, free, budget):
        return evalmetrics.extract_coeffs(image, known, free, budget, oracle_init=True)

    for mode in ("pose", "expression", "lighting", "combined"):
        row = evalmetrics.evaluate_one(EditResult(mode, img, img, p, p), budget=40, extractor=oracle)
        for key, val in row.items():
            if key == "ssim":
                assert val == 1.0
            elif key not in ("name", "mode"):
                assert val == 0.0, (mode, key)


def test_extract_coeffs_recovers_pose():
    p = synthgen.generate_pair(9, 1, (64, 64)).target_params
    img = face3d.render(p).image
    fit = evalmetrics.extract_coeffs(img, p, {"pose"}, 2000)
    assert np.abs(fit.pose - p.pose).max() < 0.03
    # the non-free groups are passed through untouched
    assert np.array_equal(fit.expr, p.expr) and np.array_equal(fit.light, p.light)


def test_id_distance(face_pair):
    p = face_pair.source_params
    img = face3d.render(p, (48, 48)).image
    other = synthgen.generate_pair(77, 0, (48, 48)).source_params
    near = evalmetrics.id_distance(img, p, budget=600)
    far = float(np.linalg.norm(np.concatenate([other.shape - p.shape, other.albedo - p.albedo])))
    assert near < far
