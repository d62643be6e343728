import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigface_lab import face3d
from rigface_lab.face3d import FaceParams

Y00 = 1.0 / (2.0 * np.sqrt(np.pi))


def random_params(rng, pose_scale=0.4):
    light = np.concatenate([[rng.uniform(0.7, 1.3)], rng.uniform(-0.3, 0.3, 8)])
    return FaceParams(rng.uniform(-1, 1, 8), rng.uniform(0.2, 0.9, 3), rng.uniform(-1, 1, 8),
                      rng.uniform(-pose_scale, pose_scale, 3), light)


# ---- template / mesh

def test_template_deterministic():
    a, sa, ea = face3d.build_template(0)
    b, sb, eb = face3d.build_template(0)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(sa, sb) and np.array_equal(ea, eb)


def test_template_seeds_differ():
    _, s0, e0 = face3d.build_template(0)
    _, s1, e1 = face3d.build_template(1)
    assert np.abs(s0 - s1).max() > 0
    assert np.abs(e0 - e1).max() > 0


@pytest.mark.parametrize("seed", [0, 1, 17, 12345])
def test_basis_displacement_cap(seed):
    mesh, shape_b, expr_b = face3d.build_template(seed)
    cap = 0.3 * face3d.HEAD_RADIUS
    assert np.linalg.norm(shape_b, axis=-1).max() <= cap + 1e-12
    assert np.linalg.norm(expr_b, axis=-1).max() <= cap + 1e-12
    assert shape_b.shape == (face3d.N_SHAPE, len(mesh.vertices), 3)
    assert 2000 <= len(mesh.vertices) <= 3000


def test_mesh_invariants():
    mesh = face3d.build_mesh(random_params(np.random.default_rng(0)))
    assert mesh.faces.max() < len(mesh.vertices)
    assert np.allclose(np.linalg.norm(mesh.vertex_normals, axis=1), 1.0, atol=1e-5)


def test_neutral_mesh_is_template():
    model = face3d.default_model()
    mesh = face3d.build_mesh(FaceParams.neutral())
    assert np.array_equal(mesh.vertices, model.template.vertices)


def test_pose_periodicity():
    p = random_params(np.random.default_rng(1)).replace(pose=np.zeros(3))
    a = face3d.build_mesh(p).vertices
    b = face3d.build_mesh(p.replace(pose=np.array([2 * np.pi, 0, 0]))).vertices
    assert np.abs(a - b).max() < 1e-6


def test_expression_basis_algebra():
    model = face3d.default_model()
    rng = np.random.default_rng(2)
    p = random_params(rng).replace(pose=np.zeros(3), expr=np.zeros(8))
    e1 = np.zeros(8)
    e1[0] = 1.0
    diff = face3d.build_mesh(p.replace(expr=e1)).vertices - face3d.build_mesh(p).vertices
    assert np.allclose(diff, model.expr_basis[0], atol=1e-12)


def test_blendshape_linearity():
    base = face3d.build_mesh(FaceParams.neutral()).vertices
    ej = np.zeros(8)
    ej[3] = 1.0
    d1 = face3d.build_mesh(FaceParams.neutral().replace(expr=0.4 * ej)).vertices - base
    d2 = face3d.build_mesh(FaceParams.neutral().replace(expr=-1.3 * ej)).vertices - base
    assert np.abs(d2 - (-1.3 / 0.4) * d1).max() < 1e-6


def test_rotation_is_yaw_pitch_roll():
    yaw, pitch, roll = 0.3, -0.2, 0.1
    R = face3d.rotation_matrix([yaw, pitch, roll])
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    assert np.allclose(R, Ry @ Rx @ Rz)
    assert np.allclose(R @ R.T, np.eye(3))


# ---- shading

def test_sh_band0():
    light = np.zeros(9)
    light[0] = 1.0
    for n in ([0, 0, 1], [1, 0, 0], [0.6, 0, 0.8]):
        assert face3d.sh_irradiance(np.array(n, float), light) == pytest.approx(0.2820948, abs=1e-7)


def test_sh_zero_light():
    assert face3d.sh_irradiance(np.array([0.0, 1.0, 0.0]), np.zeros(9)) == 0.0


@pytest.mark.parametrize("c", [0.7, -0.7])
def test_sh_band1_z(c):
    light = np.zeros(9)
    light[2] = c
    assert face3d.sh_irradiance(np.array([0.0, 0.0, 1.0]), light) == pytest.approx(max(0.0, c * 0.4886025), abs=1e-7)


def test_sh_basis_orthonormal():
    # Monte Carlo over the sphere: <Y_i, Y_j> ~ delta_ij
    rng = np.random.default_rng(0)
    n = rng.normal(size=(400000, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    Y = face3d.sh_basis(n)
    gram = 4 * np.pi * (Y.T @ Y) / len(n)
    assert np.abs(gram - np.eye(9)).max() < 0.02


def test_sh_rejects_non_unit():
    with pytest.raises(ValueError):
        face3d.sh_irradiance(np.array([0.0, 0.0, 1.1]), np.ones(9))


# ---- render

def test_render_band0_constant():
    p = random_params(np.random.default_rng(3)).replace(albedo=np.full(3, 0.5),
                                                        light=np.eye(9)[0])
    out = face3d.render(p)
    vals = out.image[out.mask]
    assert out.mask.any()
    assert np.abs(vals - 0.5 * Y00).max() < 1e-5
    assert vals.max() - vals.min() < 1e-5


def test_render_zero_light_and_background():
    p = random_params(np.random.default_rng(4))
    out = face3d.render(p.replace(light=np.zeros(9)))
    assert np.all(out.image == 0)
    lit = face3d.render(p)
    assert np.all(lit.image[~lit.mask] == 0)
    assert lit.image.min() >= 0 and lit.image.max() <= 1


def test_render_deterministic():
    p = random_params(np.random.default_rng(5))
    a, b = face3d.render(p, (48, 40)), face3d.render(p, (48, 40))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.image.shape == (48, 40, 3) and a.mask.shape == (48, 40)


def test_render_too_small():
    with pytest.raises(ValueError):
        face3d.render(FaceParams.neutral(), (8, 64))


def test_mask_nonempty_over_yaw():
    for yaw in np.linspace(-1.5, 1.5, 7):
        assert face3d.render(FaceParams.neutral().replace(pose=np.array([yaw, 0, 0]))).mask.any()


def test_mask_centroid_monotone_in_yaw():
    xs = []
    for yaw in np.linspace(0, 0.3, 7):
        m = face3d.render(FaceParams.neutral().replace(pose=np.array([yaw, 0, 0]))).mask
        xs.append(np.nonzero(m)[1].mean())
    assert np.all(np.diff(xs) > 0)


def test_degenerate_faces_skipped():
    mesh = face3d.build_mesh(FaceParams.neutral())
    faces = mesh.faces.copy()
    faces[:50, 1] = faces[:50, 0]  # collapse 50 triangles
    out = face3d.shade(face3d.Mesh(mesh.vertices, faces, mesh.vertex_normals), np.full(3, 0.5),
                       np.eye(9)[0], 32, 32)
    assert np.all(np.isfinite(out.image))


def test_rasterizer_against_point_in_triangle():
    # brute-force coverage oracle on a single front-facing triangle
    verts = np.array([[-0.9, -0.7, 0.0], [0.8, -0.5, 0.0], [0.1, 0.9, 0.0]])
    mesh = face3d.Mesh(verts, np.array([[0, 1, 2]]), np.tile([0.0, 0.0, 1.0], (3, 1)))
    H = W = 20
    pid, _, _ = face3d.rasterize(mesh, H, W)
    got = np.zeros(H * W, bool)
    got[pid] = True
    px = face3d._to_pixels(verts, H, W)[:, :2]
    expected = np.zeros((H, W), bool)
    for i in range(H):
        for j in range(W):
            p = np.array([j + 0.5, i + 0.5])
            s = []
            for a, b in ((0, 1), (1, 2), (2, 0)):
                e, q = px[b] - px[a], p - px[a]
                s.append(e[0] * q[1] - e[1] * q[0])
            s = np.array(s)
            expected[i, j] = np.all(s >= 0) or np.all(s <= 0)
    # pixels on an edge may go either way; interior must agree
    assert (got.reshape(H, W) != expected).sum() <= 2


def test_write_obj(tmp_path):
    mesh = face3d.build_mesh(FaceParams.neutral())
    path = tmp_path / "m.obj"
    face3d.write_obj(mesh, path)
    text = path.read_text()
    assert text.count("\nv ") + text.startswith("v ") == len(mesh.vertices)


# ---- params

@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=31, max_size=31))
def test_params_json_roundtrip(vals):
    v = np.array(vals)
    p = FaceParams(v[:8], np.clip(v[8:11], 0, 1), v[11:19], v[19:22], v[22:31])
    assert FaceParams.from_json(p.to_json()) == p
    assert json.loads(p.to_json()).keys() == set(face3d.GROUPS)


def test_params_validate():
    FaceParams.neutral().validate()
    with pytest.raises(ValueError):
        FaceParams.neutral().replace(albedo=np.array([1.2, 0, 0])).validate()
    with pytest.raises(ValueError):
        FaceParams.neutral().replace(pose=np.array([4.0, 0, 0])).validate()
    with pytest.raises(ValueError):
        FaceParams.neutral().replace(expr=np.full(8, np.nan)).validate()


# ---- fitter

def test_fit_identity_case():
    p = random_params(np.random.default_rng(6))
    img = face3d.render(p).image
    res = face3d.fit_params(img, p, {"expr", "pose"}, 50, return_result=True)
    assert res.residual == 0.0
    assert res.params == p


def test_fit_budget_and_monotone_history():
    p = random_params(np.random.default_rng(7))
    img = face3d.render(p).image
    res = face3d.fit_params(img, p.replace(expr=np.zeros(8)), {"expr"}, 120, return_result=True)
    assert res.evaluations <= 120
    assert len(res.history) == res.evaluations
    assert np.all(np.diff(res.history) <= 0)


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        face3d.fit_params(np.zeros((32, 32, 3)), FaceParams.neutral(), {"expr"}, 0)
    with pytest.raises(ValueError):
        face3d.fit_params(np.zeros((32, 32, 3)), FaceParams.neutral(), {"colour"}, 10)


def test_fit_noise_image_finite():
    img = np.random.default_rng(8).uniform(size=(32, 32, 3))
    res = face3d.fit_params(img, FaceParams.neutral(), {"pose", "light"}, 150, return_result=True)
    assert res.residual > 0
    for g in face3d.GROUPS:
        assert np.all(np.isfinite(getattr(res.params, g)))


def test_fit_pose_recovery():
    p = random_params(np.random.default_rng(9))
    img = face3d.render(p).image
    fit = face3d.fit_params(img, p.replace(pose=np.zeros(3)), {"pose"}, 2000)
    assert np.abs(fit.pose - p.pose).max() < 0.03


def test_fit_expression_recovery_soft():
    # soft criterion: report the failures, require most draws to recover
    errors = []
    for seed in range(4):
        p = random_params(np.random.default_rng(100 + seed))
        img = face3d.render(p).image
        fit = face3d.fit_params(img, p.replace(expr=np.zeros(8)), {"expr"}, 2000)
        errors.append(np.abs(fit.expr - p.expr).max())
    print("expr recovery l_inf errors:", np.round(errors, 4))
    assert sum(e < 0.05 for e in errors) >= 3
