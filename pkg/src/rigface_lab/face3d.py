"""A small procedural 3D morphable face model.

The head is an ellipsoidal UV sphere deformed by linear identity and
expression blendshapes, rotated by (yaw, pitch, roll), shaded with 9
spherical-harmonics coefficients under a Lambertian model and drawn by
an orthographic z-buffer rasterizer.  ``fit_params`` recovers parameters
from an image by analysis-by-synthesis.
"""
from __future__ import annotations

import dataclasses
import functools
import json
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize

N_SHAPE = 8
N_EXPR = 8
N_SH = 9
HEAD_RADIUS = 1.0
# width of the square world window mapped onto the image, in world units
VIEW_EXTENT = 2.8
GROUPS = ("shape", "albedo", "expr", "pose", "light")

_N_RINGS = 48
_N_SEGMENTS = 52
_SEMI_AXES = np.array([0.78, 1.0, 0.86]) * HEAD_RADIUS
# head centre sits in front of the rotation pivot (the neck), so yaw
# translates the silhouette as well as turning it
_HEAD_CENTER = np.array([0.0, 0.05, 0.3])
_MAX_DISPLACEMENT = 0.3 * HEAD_RADIUS

# real SH normalisation constants, bands 0..2
_SH_C0 = 0.5 / np.sqrt(np.pi)
_SH_C1 = np.sqrt(3.0 / (4.0 * np.pi))
_SH_C2 = 0.5 * np.sqrt(15.0 / np.pi)
_SH_C3 = 0.25 * np.sqrt(5.0 / np.pi)
_SH_C4 = 0.25 * np.sqrt(15.0 / np.pi)


@dataclasses.dataclass
class FaceParams:
    """Complete generative description of one rendered face."""

    shape: np.ndarray
    albedo: np.ndarray
    expr: np.ndarray
    pose: np.ndarray
    light: np.ndarray

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(N_SHAPE)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        self.expr = np.asarray(self.expr, dtype=np.float64).reshape(N_EXPR)
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3)
        self.light = np.asarray(self.light, dtype=np.float64).reshape(N_SH)

    @classmethod
    def neutral(cls) -> "FaceParams":
        light = np.zeros(N_SH)
        light[0] = 1.0
        return cls(np.zeros(N_SHAPE), np.full(3, 0.5), np.zeros(N_EXPR), np.zeros(3), light)

    def validate(self) -> None:
        for name in GROUPS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"FaceParams.{name} has non-finite entries")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")
        if np.any(np.abs(self.pose) > np.pi):
            raise ValueError("pose angles must lie in [-pi, pi]")

    def replace(self, **groups) -> "FaceParams":
        fields = {name: getattr(self, name).copy() for name in GROUPS}
        fields.update(groups)
        return FaceParams(**fields)

    def copy(self) -> "FaceParams":
        return self.replace()

    def to_dict(self) -> dict:
        return {name: getattr(self, name).tolist() for name in GROUPS}

    @classmethod
    def from_dict(cls, d: dict) -> "FaceParams":
        missing = [g for g in GROUPS if g not in d]
        if missing:
            raise KeyError(f"missing parameter groups: {missing}")
        return cls(**{g: d[g] for g in GROUPS})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FaceParams":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, FaceParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, g), getattr(other, g)) for g in GROUPS)


@dataclasses.dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray

    def to_obj(self) -> str:
        lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in self.vertices]
        lines += [f"vn {x:.6f} {y:.6f} {z:.6f}" for x, y, z in self.vertex_normals]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in self.faces + 1]
        return "\n".join(lines) + "\n"


@dataclasses.dataclass
class RenderOutput:
    image: np.ndarray
    mask: np.ndarray


@dataclasses.dataclass
class FaceModel:
    """Template mesh plus identity and expression bases."""

    template: Mesh
    shape_basis: np.ndarray
    expr_basis: np.ndarray


def _sphere_directions() -> tuple[np.ndarray, np.ndarray]:
    theta = np.pi * np.arange(1, _N_RINGS + 1) / (_N_RINGS + 1)
    phi = 2.0 * np.pi * np.arange(_N_SEGMENTS) / _N_SEGMENTS
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.sin(ph), np.cos(th), np.sin(th) * np.cos(ph)], -1).reshape(-1, 3)
    dirs = np.concatenate([[[0.0, 1.0, 0.0]], dirs, [[0.0, -1.0, 0.0]]])

    def ring(i, j):
        return 1 + i * _N_SEGMENTS + (j % _N_SEGMENTS)

    faces = []
    bottom = len(dirs) - 1
    for j in range(_N_SEGMENTS):
        faces.append((0, ring(0, j), ring(0, j + 1)))
        faces.append((bottom, ring(_N_RINGS - 1, j + 1), ring(_N_RINGS - 1, j)))
    for i in range(_N_RINGS - 1):
        for j in range(_N_SEGMENTS):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    return dirs, np.array(faces, dtype=np.int64)


def _gaussian_bumps(dirs: np.ndarray, centers: np.ndarray, widths: np.ndarray,
                    signs: np.ndarray) -> np.ndarray:
    d2 = ((dirs[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return (signs[None, :] * np.exp(-d2 / (2.0 * widths[None, :] ** 2))).sum(-1)


def _mirror_x(v: np.ndarray) -> np.ndarray:
    return v * np.array([-1.0, 1.0, 1.0])


def _random_unit(rng: np.random.Generator, n: int, front: bool) -> np.ndarray:
    out = []
    while len(out) < n:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        if front and v[2] < 0.45:
            continue
        out.append(v)
    return np.array(out)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    fn = np.cross(v1 - v0, v2 - v0)
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(norm, 1e-12)


def _basis(rng, dirs, template_normals, centers, width_range, amp_range):
    """One smooth displacement field, symmetric about the x=0 plane."""
    centers = centers + rng.normal(scale=0.06, size=centers.shape)
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    n_bumps = len(centers)
    centers = np.concatenate([centers, _mirror_x(centers)])
    widths = np.tile(rng.uniform(*width_range, n_bumps), 2)
    signs = np.tile(rng.choice([-1.0, 1.0], n_bumps), 2)
    field = _gaussian_bumps(dirs, centers, widths, signs)
    field *= rng.uniform(*amp_range) / np.abs(field).max()
    disp = field[:, None] * template_normals
    peak = np.linalg.norm(disp, axis=1).max()
    if peak > _MAX_DISPLACEMENT:
        disp *= _MAX_DISPLACEMENT / peak
    return disp


# anchor directions of the expression regions (right half; mirrored in x):
# brow, eye, cheek, nose wing, mouth corner, upper lip, lower lip, chin
_EXPR_ANCHORS = np.array([
    [0.35, 0.45, 0.82], [0.35, 0.2, 0.92], [0.55, -0.15, 0.82], [0.18, -0.05, 0.98],
    [0.3, -0.45, 0.84], [0.08, -0.32, 0.95], [0.08, -0.55, 0.83], [0.1, -0.8, 0.6],
])


def build_template(seed: int) -> tuple[Mesh, np.ndarray, np.ndarray]:
    """Template head mesh and (shape_basis, expr_basis) for ``seed``."""
    rng = np.random.default_rng(seed)
    dirs, faces = _sphere_directions()
    verts = dirs * _SEMI_AXES + _HEAD_CENTER
    # fixed nose and brow ridge so the template has a recognisable front
    sphere_normals = vertex_normals(verts, faces)
    nose = _gaussian_bumps(dirs, np.array([[0.0, -0.05, 1.0]]), np.array([0.16]), np.array([1.0]))
    brow = _gaussian_bumps(dirs, np.array([[-0.35, 0.35, 0.87], [0.35, 0.35, 0.87]]),
                           np.array([0.18, 0.18]), np.array([1.0, 1.0]))
    verts = verts + (0.16 * nose + 0.05 * brow)[:, None] * sphere_normals
    normals = vertex_normals(verts, faces)
    template = Mesh(verts, faces, normals)
    shape_basis = np.stack([_basis(rng, dirs, normals, _random_unit(rng, 2, False),
                                   (0.3, 0.5), (0.05, 0.09)) for _ in range(N_SHAPE)])
    expr_basis = np.stack([_basis(rng, dirs, normals, _EXPR_ANCHORS[k:k + 1],
                                  (0.14, 0.2), (0.12, 0.18)) for k in range(N_EXPR)])
    return template, shape_basis, expr_basis


@functools.lru_cache(maxsize=8)
def default_model(seed: int = 0) -> FaceModel:
    template, shape_basis, expr_basis = build_template(seed)
    for arr in (template.vertices, template.faces, template.vertex_normals, shape_basis, expr_basis):
        arr.setflags(write=False)
    return FaceModel(template, shape_basis, expr_basis)


def rotation_matrix(pose: Sequence[float]) -> np.ndarray:
    """R = R_yaw @ R_pitch @ R_roll (yaw about y, pitch about x, roll about z)."""
    yaw, pitch, roll = pose
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    r_yaw = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    r_roll = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return r_yaw @ r_pitch @ r_roll


def build_mesh(params: FaceParams, model: FaceModel | None = None) -> Mesh:
    model = model or default_model()
    base = (model.template.vertices
            + np.tensordot(params.shape, model.shape_basis, axes=1)
            + np.tensordot(params.expr, model.expr_basis, axes=1))
    verts = base @ rotation_matrix(params.pose).T
    faces = model.template.faces
    return Mesh(verts, faces, vertex_normals(verts, faces))


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Real SH basis up to band 2 evaluated at (..., 3) unit normals."""
    x, y, z = normals[..., 0], normals[..., 1], normals[..., 2]
    return np.stack([
        np.full_like(x, _SH_C0),
        _SH_C1 * y,
        _SH_C1 * z,
        _SH_C1 * x,
        _SH_C2 * x * y,
        _SH_C2 * y * z,
        _SH_C3 * (3.0 * z * z - 1.0),
        _SH_C2 * x * z,
        _SH_C4 * (x * x - y * y),
    ], axis=-1)


def sh_irradiance(normal, light) -> float:
    """Clamped irradiance sum_k light_k * Y_k(normal) for one unit normal."""
    normal = np.asarray(normal, dtype=np.float64)
    if normal.shape != (3,) or abs(np.linalg.norm(normal) - 1.0) > 1e-5:
        raise ValueError("normal must be a unit 3-vector")
    light = np.asarray(light, dtype=np.float64).reshape(N_SH)
    return float(max(0.0, sh_basis(normal) @ light))


def _to_pixels(vertices: np.ndarray, height: int, width: int) -> np.ndarray:
    scale = min(height, width) / VIEW_EXTENT
    u = vertices[:, 0] * scale + width / 2.0
    v = -vertices[:, 1] * scale + height / 2.0
    return np.stack([u, v], axis=1)


def rasterize(mesh: Mesh, height: int, width: int):
    """Z-buffer rasterization.

    Returns ``(pixel_ids, face_ids, bary)`` for every covered pixel, where
    ``pixel_ids`` index the flattened H*W grid and ``bary`` holds the
    barycentric weights of the winning face at the pixel centre.
    """
    verts, faces = mesh.vertices, mesh.faces
    v0, v1, v2 = (verts[faces[:, k]] for k in range(3))
    facing = np.cross(v1 - v0, v2 - v0)[:, 2]
    uv = _to_pixels(verts, height, width)
    p0, p1, p2 = (uv[faces[:, k]] for k in range(3))
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    keep = np.nonzero((facing > 0) & (np.abs(area) > 1e-12))[0]
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))
    if keep.size == 0:
        return empty
    p0, p1, p2, area = p0[keep], p1[keep], p2[keep], area[keep]
    tri = np.stack([p0, p1, p2], 1)
    # pixel centres sit at (j + 0.5, i + 0.5)
    jmin = np.clip(np.ceil(tri[..., 0].min(1) - 0.5), 0, width).astype(np.int64)
    jmax = np.clip(np.floor(tri[..., 0].max(1) - 0.5), -1, width - 1).astype(np.int64)
    imin = np.clip(np.ceil(tri[..., 1].min(1) - 0.5), 0, height).astype(np.int64)
    imax = np.clip(np.floor(tri[..., 1].max(1) - 0.5), -1, height - 1).astype(np.int64)
    bw = np.maximum(jmax - jmin + 1, 0)
    bh = np.maximum(imax - imin + 1, 0)
    counts = bw * bh
    total = int(counts.sum())
    if total == 0:
        return empty
    owner = np.repeat(np.arange(keep.size), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    jj = jmin[owner] + local % bw[owner]
    ii = imin[owner] + local // bw[owner]
    px, py = jj + 0.5, ii + 0.5
    a0, a1, a2 = p0[owner], p1[owner], p2[owner]
    inv = 1.0 / area[owner]
    w0 = ((a1[:, 0] - px) * (a2[:, 1] - py) - (a2[:, 0] - px) * (a1[:, 1] - py)) * inv
    w1 = ((a2[:, 0] - px) * (a0[:, 1] - py) - (a0[:, 0] - px) * (a2[:, 1] - py)) * inv
    w2 = 1.0 - w0 - w1
    inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
    owner, jj, ii = owner[inside], jj[inside], ii[inside]
    bary = np.stack([w0[inside], w1[inside], w2[inside]], 1)
    face_ids = keep[owner]
    zs = verts[faces[face_ids], 2]
    depth = (bary * zs).sum(1)
    pid = ii * width + jj
    # nearest fragment (largest z, camera on +z) wins; lexsort is stable
    order = np.lexsort((-depth, pid))
    pid, face_ids, bary = pid[order], face_ids[order], bary[order]
    first = np.ones(pid.size, dtype=bool)
    first[1:] = pid[1:] != pid[:-1]
    return pid[first], face_ids[first], bary[first]


def pixel_sh_basis(mesh: Mesh, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Covered pixel ids and the SH basis of the interpolated normal at each."""
    pid, face_ids, bary = rasterize(mesh, height, width)
    vn = mesh.vertex_normals[mesh.faces[face_ids]]
    n = (bary[:, :, None] * vn).sum(1)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    return pid, sh_basis(n)


def _compose(pid, basis, albedo, light, height, width) -> RenderOutput:
    image = np.zeros((height * width, 3))
    mask = np.zeros(height * width, dtype=bool)
    irradiance = np.maximum(basis @ np.asarray(light, dtype=np.float64), 0.0)
    image[pid] = np.clip(irradiance[:, None] * np.asarray(albedo)[None, :], 0.0, 1.0)
    mask[pid] = True
    return RenderOutput(image.reshape(height, width, 3), mask.reshape(height, width))


def shade(mesh: Mesh, albedo, light, height: int, width: int) -> RenderOutput:
    pid, basis = pixel_sh_basis(mesh, height, width)
    return _compose(pid, basis, albedo, light, height, width)


def render(params: FaceParams, size=(64, 64), model: FaceModel | None = None) -> RenderOutput:
    """Render ``params`` over a black background."""
    height, width = size
    if height < 16 or width < 16:
        raise ValueError("render size must be at least 16x16")
    return shade(build_mesh(params, model), params.albedo, params.light, height, width)


def write_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(mesh.to_obj())


_POSE_GRID = np.linspace(-0.6, 0.6, 7)
_INIT_STEP = {"shape": 0.3, "albedo": 0.1, "expr": 0.3, "pose": 0.08, "light": 0.15}
_GROUP_SIZE = {"shape": N_SHAPE, "albedo": 3, "expr": N_EXPR, "pose": 3, "light": N_SH}


class _BudgetExhausted(Exception):
    pass


@dataclasses.dataclass
class FitResult:
    params: FaceParams
    residual: float
    evaluations: int
    history: list  # best-so-far residual after each render


def _solve_light(pid, basis, albedo, image_flat):
    """Least-squares SH coefficients for fixed geometry and albedo (clamps ignored)."""
    if pid.size < N_SH:
        return None
    target = image_flat[pid] @ albedo
    gram = (albedo @ albedo) * (basis.T @ basis)
    light, *_ = np.linalg.lstsq(gram, basis.T @ target, rcond=None)
    return light


def fit_params(image: np.ndarray, known: FaceParams, free: Iterable[str], budget: int,
               model: FaceModel | None = None, return_result: bool = False):
    """Analysis-by-synthesis fit of the ``free`` parameter groups.

    Minimises the mean squared pixel error between ``image`` and the render
    of the candidate with Nelder-Mead (scipy), restarting from the incumbent
    with a shrinking simplex until ``budget`` renders are spent.  The free
    groups of ``known`` are the starting point.  When ``light`` is free it
    is first eliminated: each render solves it by linear least squares
    (irradiance is linear in the SH coefficients), so the simplex only
    searches the nonlinear groups; the remaining budget then polishes all
    free groups jointly.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    requested = set(free)
    if requested - set(GROUPS):
        raise ValueError(f"unknown parameter groups: {sorted(requested - set(GROUPS))}")
    free = [g for g in GROUPS if g in requested]
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[:2]
    image_flat = image.reshape(-1, 3)
    model = model or default_model()

    state = {"evals": 0, "best": np.inf, "best_params": known.copy()}
    history: list = []

    def unpack(x, groups, base):
        values, k = {}, 0
        for g in groups:
            n = _GROUP_SIZE[g]
            val = np.array(x[k:k + n], dtype=np.float64)
            if g == "albedo":
                val = np.clip(val, 0.0, 1.0)
            elif g == "pose":
                val = np.clip(val, -np.pi, np.pi)
            values[g] = val
            k += n
        return base.replace(**values)

    def evaluate(cand: FaceParams, solve_light: bool) -> float:
        if state["evals"] >= budget:
            raise _BudgetExhausted
        state["evals"] += 1
        pid, basis = pixel_sh_basis(build_mesh(cand, model), height, width)
        if solve_light:
            light = _solve_light(pid, basis, cand.albedo, image_flat)
            if light is not None and np.all(np.isfinite(light)):
                cand = cand.replace(light=light)
        out = _compose(pid, basis, cand.albedo, cand.light, height, width)
        err = float(np.mean((out.image - image) ** 2))
        if not np.isfinite(err):
            err = np.inf
        if err < state["best"]:
            state["best"], state["best_params"] = err, cand
        history.append(state["best"])
        return err

    def search(groups, solve_light, max_evals):
        if not groups:
            return
        stop_at = min(budget, state["evals"] + max_evals)
        steps = np.concatenate([np.full(_GROUP_SIZE[g], _INIT_STEP[g]) for g in groups])
        scale = 1.0
        while state["best"] > 0.0 and state["evals"] < stop_at:
            base = state["best_params"]
            start = np.concatenate([getattr(base, g) for g in groups])
            simplex = np.vstack([start, start + np.diag(steps * scale)])

            def objective(x):
                if state["evals"] >= stop_at:
                    raise _BudgetExhausted
                return evaluate(unpack(x, groups, base), solve_light)

            try:
                optimize.minimize(objective, start, method="Nelder-Mead",
                                  options={"initial_simplex": simplex, "maxfev": budget,
                                           "xatol": 1e-7, "fatol": 1e-14,
                                           "adaptive": len(start) > 6})
            except _BudgetExhausted:
                if state["evals"] >= budget:
                    raise
                return
            # alternate wide restarts (escape) with narrow ones (refine)
            scale = 1.0 if scale < 1.0 else 0.1

    try:
        evaluate(known.copy(), False)
        if "pose" in free:
            # coarse yaw/pitch grid guards the simplex against silhouette local minima
            for yaw in _POSE_GRID:
                for pitch in _POSE_GRID:
                    pose = np.array([yaw, pitch, known.pose[2]])
                    evaluate(state["best_params"].replace(pose=pose), "light" in free)
        if "light" in free:
            nonlinear = [g for g in free if g != "light"]
            evaluate(known.copy(), True)
            search(nonlinear, True, int(0.7 * budget))
        search(free, False, budget)
    except _BudgetExhausted:
        pass
    best = state["best_params"]
    if return_result:
        return FitResult(best, state["best"], state["evals"], history)
    return best
