"""Edit-quality metrics using the renderer fit as coefficient extractor."""
from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import signal

from . import face3d
from .face3d import FaceParams
from .imageio import write_json

DEFAULT_BUDGET = 2000
COLUMNS = ("ID l2", "SSIM", "APD", "P-RMSE", "AED", "E-RMSE", "ALD", "L-RMSE")
_KEYS = ("id_l2", "ssim", "apd", "p_rmse", "aed", "e_rmse", "ald", "l_rmse")
COLUMN_OF = dict(zip(_KEYS, COLUMNS))
MODE_METRICS = {
    "pose": ("pose", "apd", "p_rmse"),
    "expression": ("expr", "aed", "e_rmse"),
    "lighting": ("light", "ald", "l_rmse"),
}
HEADER = ("Coefficients come from analysis-by-synthesis fits against the built-in renderer; "
          "values are internally consistent but not comparable with numbers from pre-trained extractors.")
EMPTY_MARKER = "EMPTY REPORT: no edit results"


def _vectors(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def mean_l1(a, b) -> float:
    a, b = _vectors(a, b)
    return float(np.mean(np.abs(a - b))) if a.size else 0.0


def rmse(a, b) -> float:
    a, b = _vectors(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2))) if a.size else 0.0


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(x, y, data_range: float = 1.0, window: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < window:
        raise ValueError(f"image smaller than the {window}x{window} window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    w = gaussian_window(window, sigma)
    maps = []
    for ch in range(x.shape[2]):
        a, b = x[..., ch], y[..., ch]

        def filt(img):
            return signal.correlate2d(img, w, mode="valid")

        mu_a, mu_b = filt(a), filt(b)
        var_a = filt(a * a) - mu_a ** 2
        var_b = filt(b * b) - mu_b ** 2
        cov = filt(a * b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        maps.append(num / den)
    return np.stack(maps, -1)


def ssim(x, y, data_range: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    if np.array_equal(x, np.asarray(y, dtype=np.float64)):
        return 1.0  # exact by definition; sidesteps float noise in var - var
    return float(ssim_map(x, y, data_range).mean())


def masked_ssim(x, y, face_mask) -> float:
    """SSIM with the face region zeroed in both images."""
    keep = ~np.asarray(face_mask, bool)[..., None]
    return ssim(np.asarray(x, dtype=np.float64) * keep, np.asarray(y, dtype=np.float64) * keep)


# ---------------------------------------------------------------- extraction

def extract_coeffs(image, known: FaceParams, free_groups, budget: int = DEFAULT_BUDGET,
                   oracle_init: bool = False) -> FaceParams:
    """Fit ``free_groups`` on ``image`` with the remaining groups fixed to ``known``.

    Free groups start from neutral unless ``oracle_init`` (then from ``known``).
    """
    free_groups = set(free_groups)
    start = known.copy()
    if not oracle_init:
        neutral = FaceParams.neutral()
        start = start.replace(**{g: getattr(neutral, g) for g in free_groups})
    image = np.nan_to_num(np.asarray(image, dtype=np.float64), nan=0.0)
    return face3d.fit_params(image, start, free_groups, budget)


def id_distance(gen_image, source_params: FaceParams, known: FaceParams | None = None,
                budget: int = DEFAULT_BUDGET, free_attributes=()) -> float:
    """l2 between fitted (shape, albedo) of ``gen_image`` and the source identity.

    ``known`` supplies expr/pose/light for the fit (default: the source's);
    groups in ``free_attributes`` are fitted jointly with the identity.
    """
    known = known or source_params
    fitted = extract_coeffs(gen_image, known, {"shape", "albedo", *free_attributes}, budget)
    a = np.concatenate([fitted.shape, fitted.albedo])
    b = np.concatenate([source_params.shape, source_params.albedo])
    return float(np.linalg.norm(a - b))


# ---------------------------------------------------------------- evaluation

@dataclasses.dataclass
class EditResult:
    mode: str
    edited_image: np.ndarray
    reference_image: np.ndarray
    source_params: FaceParams
    reference_params: FaceParams  # ground truth of the reference; fixes the non-fitted groups
    face_mask: np.ndarray | None = None
    name: str = ""


@dataclasses.dataclass
class MetricsReport:
    per_sample: list
    aggregates: dict  # mode -> {metric: mean}
    overall: dict  # metric -> mean over every sample carrying it
    budget: int
    empty: bool = False

    def to_dict(self) -> dict:
        return {"header": HEADER, "empty": self.empty, "fit_budget": self.budget,
                "columns": dict(COLUMN_OF), "overall": self.overall,
                "aggregates": self.aggregates, "per_sample": self.per_sample}

    def to_text(self) -> str:
        lines = [f"# {HEADER}", f"# fit budget: {self.budget} renders"]
        if self.empty:
            lines.append(EMPTY_MARKER)
            return "\n".join(lines) + "\n"
        names = ["mode"] + list(COLUMNS)
        rows = [names]
        for mode in sorted(self.aggregates):
            agg = self.aggregates[mode]
            rows.append([mode] + [_fmt(agg.get(k)) for k in _KEYS])
        rows.append(["all"] + [_fmt(self.overall.get(k)) for k in _KEYS])
        widths = [max(len(r[i]) for r in rows) for i in range(len(names))]
        for r in rows:
            lines.append("  ".join(cell.rjust(w) for cell, w in zip(r, widths)))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "report.json", self.to_dict())
        (out_dir / "report.txt").write_text(self.to_text())
        return out_dir / "report.json", out_dir / "report.txt"


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def _mean_table(rows: Sequence[dict]) -> dict:
    out = {}
    for key in _KEYS:
        vals = sorted(r[key] for r in rows if key in r)  # sorted: order-independent sum
        if vals:
            out[key] = math.fsum(vals) / len(vals)
    return out


def evaluate_one(result: EditResult, budget: int = DEFAULT_BUDGET,
                 extractor: Callable | None = None) -> dict:
    extractor = extractor or extract_coeffs
    if result.mode not in ("pose", "expression", "lighting", "combined"):
        raise ValueError(f"unknown mode {result.mode!r}")
    row = {"name": result.name, "mode": result.mode}
    ref = result.reference_params
    routed = [result.mode] if result.mode != "combined" else list(MODE_METRICS)
    free = {MODE_METRICS[m][0] for m in routed}
    # identical procedure on both images so a perfect edit scores exactly zero
    fit_gen = extractor(result.edited_image, ref, free, budget)
    fit_ref = extractor(result.reference_image, ref, free, budget)
    for m in routed:
        group, l1_key, rmse_key = MODE_METRICS[m]
        a, b = getattr(fit_gen, group), getattr(fit_ref, group)
        row[l1_key] = mean_l1(a, b)
        row[rmse_key] = rmse(a, b)
    if result.mode in ("expression", "lighting"):
        mask = result.face_mask
        if mask is None:
            mask = face3d.render(result.source_params, np.asarray(result.edited_image).shape[:2]).mask
        row["ssim"] = masked_ssim(result.edited_image, result.reference_image, mask)
    id_fit = extractor(result.edited_image, ref, {"shape", "albedo"}, budget)
    row["id_l2"] = float(np.linalg.norm(np.concatenate([id_fit.shape - result.source_params.shape,
                                                       id_fit.albedo - result.source_params.albedo])))
    return row


def evaluate(results: Sequence[EditResult], budget: int = DEFAULT_BUDGET,
             extractor: Callable | None = None) -> MetricsReport:
    if not results:
        return MetricsReport([], {}, {}, budget, empty=True)
    rows = [evaluate_one(r, budget, extractor) for r in results]
    modes = sorted({r["mode"] for r in rows})
    aggregates = {m: _mean_table([r for r in rows if r["mode"] == m]) for m in modes}
    return MetricsReport(rows, aggregates, _mean_table(rows), budget)


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
