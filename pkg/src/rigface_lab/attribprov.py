"""Builds the three conditions the denoiser sees: a pose+light rendering, a
background image with the head region filled, and the expression vector."""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import face3d
from .face3d import FaceParams
from .imageio import read_json, save_png, write_json

GRAY = 0.5
BLACK = 0.0
MODES = ("expression", "pose", "lighting", "combined")
BACKGROUND_MODES = ("training",) + MODES
_MODE_GROUPS = {"expression": {"expr"}, "pose": {"pose"}, "lighting": {"light"}}


@dataclasses.dataclass
class ProviderConfig:
    expression_mode: str = "oracle"  # or "fitted"
    rendering_expression: str = "neutral"  # or "target"
    foreground: str = "gray"  # or "black"
    fit_budget: int = 2000

    def __post_init__(self):
        if self.expression_mode not in ("oracle", "fitted"):
            raise ValueError(f"expression_mode must be oracle|fitted, got {self.expression_mode!r}")
        if self.rendering_expression not in ("neutral", "target"):
            raise ValueError(f"rendering_expression must be neutral|target, got {self.rendering_expression!r}")
        if self.foreground not in ("gray", "black"):
            raise ValueError(f"foreground must be gray|black, got {self.foreground!r}")

    @property
    def fill_value(self) -> float:
        return GRAY if self.foreground == "gray" else BLACK


@dataclasses.dataclass
class ConditionSet:
    rendering: np.ndarray
    background: np.ndarray
    expr: np.ndarray
    fill_mask: np.ndarray | None = None  # region that was filled, kept for inspection

    def save(self, directory, stem: str = "cond") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_png(directory / f"{stem}_rendering.png", self.rendering)
        save_png(directory / f"{stem}_background.png", self.background)
        if self.fill_mask is not None:
            save_png(directory / f"{stem}_fill.png", self.fill_mask.astype(np.float64))
        write_json(directory / f"{stem}_expr.json", {"expr": self.expr.tolist()})

    @staticmethod
    def load_expr(directory, stem: str = "cond") -> np.ndarray:
        return np.asarray(read_json(Path(directory) / f"{stem}_expr.json")["expr"], dtype=np.float64)


@dataclasses.dataclass
class EditRequest:
    mode: str
    source_params: FaceParams
    target_attribute: dict

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown edit mode {self.mode!r}; expected one of {MODES}")
        groups = set(self.target_attribute)
        unknown = groups - {"expr", "pose", "light"}
        if unknown:
            raise ValueError(f"target_attribute has unsupported groups {sorted(unknown)}")
        if self.mode == "combined":
            if not groups:
                raise ValueError("combined edit needs at least one target attribute")
        elif groups != _MODE_GROUPS[self.mode]:
            raise ValueError(f"mode {self.mode!r} edits {sorted(_MODE_GROUPS[self.mode])}, got {sorted(groups)}")

    def edited_params(self) -> FaceParams:
        return self.source_params.replace(**self.target_attribute)


def expression_condition(target_params: FaceParams, mode: str = "oracle", image=None,
                         known: FaceParams | None = None, budget: int = 2000) -> np.ndarray:
    """psi for the target face.

    Fitted mode re-estimates expr from ``image`` (default: a render of the
    target) with every other group taken from ``known`` (default: target).
    """
    if mode == "oracle":
        return target_params.expr.copy()
    if mode != "fitted":
        raise ValueError(f"unknown expression mode {mode!r}")
    if image is None:
        image = face3d.render(target_params).image
    known = (known or target_params).replace(expr=np.zeros(face3d.N_EXPR))
    return face3d.fit_params(image, known, {"expr"}, budget).expr


def pose_light_condition(pose, light, geometry_params: FaceParams, size=(64, 64),
                         rendering_expression: str = "neutral") -> np.ndarray:
    """Render the identity at ``pose``/``light``.  Expression is zeroed unless
    ``rendering_expression == 'target'``, in which case geometry_params.expr is kept."""
    expr = geometry_params.expr if rendering_expression == "target" else np.zeros(face3d.N_EXPR)
    p = geometry_params.replace(pose=pose, light=light, expr=expr)
    return face3d.render(p, size).image


def mask_union(mask_a: np.ndarray, mask_b: np.ndarray) -> np.ndarray:
    mask_a, mask_b = np.asarray(mask_a, bool), np.asarray(mask_b, bool)
    if mask_a.shape != mask_b.shape:
        raise ValueError(f"mask shapes differ: {mask_a.shape} vs {mask_b.shape}")
    return mask_a | mask_b


def fill_region(source_mask, target_mask, mode: str) -> np.ndarray:
    if mode not in BACKGROUND_MODES:
        raise ValueError(f"unknown background mode {mode!r}; expected one of {BACKGROUND_MODES}")
    if mode in ("expression", "lighting"):
        return np.asarray(source_mask, bool).copy()
    return mask_union(source_mask, target_mask)


def background_condition(target_image, source_mask, target_mask, mode: str,
                         fill: float = GRAY) -> np.ndarray:
    target_image = np.asarray(target_image, dtype=np.float64)
    region = fill_region(source_mask, target_mask, mode)
    if region.shape != target_image.shape[:2]:
        raise ValueError(f"mask shape {region.shape} does not match image {target_image.shape[:2]}")
    out = target_image.copy()
    out[region] = fill
    return out


def _training_conditions(pair, config: ProviderConfig) -> ConditionSet:
    tgt = pair.target_params
    size = pair.target_image.shape[:2]
    rendering = pose_light_condition(tgt.pose, tgt.light, tgt, size, config.rendering_expression)
    region = fill_region(pair.source_mask, pair.target_mask, "training")
    background = background_condition(pair.target_image, pair.source_mask, pair.target_mask,
                                      "training", config.fill_value)
    if config.expression_mode == "fitted":
        expr = expression_condition(tgt, "fitted", face3d.render(tgt, size).image, budget=config.fit_budget)
    else:
        expr = tgt.expr.copy()
    return ConditionSet(rendering, background, expr, region)


def _inference_conditions(request: EditRequest, source_image, config: ProviderConfig) -> ConditionSet:
    if source_image is None:
        raise ValueError("inference conditions need the source image (it supplies the background)")
    src = request.source_params
    edited = request.edited_params()
    size = np.asarray(source_image).shape[:2]
    rendering = pose_light_condition(edited.pose, edited.light, edited, size, config.rendering_expression)
    source_mask = face3d.render(src, size).mask
    if request.mode in ("pose", "combined"):
        # predicted target silhouette: the edited pose on the source's geometry
        target_mask = face3d.render(edited, size).mask
    else:
        target_mask = source_mask
    region = fill_region(source_mask, target_mask, request.mode)
    background = background_condition(source_image, source_mask, target_mask, request.mode, config.fill_value)
    expr = edited.expr.copy() if request.mode in ("expression", "combined") else src.expr.copy()
    return ConditionSet(rendering, background, expr, region)


def build_conditions(item, mode: str = "training", source_image=None,
                     config: ProviderConfig | None = None) -> ConditionSet:
    """Training pair -> conditions from the target; EditRequest -> conditions
    from the source with one attribute group overwritten."""
    config = config or ProviderConfig()
    if isinstance(item, EditRequest):
        if mode not in ("training", item.mode):
            raise ValueError(f"mode {mode!r} disagrees with request mode {item.mode!r}")
        return _inference_conditions(item, source_image, config)
    if mode != "training":
        raise ValueError("training pairs only support mode='training'")
    return _training_conditions(item, config)
