"""Synthetic source/target pairs: same identity, new pose, expression,
lighting and background."""
from __future__ import annotations

import dataclasses
import hashlib
import os
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import face3d
from .face3d import FaceParams
from .imageio import load_png, read_json, save_png, write_json

YAW_PITCH_MAX = 0.5
ROLL_MAX = 0.2
L0_RANGE = (0.5, 1.5)
SH_HIGH_MAX = 0.4
ALBEDO_RANGE = (0.2, 0.9)
PAIR_FILES = ("source.png", "target.png", "source.json", "target.json")


@dataclasses.dataclass
class TrainingPair:
    source_image: np.ndarray
    target_image: np.ndarray
    source_params: FaceParams
    target_params: FaceParams
    source_mask: np.ndarray
    target_mask: np.ndarray
    background_id: int  # target background
    source_background_id: int


@dataclasses.dataclass
class DatasetManifest:
    seed: int
    count: int
    image_size: tuple
    split: str
    records: list

    def to_dict(self) -> dict:
        return {"seed": self.seed, "count": self.count, "image_size": list(self.image_size),
                "split": self.split, "records": [list(r) for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(d["seed"], d["count"], tuple(d["image_size"]), d["split"],
                   [tuple(r) for r in d["records"]])


def pair_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, pair index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def sample_identity(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    shape = rng.uniform(-1.0, 1.0, face3d.N_SHAPE)
    albedo = rng.uniform(*ALBEDO_RANGE, 3)
    return shape, albedo


def sample_attributes(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    expr = rng.uniform(-1.0, 1.0, face3d.N_EXPR)
    pose = np.array([rng.uniform(-YAW_PITCH_MAX, YAW_PITCH_MAX),
                     rng.uniform(-YAW_PITCH_MAX, YAW_PITCH_MAX),
                     rng.uniform(-ROLL_MAX, ROLL_MAX)])
    light = np.concatenate([[rng.uniform(*L0_RANGE)], rng.uniform(-SH_HIGH_MAX, SH_HIGH_MAX, face3d.N_SH - 1)])
    return expr, pose, light


def make_background(background_id: int, size) -> np.ndarray:
    """Smooth two-colour gradient plus low-frequency noise, fully determined by the id."""
    height, width = size
    rng = np.random.default_rng(int(background_id))
    c0, c1 = rng.uniform(0.1, 0.9, (2, 3))
    angle = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:height, 0:width]
    u = (xx + 0.5) / width - 0.5
    v = (yy + 0.5) / height - 0.5
    s = np.clip((np.cos(angle) * u + np.sin(angle) * v) / np.sqrt(0.5) + 0.5, 0.0, 1.0)
    image = c0 + (c1 - c0) * s[..., None]
    coarse = rng.normal(0.0, 0.08, (5, 5, 3))
    coords = np.stack([(yy + 0.5) / height * 4.0, (xx + 0.5) / width * 4.0])
    noise = np.stack([ndimage.map_coordinates(coarse[..., c], coords, order=1, mode="nearest")
                      for c in range(3)], -1)
    return np.clip(image + noise, 0.0, 1.0)


def composite(face: face3d.RenderOutput, background: np.ndarray) -> np.ndarray:
    return np.where(face.mask[..., None], face.image, background)


def _draw_background_id(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def sample_pair(identity, rng: np.random.Generator, size=(64, 64)) -> TrainingPair:
    shape, albedo = identity
    params, renders, bg_ids = [], [], []
    for _ in range(2):
        expr, pose, light = sample_attributes(rng)
        p = FaceParams(shape.copy(), albedo.copy(), expr, pose, light)
        params.append(p)
        renders.append(face3d.render(p, size))
        bg_ids.append(_draw_background_id(rng))
    while bg_ids[1] == bg_ids[0]:
        bg_ids[1] = _draw_background_id(rng)
    images = [composite(r, make_background(b, size)) for r, b in zip(renders, bg_ids)]
    return TrainingPair(images[0], images[1], params[0], params[1], renders[0].mask, renders[1].mask,
                        bg_ids[1], bg_ids[0])


def generate_pair(seed: int, index: int, size=(64, 64)) -> TrainingPair:
    rng = pair_rng(seed, index)
    return sample_pair(sample_identity(rng), rng, size)


def _params_record(params: FaceParams, background_id: int) -> dict:
    d = params.to_dict()
    d["background_id"] = int(background_id)
    return d


def build_dataset(seed: int, count: int, size, out_dir, split: str = "train") -> DatasetManifest:
    """Write ``count`` pairs under ``out_dir/pairs/<idx>/`` plus ``manifest.json``."""
    if split not in ("train", "eval"):
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    size = tuple(int(s) for s in size)
    out_dir = Path(out_dir)
    records = []
    for idx in range(count):
        pair = generate_pair(seed, idx, size)
        rel = Path("pairs") / f"{idx:05d}"
        pair_dir = out_dir / rel
        try:
            pair_dir.mkdir(parents=True, exist_ok=True)
            save_png(pair_dir / "source.png", pair.source_image)
            save_png(pair_dir / "target.png", pair.target_image)
            write_json(pair_dir / "source.json", _params_record(pair.source_params, pair.source_background_id))
            write_json(pair_dir / "target.json", _params_record(pair.target_params, pair.background_id))
        except OSError as exc:
            raise OSError(f"failed writing pair {idx} under {pair_dir}: {exc}") from exc
        records.append(tuple(str(rel / name) for name in PAIR_FILES))
    manifest = DatasetManifest(int(seed), int(count), size, split, records)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "manifest.json", manifest.to_dict())
    except OSError as exc:
        raise OSError(f"failed writing manifest under {out_dir}: {exc}") from exc
    return manifest


def load_manifest(root) -> DatasetManifest:
    return DatasetManifest.from_dict(read_json(Path(root) / "manifest.json"))


def load_pair(root, record, size=None) -> TrainingPair:
    """Read one pair back; masks are recomputed with the rasterizer."""
    root = Path(root)
    src_img, tgt_img = load_png(root / record[0]), load_png(root / record[1])
    src_rec, tgt_rec = read_json(root / record[2]), read_json(root / record[3])
    src, tgt = FaceParams.from_dict(src_rec), FaceParams.from_dict(tgt_rec)
    size = size or src_img.shape[:2]
    return TrainingPair(src_img, tgt_img, src, tgt, face3d.render(src, size).mask,
                        face3d.render(tgt, size).mask, int(tgt_rec["background_id"]),
                        int(src_rec["background_id"]))


def load_dataset(root) -> tuple[DatasetManifest, list[TrainingPair]]:
    manifest = load_manifest(root)
    pairs = [load_pair(root, rec, manifest.image_size) for rec in manifest.records]
    return manifest, pairs


def dataset_hash(root) -> str:
    """sha256 over the manifest and every file it references."""
    root = Path(root)
    h = hashlib.sha256((root / "manifest.json").read_bytes())
    for rec in load_manifest(root).records:
        for name in rec:
            h.update(name.encode())
            h.update((root / name).read_bytes())
    return h.hexdigest()


def dataset_exists(root) -> bool:
    return os.path.isfile(Path(root) / "manifest.json")
