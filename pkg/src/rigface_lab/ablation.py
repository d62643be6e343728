"""Ablation matrix: train each arm on the same data and seed, edit a fixed
evaluation set, score it, and lay the results out side by side."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from . import attribprov, diffusion, evalmetrics, face3d, synthgen
from .imageio import load_png, quantize, save_png, write_json
from .latentcodec import encode_batch
from .trainloop import TrainConfig, read_losses, run_training

EDIT_MODES = ("pose", "expression", "lighting")
_GROUP = {"pose": "pose", "expression": "expr", "lighting": "light"}


def arm_name(arm: dict) -> str:
    return "+".join(f"{k}={v}" for k, v in sorted(arm.items())) or "baseline"


def edit_set(seed: int, n_pairs: int, size) -> list[tuple]:
    """(request, source_image, reference_image, reference_params) per mode per pair.

    References are rendered ground truth composited over the source background.
    """
    items = []
    for i in range(n_pairs):
        pair = synthgen.generate_pair(seed, i, size)
        background = synthgen.make_background(pair.source_background_id, size)
        for mode in EDIT_MODES:
            group = _GROUP[mode]
            request = attribprov.EditRequest(mode, pair.source_params,
                                             {group: getattr(pair.target_params, group).copy()})
            ref_params = request.edited_params()
            reference = synthgen.composite(face3d.render(ref_params, size), background)
            items.append((request, pair.source_image, reference, ref_params))
    return items


def fill_ok(conds: attribprov.ConditionSet, fill: float, saved_png=None) -> bool:
    """Fill region exact before quantisation, and exact again in the saved PNG."""
    region = conds.fill_mask
    if not np.all(conds.background[region] == fill):
        return False
    if saved_png is not None:
        level = int(quantize(np.array([fill]))[0])
        pixels = np.round(load_png(saved_png) * 255).astype(int)
        if not np.all(pixels[region] == level):
            return False
    return True


def sample_edits(model, items, provider, steps: int, seed: int, cond_dir: Path):
    conds, batch_lat = [], []
    ok = True
    for k, (request, src_img, _, _) in enumerate(items):
        c = attribprov.build_conditions(request, request.mode, src_img, provider)
        c.save(cond_dir, f"{k:03d}")
        ok &= fill_ok(c, provider.fill_value, cond_dir / f"{k:03d}_background.png")
        conds.append(c)
        batch_lat.append(encode_batch(np.stack([c.rendering, c.background, src_img])))
    dtype = next(model.parameters()).dtype
    lat = np.stack(batch_lat)
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
    edited = [r.edited_params() for r, *_ in items]
    batch = {"cond": t(np.concatenate([lat[:, 0], lat[:, 1]], axis=1)), "id": t(lat[:, 2]),
             "psi": t(np.stack([c.expr for c in conds])),
             "pose": t(np.stack([p.pose for p in edited])), "light": t(np.stack([p.light for p in edited]))}
    images = diffusion.sample(model, batch, diffusion.make_schedule(), steps=steps, seed=seed)
    return images, ok


def contact_sheet(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    h, w, _ = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    sheet = np.ones((len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad, 3))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            sheet[y:y + h, x:x + w] = img
    return sheet


def _text_table(rows: list[dict]) -> str:
    keys = ["arm", "final_loss"] + [evalmetrics.COLUMN_OF[k] for k in evalmetrics.COLUMN_OF] + ["fill_ok", "dataset"]
    table = [keys]
    for r in rows:
        vals = [r["arm"], f"{r['final_loss']:.4f}"]
        vals += [evalmetrics._fmt(r["metrics"].get(k)) for k in evalmetrics.COLUMN_OF]
        vals += [str(r["fill_ok"]), r["dataset_hash"][:12]]
        table.append(vals)
    widths = [max(len(row[i]) for row in table) for i in range(len(keys))]
    lines = [f"# {evalmetrics.HEADER}"]
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in table]
    return "\n".join(lines) + "\n"


def run_ablation(arms: list[dict], sec: dict, train_base: dict, seed: int, out_dir, dataset_dir,
                 log=print) -> Path:
    out_dir, dataset_dir = Path(out_dir), Path(dataset_dir)
    size = tuple(sec["size"])
    if not synthgen.dataset_exists(dataset_dir):
        log(f"building dataset in {dataset_dir}")
        synthgen.build_dataset(seed, int(sec["count"]), size, dataset_dir)
    data_hash = synthgen.dataset_hash(dataset_dir)
    _, pairs = synthgen.load_dataset(dataset_dir)
    items = edit_set(seed + 1, int(sec["eval_pairs"]), size)

    rows, grid = [], [[it[1] for it in items], [it[2] for it in items]]
    for arm in arms:
        name = arm_name(arm)
        arm_dir = out_dir / "arms" / name.replace("=", "-")
        fields = dict(train_base)
        fields.update(steps=int(sec["steps"]), batch_size=int(sec["batch_size"]),
                      learning_rate=float(sec["learning_rate"]), dataset=str(dataset_dir),
                      checkpoint_every=0, seed=seed)
        fields.update(arm)
        cfg = TrainConfig(**fields)
        log(f"[{name}] training {cfg.steps} steps")
        final, log_path = run_training(cfg, arm_dir, pairs=pairs)
        losses = read_losses(log_path)
        model, _ = diffusion.load_checkpoint(final)
        images, ok = sample_edits(model, items, cfg.provider_config(), int(sec["sample_steps"]), seed,
                                  arm_dir / "conditions")
        results = []
        (arm_dir / "edits").mkdir(parents=True, exist_ok=True)
        for k, ((request, src_img, ref_img, ref_params), img) in enumerate(zip(items, images)):
            save_png(arm_dir / "edits" / f"{k:03d}.png", img)
            mask = face3d.render(request.source_params, size).mask
            results.append(evalmetrics.EditResult(request.mode, img, ref_img, request.source_params,
                                                  ref_params, mask, f"{k:03d}"))
        log(f"[{name}] evaluating {len(results)} edits")
        report = evalmetrics.evaluate(results, int(sec["budget"]))
        report.write(arm_dir)
        rows.append({"arm": name, "config": arm, "dataset_hash": data_hash, "steps": cfg.steps,
                     "final_loss": float(losses[-10:].mean()), "first_loss": float(losses[:10].mean()),
                     "metrics": report.overall, "fill_ok": bool(ok)})
        grid.append(list(images))

    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "ablation_report.json"
    write_json(report_path, {"header": evalmetrics.HEADER, "fit_budget": int(sec["budget"]),
                             "modes": [it[0].mode for it in items], "rows": rows})
    (out_dir / "ablation_report.txt").write_text(_text_table(rows))
    save_png(out_dir / "ablation_grid.png", contact_sheet(grid))
    return report_path
