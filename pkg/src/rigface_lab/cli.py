"""Command-line driver: synth, train, edit, eval, ablate.

Every subcommand reads one JSON config (``--config``), applies ``--set
section.key=value`` overrides, and writes the effective configuration to
``config.resolved.json`` in its output directory.  Relative paths resolve
against ``--out``.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "RIGFACE_LAB_THREADS"
FREE_FORM = {("edit", "target")}  # dict-valued keys whose contents are not schema-checked


class ConfigError(ValueError):
    pass


def _train_defaults() -> dict:
    from .diffusion import UNetConfig
    from .trainloop import TrainConfig

    d = TrainConfig().to_dict()
    d.pop("seed")
    d["dataset"] = "data"
    d["unet"] = dataclasses.asdict(UNetConfig())
    d["unet"]["channel_multipliers"] = list(d["unet"]["channel_multipliers"])
    d["unet"]["attention_levels"] = list(d["unet"]["attention_levels"])
    d["out"] = "train"
    return d


def default_config() -> dict:
    return {
        "seed": 0,
        "synth": {"count": 16, "size": [64, 64], "split": "train", "out": "data"},
        "train": _train_defaults(),
        "edit": {"checkpoint": "train/checkpoint_final.pt", "source_image": None, "source_params": None,
                 "mode": "lighting", "target": {}, "steps": 50, "out": "edit",
                 "reference_image": None, "reference_params": None},
        "eval": {"results": "results", "budget": 2000, "out": "eval"},
        "ablate": {"arms": [], "steps": 200, "count": 16, "size": [64, 64], "eval_pairs": 2,
                   "sample_steps": 20, "budget": 500, "batch_size": 4, "learning_rate": 1e-5,
                   "dataset": "ablate/data", "out": "ablate"},
    }


# ---------------------------------------------------------------- config plumbing

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def merge_config(base: dict, update: dict, path: tuple = ()) -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = path + (key,)
        if key not in out:
            raise ConfigError(f"unknown config key '{'.'.join(where)}'")
        if isinstance(out[key], dict) and where not in FREE_FORM:
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{'.'.join(where)}' expects an object")
            out[key] = merge_config(out[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(config: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    update: dict = {}
    node = update
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = _parse_value(raw)
    return merge_config(config, update)


def resolve_config(args) -> dict:
    config = default_config()
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        config = merge_config(config, loaded)
    for assignment in args.set or []:
        config = apply_override(config, assignment)
    if args.seed is not None:
        config["seed"] = int(args.seed)
    return config


def _path(out: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else out / p


def _write_resolved(directory: Path, config: dict, command: str) -> None:
    from .imageio import write_json

    directory.mkdir(parents=True, exist_ok=True)
    write_json(directory / "config.resolved.json", {"command": command, **config})


def _set_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        n = max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    import torch

    torch.set_num_threads(n)
    return n


def _train_config(section: dict, seed: int, out: Path):
    from .trainloop import TrainConfig

    fields = {k: v for k, v in section.items() if k != "out"}
    fields["dataset"] = str(_path(out, fields["dataset"]))
    try:
        return TrainConfig(seed=seed, **fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train config: {exc}") from exc


# ---------------------------------------------------------------- subcommands

def cmd_synth(config: dict, out: Path, args) -> int:
    from .synthgen import build_dataset

    sec = config["synth"]
    if args.count is not None:
        sec["count"] = int(args.count)
    if int(sec["count"]) < 0:
        raise ConfigError("synth.count must be >= 0")
    target = _path(out, sec["out"])
    _write_resolved(target, config, "synth")
    try:
        build_dataset(config["seed"], int(sec["count"]), tuple(sec["size"]), target, sec["split"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(target / "manifest.json")
    return EXIT_OK


def cmd_train(config: dict, out: Path, args) -> int:
    from .trainloop import run_training

    sec = config["train"]
    tcfg = _train_config(sec, config["seed"], out)
    target = _path(out, sec["out"])
    _write_resolved(target, config, "train")
    resume = args.resume
    final, log = run_training(tcfg, target, resume=resume)
    print(final)
    print(log)
    return EXIT_OK


def _source_inputs(sec: dict, out: Path):
    from .face3d import FaceParams
    from .imageio import load_png, read_json

    if not sec["source_image"] or not sec["source_params"]:
        raise ConfigError("edit needs edit.source_image and edit.source_params")
    image = load_png(_path(out, sec["source_image"]))
    params = FaceParams.from_dict(read_json(_path(out, sec["source_params"])))
    return image, params


def run_edit(model, request, source_image, provider, steps: int, seed: int, schedule=None):
    """Conditions + sampled image for one EditRequest."""
    import torch

    from . import attribprov, diffusion
    from .latentcodec import encode_batch

    conds = attribprov.build_conditions(request, request.mode, source_image, provider)
    edited = request.edited_params()
    dtype = next(model.parameters()).dtype
    lat = encode_batch(np.stack([conds.rendering, conds.background, source_image]))
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)[None]  # noqa: E731
    batch = {"cond": t(np.concatenate([lat[0], lat[1]])), "id": t(lat[2]), "psi": t(conds.expr),
             "pose": t(edited.pose), "light": t(edited.light)}
    schedule = schedule or diffusion.make_schedule()
    image = diffusion.sample(model, batch, schedule, steps=steps, seed=seed)[0]
    return image, conds


def cmd_edit(config: dict, out: Path, args) -> int:
    from . import attribprov, diffusion
    from .face3d import FaceParams
    from .imageio import load_png, read_json, save_png, write_json
    from .trainloop import load_train_config

    sec = config["edit"]
    for flag in ("checkpoint", "source_image", "source_params", "mode"):
        if getattr(args, flag, None) is not None:
            sec[flag] = getattr(args, flag)
    if args.target is not None:
        sec["target"] = _parse_value(args.target)
    if sec["mode"] not in attribprov.MODES:
        raise ConfigError(f"edit.mode must be one of {attribprov.MODES}, got {sec['mode']!r}")
    image, params = _source_inputs(sec, out)
    try:
        request = attribprov.EditRequest(sec["mode"], params, dict(sec["target"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"edit.target: {exc}") from exc
    target = _path(out, sec["out"])
    _write_resolved(target, config, "edit")
    model, payload = diffusion.load_checkpoint(_path(out, sec["checkpoint"]))
    provider = load_train_config(payload).provider_config()
    edited, conds = run_edit(model, request, image, provider, int(sec["steps"]), config["seed"])
    save_png(target / "edited.png", edited)
    save_png(target / "source.png", image)
    conds.save(target, "cond")
    record = {"mode": request.mode, "source_params": params.to_dict(),
              "reference_params": request.edited_params().to_dict()}
    if sec["reference_image"]:
        save_png(target / "reference.png", load_png(_path(out, sec["reference_image"])))
    if sec["reference_params"]:
        record["reference_params"] = FaceParams.from_dict(read_json(_path(out, sec["reference_params"]))).to_dict()
    write_json(target / "result.json", record)
    print(target / "edited.png")
    return EXIT_OK


def load_results(directory) -> list:
    """EditResults from ``<dir>/<sample>/{edited.png,reference.png,result.json}``."""
    from . import face3d
    from .evalmetrics import EditResult
    from .face3d import FaceParams
    from .imageio import load_png, read_json

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"results directory not found: {directory}")
    results = []
    for sample in sorted(p for p in directory.iterdir() if (p / "result.json").exists()):
        rec = read_json(sample / "result.json")
        if not (sample / "reference.png").exists():
            continue
        src = FaceParams.from_dict(rec["source_params"])
        edited = load_png(sample / "edited.png")
        ref_params = FaceParams.from_dict(rec["reference_params"])
        mask = face3d.render(src, edited.shape[:2]).mask
        results.append(EditResult(rec["mode"], edited, load_png(sample / "reference.png"), src,
                                  ref_params, mask, sample.name))
    return results


def cmd_eval(config: dict, out: Path, args) -> int:
    from .evalmetrics import evaluate

    sec = config["eval"]
    if args.results is not None:
        sec["results"] = args.results
    target = _path(out, sec["out"])
    _write_resolved(target, config, "eval")
    report = evaluate(load_results(_path(out, sec["results"])), int(sec["budget"]))
    json_path, txt_path = report.write(target)
    sys.stdout.write(report.to_text())
    print(json_path)
    return EXIT_OK


def parse_arms(arms_arg) -> list[dict]:
    """``"spatial_halve,add"`` or ``"fusion=add+init=independent,foreground=black"`` -> arm dicts."""
    from . import diffusion

    items = arms_arg if isinstance(arms_arg, list) else [s for s in str(arms_arg or "").split(",") if s.strip()]
    allowed = {"fusion": diffusion.FUSIONS, "conditioning": diffusion.CONDITIONINGS,
               "init": diffusion.INITS, "foreground": ("gray", "black")}
    arms = []
    for item in items:
        arm = {}
        if isinstance(item, dict):
            parts = [f"{k}={v}" for k, v in item.items()]
        else:
            parts = [p.strip() for p in str(item).split("+") if p.strip()]
        for part in parts:
            key, _, value = part.partition("=")
            if not value:
                key, value = "fusion", key
            if key not in allowed or value not in allowed[key]:
                raise ConfigError(f"bad arm component {part!r} in --arms")
            arm[key] = value
        arms.append(arm)
    return arms


def cmd_ablate(config: dict, out: Path, args) -> int:
    from .ablation import run_ablation

    sec = config["ablate"]
    if args.arms is not None:
        sec["arms"] = args.arms
    if args.steps is not None:
        sec["steps"] = int(args.steps)
    arms = parse_arms(sec["arms"])
    if not arms:
        raise ConfigError("no ablation arms given: pass --arms (e.g. --arms spatial_halve,add)")
    target = _path(out, sec["out"])
    _write_resolved(target, config, "ablate")
    train_base = {k: v for k, v in config["train"].items() if k not in ("out", "dataset")}
    report = run_ablation(arms, sec, train_base, config["seed"], target, _path(out, sec["dataset"]),
                          log=lambda msg: print(msg, file=sys.stderr, flush=True))
    print(report)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "edit": cmd_edit, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rigface-lab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.steps=500")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="root for every relative path")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic pair dataset")
    p.add_argument("--count", type=int)
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("edit", parents=[common], help="edit one face with a trained model")
    p.add_argument("--checkpoint")
    p.add_argument("--source-image", dest="source_image")
    p.add_argument("--source-params", dest="source_params")
    p.add_argument("--mode")
    p.add_argument("--target", help='JSON, e.g. \'{"pose": [0.3, 0, 0]}\'')
    p = sub.add_parser("eval", parents=[common], help="score a directory of edit results")
    p.add_argument("--results")
    p = sub.add_parser("ablate", parents=[common], help="train and compare ablation arms")
    p.add_argument("--arms", help="comma-separated arms, e.g. spatial_halve,add or foreground=black")
    p.add_argument("--steps", type=int, help="training steps per arm")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .trainloop import NonFiniteLossError

    try:
        _set_threads()
        config = resolve_config(args)
        out = Path(args.out)
        return COMMANDS[args.command](config, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
