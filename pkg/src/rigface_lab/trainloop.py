"""Noise-prediction training over synthetic pairs, with checkpoint/resume."""
from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import torch

from . import attribprov, diffusion, synthgen
from .diffusion import ModelConfig, RigFaceModel, UNetConfig
from .latentcodec import encode_batch

LOG_NAME = "train_log.jsonl"
FINAL_NAME = "checkpoint_final.pt"


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, seed: int, loss: float, dump_path=None):
        self.step, self.seed, self.loss, self.dump_path = step, seed, loss, dump_path
        msg = f"non-finite loss {loss} at step {step} (seed {seed})"
        if dump_path:
            msg += f"; diagnostics in {dump_path}"
        super().__init__(msg)


@dataclasses.dataclass
class TrainConfig:
    dataset: str = ""
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-5
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    fusion: str = "spatial_halve"
    conditioning: str = "full"
    init: str = "shared"
    rendering_expression: str = "neutral"
    foreground: str = "gray"
    expression_mode: str = "oracle"
    checkpoint_every: int = 500
    grad_clip: float = 1.0
    timesteps: int = 1000
    dtype: str = "float32"
    unet: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32|float64, got {self.dtype!r}")
        self.model_config()  # validates fusion/conditioning/init
        self.provider_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(UNetConfig(**self.unet), self.fusion, self.conditioning, self.init, self.seed)

    def provider_config(self) -> attribprov.ProviderConfig:
        return attribprov.ProviderConfig(self.expression_mode, self.rendering_expression, self.foreground)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------- data

def prepare_tensors(pairs, provider: attribprov.ProviderConfig | None = None,
                    dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Condition every pair once and stack everything as latent tensors."""
    provider = provider or attribprov.ProviderConfig()
    conds = [attribprov.build_conditions(p, "training", config=provider) for p in pairs]
    target = encode_batch(np.stack([p.target_image for p in pairs]))
    source = encode_batch(np.stack([p.source_image for p in pairs]))
    rendering = encode_batch(np.stack([c.rendering for c in conds]))
    background = encode_batch(np.stack([c.background for c in conds]))

    def t(a):
        return torch.as_tensor(np.asarray(a), dtype=dtype)

    return {
        "target": t(target),
        "id": t(source),
        "cond": t(np.concatenate([rendering, background], axis=1)),
        "psi": t(np.stack([c.expr for c in conds])),
        "pose": t(np.stack([p.target_params.pose for p in pairs])),
        "light": t(np.stack([p.target_params.light for p in pairs])),
    }


def conditioning_variant(variant: str, tensors: dict) -> dict:
    """Denoiser inputs for a conditioning variant.

    ``full`` keeps everything.  The coefficient variants feed (psi, pose,
    light) through the coefficient embedding and drop the rendering latent
    (zeros), keeping the background latent.
    """
    if variant not in diffusion.CONDITIONINGS:
        raise ValueError(f"unknown conditioning variant {variant!r}; expected one of {diffusion.CONDITIONINGS}")
    out = dict(tensors)
    if variant != "full":
        cond = tensors["cond"]
        c = cond.shape[1] // 2
        out["cond"] = torch.cat([torch.zeros_like(cond[:, :c]), cond[:, c:]], dim=1)
    return out


def select(tensors: dict, idx) -> dict:
    idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
    return {k: v[idx] for k, v in tensors.items()}


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1, np.uint64)[0] >> 1)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(step), 1]))
    return rng.choice(n, size=batch_size, replace=n < batch_size)


# ---------------------------------------------------------------- optimisation

def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas)


def diffusion_loss(model, batch: dict, schedule: diffusion.NoiseSchedule, gen: torch.Generator):
    """Mean squared error between sampled and predicted noise."""
    z0 = batch["target"]
    b = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(z0.dtype)
    z_t = diffusion.add_noise(z0, eps, t, schedule)
    pred = model(z_t, t, batch)
    return ((pred - eps) ** 2).mean()


def global_grad_norm(params) -> float:
    sq = [p.grad.detach().double().pow(2).sum() for p in params if p.grad is not None]
    return math.sqrt(float(torch.stack(sq).sum())) if sq else 0.0


def train_step(model, optimizer, batch: dict, gen: torch.Generator, schedule: diffusion.NoiseSchedule,
               grad_clip: float | None = 1.0, step: int = 0, seed: int = 0) -> tuple[float, float]:
    """One Adam update over every parameter.  Returns (loss, pre-clip grad norm)."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = diffusion_loss(model, batch, schedule, gen)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(step, seed, value)
    loss.backward()
    params = [p for p in model.parameters() if p.requires_grad]
    norm = global_grad_norm(params)
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(params, grad_clip)
    optimizer.step()
    return value, norm


# ---------------------------------------------------------------- driver

def _checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"checkpoint_{step:06d}.pt"


def latest_checkpoint(out_dir) -> Path | None:
    out_dir = Path(out_dir)
    found = sorted(out_dir.glob("checkpoint_[0-9]*.pt"))
    return found[-1] if found else None


def _read_log(path: Path, upto: int) -> list[str]:
    if not path.exists():
        return []
    with open(path) as fh:
        return [line for line in fh if line.strip() and json.loads(line)["step"] <= upto]


def _dump_nonfinite(out_dir: Path, config: TrainConfig, step: int, loss: float) -> Path:
    path = out_dir / f"nonfinite_step{step}.json"
    with open(path, "w") as fh:
        json.dump({"step": step, "seed": config.seed, "loss": repr(loss), "config": config.to_dict()}, fh, indent=2)
    return path


def run_training(config: TrainConfig, out_dir, resume=None, pairs=None, progress=None) -> tuple[Path, Path]:
    """Train per ``config``; returns (final checkpoint path, log path).

    ``resume`` is a checkpoint written by an earlier run of the same config.
    Log records past that checkpoint's step are dropped before continuing, so
    an interrupted-then-resumed run ends with the same log as a straight one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pairs is None:
        if not synthgen.dataset_exists(config.dataset):
            raise FileNotFoundError(f"dataset not found: {config.dataset!r} (no manifest.json)")
        _, pairs = synthgen.load_dataset(config.dataset)
    if not pairs:
        raise ValueError("dataset has no pairs")
    dtype = config.torch_dtype
    tensors = conditioning_variant(config.conditioning, prepare_tensors(pairs, config.provider_config(), dtype))
    schedule = diffusion.make_schedule(config.timesteps)

    model = RigFaceModel(config.model_config()).to(dtype)
    optimizer = make_optimizer(model, config)
    start = 0
    if resume is not None:
        payload = torch.load(resume, map_location="cpu", weights_only=False)
        if payload.get("format_version") != diffusion.CHECKPOINT_FORMAT:
            raise ValueError(f"checkpoint {resume} has an unsupported format")
        model.load_state_dict(payload["params"])
        optimizer.load_state_dict(payload["optimizer"])
        start = int(payload["step"])

    log_path = out_dir / LOG_NAME
    kept = _read_log(log_path, start) if resume is not None else []
    with open(log_path, "w") as fh:
        fh.writelines(kept)
    t0 = time.perf_counter()
    extra = {"train_config": config.to_dict()}
    with open(log_path, "a") as log:
        for step in range(start + 1, config.steps + 1):
            batch = select(tensors, batch_indices(config.seed, step, len(pairs), config.batch_size))
            gen = torch.Generator().manual_seed(step_seed(config.seed, step))
            try:
                loss, norm = train_step(model, optimizer, batch, gen, schedule, config.grad_clip, step, config.seed)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(step, config.seed, exc.loss,
                                         _dump_nonfinite(out_dir, config, step, exc.loss)) from None
            record = {"step": step, "loss": loss, "wall_clock": round(time.perf_counter() - t0, 4),
                      "grad_norm": norm}
            log.write(json.dumps(record) + "\n")
            log.flush()
            if progress is not None:
                progress(record)
            if config.checkpoint_every and step % config.checkpoint_every == 0 and step < config.steps:
                diffusion.save_checkpoint(_checkpoint_path(out_dir, step), model, step, optimizer, extra)
    final = out_dir / FINAL_NAME
    diffusion.save_checkpoint(final, model, config.steps, optimizer, extra)
    return final, log_path


def read_losses(log_path) -> np.ndarray:
    with open(log_path) as fh:
        return np.array([json.loads(line)["loss"] for line in fh if line.strip()])


def load_train_config(payload_or_path) -> TrainConfig:
    payload = payload_or_path
    if isinstance(payload_or_path, (str, os.PathLike)):
        payload = torch.load(payload_or_path, map_location="cpu", weights_only=False)
    return TrainConfig(**payload["extra"]["train_config"])
