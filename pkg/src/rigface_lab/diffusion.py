"""Conditioned latent denoiser: schedule, UNet, condition embeddings, sampler.

The denoiser predicts the noise in ``z_t`` given the timestep, the
per-block identity features, the expression vector (added to the time
embedding) and the Attribute Rigger features of the rendering and
background condition latents (added at the first stride-2 level).
"""
from __future__ import annotations

import copy
import dataclasses
import math
import os
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .facefusion import FUSIONS, Attention, FusionSelfAttention

CONDITIONINGS = ("full", "no_disent", "coef_sep")
INITS = ("shared", "independent")
CHECKPOINT_FORMAT = 1
POSE_DIM = 3
LIGHT_DIM = 9


# ---------------------------------------------------------------- schedule

@dataclasses.dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t):
        """alpha_bar at 1-based timestep(s) ``t``; t = 0 maps to 1."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def add_noise(z0, eps, t, schedule: NoiseSchedule):
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps, for 1-based ``t`` (scalar or per-sample)."""
    t_arr = np.asarray(t.detach().cpu() if torch.is_tensor(t) else t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"timestep out of range [1, {schedule.T}]")
    ab = schedule.alpha_bar(t_arr)
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if torch.is_tensor(z0):
        shape = (-1,) + (1,) * (z0.dim() - 1) if np.ndim(a) else ()
        a = torch.as_tensor(a, dtype=z0.dtype, device=z0.device).reshape(shape)
        b = torch.as_tensor(b, dtype=z0.dtype, device=z0.device).reshape(shape)
        return a * z0 + b * eps
    if np.ndim(a):
        shape = (-1,) + (1,) * (np.ndim(z0) - 1)
        a, b = a.reshape(shape), b.reshape(shape)
    return a * np.asarray(z0) + b * np.asarray(eps)


# ---------------------------------------------------------------- config

@dataclasses.dataclass
class UNetConfig:
    in_channels: int = 48
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    attention_levels: tuple = (1, 2)
    time_embed_dim: int = 128
    expr_dim: int = 8
    heads: int = 4
    context_dim: int = 64
    norm_groups: int = 8

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_levels = tuple(self.attention_levels)

    def check_latent_size(self, size: int) -> None:
        deepest = size // 2 ** (len(self.channel_multipliers) - 1)
        if deepest < 2:
            raise ValueError(f"latent size {size} leaves deepest level at {deepest} < 2")


@dataclasses.dataclass
class ModelConfig:
    unet: UNetConfig = dataclasses.field(default_factory=UNetConfig)
    fusion: str = "spatial_halve"
    conditioning: str = "full"
    init: str = "shared"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.conditioning not in CONDITIONINGS:
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["unet"]["channel_multipliers"] = list(self.unet.channel_multipliers)
        d["unet"]["attention_levels"] = list(self.unet.attention_levels)
        return d


# ---------------------------------------------------------------- layers

def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TransformerBlock(nn.Module):
    """self-attention (identity fusion) -> cross-attention -> feed-forward."""

    def __init__(self, channels: int, heads: int, context_dim: int, groups: int, fusion: str | None):
        super().__init__()
        self.fusion = fusion
        self.norm = nn.GroupNorm(groups, channels)
        self.proj_in = nn.Linear(channels, channels)
        self.norm1 = nn.LayerNorm(channels)
        self.attn1 = FusionSelfAttention(channels, heads, fusion)
        self.norm2 = nn.LayerNorm(channels)
        self.attn2 = Attention(channels, heads, context_dim)
        self.norm3 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels))
        self.proj_out = nn.Linear(channels, channels)
        if fusion == "no_halve":
            # folds the two width halves back together; starts as "keep first half"
            self.merge = nn.Linear(2 * channels, channels)
            with torch.no_grad():
                self.merge.weight.zero_()
                self.merge.weight[:, :channels].copy_(torch.eye(channels))
                self.merge.bias.zero_()

    def forward(self, x, context, x_id=None, capture=None, trace=None):
        b, c, height, width = x.shape
        h = self.proj_in(self.norm(x).permute(0, 2, 3, 1))
        normed = self.norm1(h)
        if capture is not None:
            capture.append(normed)
        update = self.attn1(normed, x_id)
        if update.shape[2] != width:
            h = torch.cat([h, x_id], dim=2) + update
        else:
            h = h + update
        tokens = h.reshape(b, -1, c)
        if trace is not None:
            trace.append(tokens.shape[1])
        tokens = tokens + self.attn2(self.norm2(tokens), context)
        tokens = tokens + self.ff(self.norm3(tokens))
        h = tokens.reshape(b, height, -1, c)
        if h.shape[2] != width:
            h = self.merge(torch.cat([h[:, :, :width], h[:, :, width:]], dim=-1))
        return x + self.proj_out(h).permute(0, 3, 1, 2)


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class _CaptureComplete(Exception):
    pass


class UNet(nn.Module):
    """Encoder-bottleneck-decoder UNet with transformer blocks at ``attention_levels``."""

    def __init__(self, cfg: UNetConfig, fusion: str | None = None):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * m for m in cfg.channel_multipliers]
        self.widths = widths
        ted, groups = cfg.time_embed_dim, cfg.norm_groups
        self.time_mlp = nn.Sequential(nn.Linear(cfg.base_channels, ted), nn.SiLU(), nn.Linear(ted, ted))
        self.context_token = nn.Parameter(torch.randn(1, 1, cfg.context_dim) * 0.02)
        self.context_expr = nn.Linear(cfg.expr_dim, cfg.context_dim)
        self.conv_in = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)

        def transformer(ch):
            return TransformerBlock(ch, cfg.heads, cfg.context_dim, groups, fusion)

        self.down_res, self.down_attn, self.downsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        ch = widths[0]
        for lvl, w in enumerate(widths):
            self.down_res.append(ResBlock(ch, w, ted, groups))
            self.down_attn.append(transformer(w) if lvl in cfg.attention_levels else nn.Identity())
            ch = w
            if lvl < len(widths) - 1:
                self.downsample.append(Downsample(ch))
        self.mid_res1 = ResBlock(ch, ch, ted, groups)
        self.mid_attn = transformer(ch)
        self.mid_res2 = ResBlock(ch, ch, ted, groups)
        self.up_res, self.up_attn, self.upsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        for lvl in reversed(range(len(widths))):
            w = widths[lvl]
            self.up_res.append(ResBlock(ch + w, w, ted, groups))
            self.up_attn.append(transformer(w) if lvl in cfg.attention_levels else nn.Identity())
            ch = w
            if lvl > 0:
                self.upsample.append(Upsample(ch))
        self.norm_out = nn.GroupNorm(groups, ch)
        self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    @property
    def first_stride2_width(self) -> int:
        return self.widths[0]

    def transformer_blocks(self) -> list[TransformerBlock]:
        """Transformer blocks in execution order."""
        blocks = [m for m in self.down_attn if isinstance(m, TransformerBlock)]
        blocks.append(self.mid_attn)
        blocks += [m for m in self.up_attn if isinstance(m, TransformerBlock)]
        return blocks

    def time_embedding(self, t: torch.Tensor, dtype) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(dtype))

    def context(self, psi: torch.Tensor) -> torch.Tensor:
        b = psi.shape[0]
        return torch.cat([self.context_token.expand(b, -1, -1), self.context_expr(psi)[:, None]], dim=1)

    def forward(self, z, t, psi, emb_extra=None, rig=None, id_features=None, input_residual=None,
                capture=None, stop_after_capture=False, trace=None):
        n_blocks = len(self.transformer_blocks())
        if id_features is not None and len(id_features) != n_blocks:
            raise ValueError(f"got {len(id_features)} identity features for {n_blocks} transformer blocks")
        emb = self.time_embedding(t, z.dtype)
        if emb_extra is not None:
            emb = emb + emb_extra
        ctx = self.context(psi)
        counter = [0]

        def attend(block, h):
            if not isinstance(block, TransformerBlock):
                return h
            i = counter[0]
            counter[0] += 1
            x_id = id_features[i] if id_features is not None else None
            h = block(h, ctx, x_id, capture, trace)
            if stop_after_capture and counter[0] == n_blocks:
                raise _CaptureComplete
            return h

        try:
            h = self.conv_in(z)
            if input_residual is not None:
                h = h + input_residual
            skips = []
            for lvl in range(len(self.widths)):
                h = attend(self.down_attn[lvl], self.down_res[lvl](h, emb))
                skips.append(h)
                if lvl < len(self.widths) - 1:
                    h = self.downsample[lvl](h)
                    if lvl == 0 and rig is not None:
                        if rig.shape != h.shape:
                            raise ValueError(f"rigger features {tuple(rig.shape)} do not match "
                                             f"first stride-2 level {tuple(h.shape)}")
                        h = h + rig
            h = self.mid_res2(attend(self.mid_attn, self.mid_res1(h, emb)), emb)
            for i, lvl in enumerate(reversed(range(len(self.widths)))):
                h = self.up_res[i](torch.cat([h, skips.pop()], dim=1), emb)
                h = attend(self.up_attn[i], h)
                if lvl > 0:
                    h = self.upsample[i](h)
        except _CaptureComplete:
            return None
        return self.conv_out(F.silu(self.norm_out(h)))


class AttributeRigger(nn.Module):
    """4x4 stride-2 conv to 8 channels over the stacked condition latents,
    then a 1x1 projection to the width of the UNet's first stride-2 level."""

    def __init__(self, in_channels: int, out_width: int, hidden: int = 8):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, hidden, kernel_size=4, stride=2, padding=1)
        self.proj = nn.Conv2d(hidden, out_width, kernel_size=1)

    def features(self, y):
        return self.conv(y)

    def forward(self, y):
        return self.proj(self.conv(y))


class ExpressionEmbedding(nn.Module):
    """psi -> time-embedding-sized vector (one affine map)."""

    def __init__(self, expr_dim: int, embed_dim: int):
        super().__init__()
        self.linear = nn.Linear(expr_dim, embed_dim)

    def forward(self, psi):
        return self.linear(psi)


class CoefficientEmbedding(nn.Module):
    """Coefficient-only conditioning for the ``no_disent`` / ``coef_sep`` ablations."""

    def __init__(self, variant: str, expr_dim: int, embed_dim: int):
        super().__init__()
        self.variant = variant
        if variant == "no_disent":
            self.joint = nn.Linear(expr_dim + POSE_DIM + LIGHT_DIM, embed_dim)
        elif variant == "coef_sep":
            d_expr = embed_dim - 2 * (embed_dim // 3)
            self.expr = nn.Linear(expr_dim, d_expr)
            self.pose = nn.Linear(POSE_DIM, embed_dim // 3)
            self.light = nn.Linear(LIGHT_DIM, embed_dim // 3)
        else:
            raise ValueError(f"unknown coefficient variant {variant!r}")

    @staticmethod
    def joint_vector(psi, pose, light):
        return torch.cat([psi, pose, light], dim=-1)

    def forward(self, psi, pose, light):
        if self.variant == "no_disent":
            return self.joint(self.joint_vector(psi, pose, light))
        return torch.cat([self.expr(psi), self.pose(pose), self.light(light)], dim=-1)


# ---------------------------------------------------------------- full model

class RigFaceModel(nn.Module):
    """Denoising UNet + Identity Encoder + Attribute Rigger + condition embeddings.

    ``batch`` dictionaries carry ``cond`` (B, 2C, h, w: rendering latent then
    background latent), ``id`` (B, C, h, w: source latent), ``psi`` (B, K_e),
    and for the coefficient ablations ``pose`` (B, 3) and ``light`` (B, 9).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config.unet
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.denoiser = UNet(cfg, config.fusion if config.fusion != "conv_input" else None)
            self.rigger = AttributeRigger(2 * cfg.in_channels, self.denoiser.first_stride2_width)
            if config.conditioning == "full":
                self.conditioner = ExpressionEmbedding(cfg.expr_dim, cfg.time_embed_dim)
            else:
                self.conditioner = CoefficientEmbedding(config.conditioning, cfg.expr_dim, cfg.time_embed_dim)
            if config.fusion == "conv_input":
                self.identity_encoder = None
                self.conv_id = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)
            else:
                if config.init == "independent":
                    torch.manual_seed(config.seed + 7919)
                self.identity_encoder = UNet(cfg, None)
                self.conv_id = None
                if config.init == "shared":
                    _copy_matching(self.denoiser, self.identity_encoder)

    @property
    def in_channels(self) -> int:
        return self.config.unet.in_channels

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {
            "denoiser": list(self.denoiser.parameters()),
            "rigger": list(self.rigger.parameters()),
            "expression": list(self.conditioner.parameters()),
        }
        if self.identity_encoder is not None:
            groups["identity_encoder"] = list(self.identity_encoder.parameters())
        if self.conv_id is not None:
            groups["conv_id"] = list(self.conv_id.parameters())
        return groups

    def identity_features(self, id_latent: torch.Tensor):
        """Self-attention inputs of the identity encoder at t = 0 (no noise)."""
        if self.identity_encoder is None:
            return None
        b = id_latent.shape[0]
        capture: list = []
        self.identity_encoder(id_latent, torch.zeros(b, dtype=torch.long),
                              torch.zeros(b, self.config.unet.expr_dim, dtype=id_latent.dtype),
                              capture=capture, stop_after_capture=True)
        return capture

    def condition_embedding(self, batch):
        if self.config.conditioning == "full":
            return self.conditioner(batch["psi"])
        return self.conditioner(batch["psi"], batch["pose"], batch["light"])

    def rig_input(self, batch):
        cond = batch["cond"]
        if self.config.conditioning != "full":
            c = self.in_channels
            cond = torch.cat([torch.zeros_like(cond[:, :c]), cond[:, c:]], dim=1)
        return cond

    def forward(self, z_t, t, batch, id_features=None, trace=None):
        if id_features is None and self.identity_encoder is not None:
            id_features = self.identity_features(batch["id"])
        residual = self.conv_id(batch["id"]) if self.conv_id is not None else None
        return self.denoiser(z_t, t, batch["psi"], emb_extra=self.condition_embedding(batch),
                             rig=self.rigger(self.rig_input(batch)), id_features=id_features,
                             input_residual=residual, trace=trace)


def _copy_matching(src: nn.Module, dst: nn.Module) -> None:
    src_state = src.state_dict()
    dst_state = dst.state_dict()
    with torch.no_grad():
        for name, value in dst_state.items():
            if name in src_state and src_state[name].shape == value.shape:
                value.copy_(src_state[name])


# ---------------------------------------------------------------- sampling

def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending, roughly uniformly strided 1-based timesteps from T down to 1."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must lie in [1, {T}]")
    return np.round(np.linspace(T, 1, steps)).astype(np.int64)


def ddim_sample(eps_fn: Callable, schedule: NoiseSchedule, steps: int, z_T: torch.Tensor,
                clamp: float = 3.0) -> torch.Tensor:
    """Deterministic DDIM trajectory from ``z_T``; returns the final clean latent."""
    ts = sampling_timesteps(schedule.T, steps)
    z = z_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab, ab_prev = float(schedule.alpha_bar(t)), float(schedule.alpha_bar(t_prev))
        eps = eps_fn(z, int(t))
        x0 = ((z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)).clamp(-clamp, clamp)
        z = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    return z


def initial_noise(shape: Sequence[int], seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(*shape, generator=gen, dtype=torch.float64).to(dtype)


@torch.no_grad()
def sample(model: RigFaceModel, batch: dict, schedule: NoiseSchedule, steps: int = 50, seed: int = 0,
           id_features=None) -> np.ndarray:
    """Generate images (B, H, W, 3) for a batch of conditions."""
    from .latentcodec import decode_batch

    was_training = model.training
    model.eval()
    try:
        ref = batch["cond"]
        b, _, h, w = ref.shape
        if id_features is None:
            id_features = model.identity_features(batch["id"])
        z_T = initial_noise((b, model.in_channels, h, w), seed, ref.dtype)

        def eps_fn(z, t):
            return model(z, torch.full((b,), t, dtype=torch.long), batch, id_features)

        z0 = ddim_sample(eps_fn, schedule, steps, z_T)
    finally:
        model.train(was_training)
    return decode_batch(z0.double().cpu().numpy())


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: RigFaceModel, step: int, optimizer=None, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "params": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "step": int(step),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(model, payload)``; raises on a format-version mismatch."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_FORMAT:
        raise ValueError(f"checkpoint {path} has format version {version!r}, expected {CHECKPOINT_FORMAT}")
    model = RigFaceModel(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["params"])
    return model, payload


def clone_model(model: RigFaceModel) -> RigFaceModel:
    return copy.deepcopy(model)
