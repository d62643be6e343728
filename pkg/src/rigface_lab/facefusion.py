"""Identity feature fusion inside the denoiser's self-attention.

Features are ``(B, h, w, c)`` tensors.  The identity encoder records the
normalised input of each transformer block's self-attention; the denoiser
merges them with its own features according to one of the fusion rules:

``spatial_halve``   concatenate along width, attend, keep the denoiser half
``add``             element-wise sum, then attend
``channel_concat``  concatenate along channels, attend at width 2c, project to c
``no_halve``        like ``spatial_halve`` but keep all 2w columns
``conv_input``      no attention fusion; the identity latent enters through a
                    conv at the UNet input (handled by the model)
"""
from __future__ import annotations

import math

import torch
from torch import nn

FUSIONS = ("spatial_halve", "add", "channel_concat", "no_halve", "conv_input")


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with an output projection."""

    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        b, n, d = x.shape
        hd = d // self.heads
        q = self.to_q(x).view(b, n, self.heads, hd).transpose(1, 2)
        k = self.to_k(context).view(b, -1, self.heads, hd).transpose(1, 2)
        v = self.to_v(context).view(b, -1, self.heads, hd).transpose(1, 2)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.to_out(out)


def _check_pair(x_dn: torch.Tensor, x_id: torch.Tensor) -> None:
    if x_dn.shape != x_id.shape:
        raise ValueError(f"feature shapes differ: {tuple(x_dn.shape)} vs {tuple(x_id.shape)}")
    if x_dn.dim() != 4:
        raise ValueError("features must be (B, h, w, c)")


def _attend(tokens_hwc: torch.Tensor, attn: Attention) -> torch.Tensor:
    b, h, w, c = tokens_hwc.shape
    return attn(tokens_hwc.reshape(b, h * w, c)).reshape(b, h, w, c)


def fuse_spatial_halve(x_dn, x_id, attn: Attention):
    """Width-concat self-attention with residual; returns the x_dn half."""
    _check_pair(x_dn, x_id)
    return fuse_no_halve(x_dn, x_id, attn)[:, :, : x_dn.shape[2]]


def fuse_no_halve(x_dn, x_id, attn: Attention):
    _check_pair(x_dn, x_id)
    joint = torch.cat([x_dn, x_id], dim=2)
    return joint + _attend(joint, attn)


def fuse_add(x_dn, x_id, attn: Attention):
    _check_pair(x_dn, x_id)
    merged = x_dn + x_id
    return merged + _attend(merged, attn)


def fuse_channel_concat(x_dn, x_id, attn: Attention, proj: nn.Linear):
    """Attention over channel-concatenated tokens, projected back to c channels."""
    _check_pair(x_dn, x_id)
    return proj(_attend(torch.cat([x_dn, x_id], dim=3), attn))


class FusionSelfAttention(nn.Module):
    """The self-attention layer of a transformer block, identity-aware.

    ``forward`` returns the update to add to the block's residual stream.
    Without identity features it is plain self-attention, so with a zeroed
    output projection the update is exactly zero either way.
    """

    def __init__(self, dim: int, heads: int, fusion: str | None):
        super().__init__()
        self.fusion = fusion
        if fusion == "channel_concat":
            self.attn = Attention(2 * dim, heads)
            self.proj = nn.Linear(2 * dim, dim)
        else:
            self.attn = Attention(dim, heads)

    def forward(self, x_dn: torch.Tensor, x_id: torch.Tensor | None = None) -> torch.Tensor:
        if self.fusion == "channel_concat":
            # the attention width is fixed at 2c, so a missing identity stream is zeros
            x_id = torch.zeros_like(x_dn) if x_id is None else x_id
            return fuse_channel_concat(x_dn, x_id, self.attn, self.proj)
        fusion = self.fusion if x_id is not None else None
        if fusion is not None:
            _check_pair(x_dn, x_id)
        if fusion in ("spatial_halve", "no_halve"):
            joint = torch.cat([x_dn, x_id], dim=2)
            update = _attend(joint, self.attn)
            return update if fusion == "no_halve" else update[:, :, : x_dn.shape[2]]
        if fusion == "add":
            return _attend(x_dn + x_id, self.attn)
        return _attend(x_dn, self.attn)

    @property
    def output_projections(self) -> list[nn.Linear]:
        if self.fusion == "channel_concat":
            return [self.proj]
        return [self.attn.to_out]


def extract_identity(model, source_latent: torch.Tensor) -> list[torch.Tensor]:
    """Per-block identity features of an (un-noised) source latent.

    Runs the identity encoder once at timestep 0; the returned list can be
    reused for every sampling step.
    """
    return model.identity_features(source_latent)
