"""Interventional multi-scale encoder.

Each backbone scale is projected to ``gamma + 1`` channels.  The first
``gamma`` channels are features; the last one is the interventional token
map.  A per-scale transformer layer mixes spatial positions, each token map is
averaged to one scalar, and a softmax over the four scalars weights the
scales before a coarse-ward max-pool/add pyramid fuses them.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ConfigurationError


class AlignedScale(NamedTuple):
    features: torch.Tensor  # (B, gamma, H, W)
    token: torch.Tensor  # (B, H, W)


class IMSEOutput(NamedTuple):
    feature: torch.Tensor  # (B, gamma, H4, W4)
    weights: torch.Tensor  # (B, 4)
    summaries: torch.Tensor  # (B, 4)
    attention: list | None  # per scale (B, L, L) when requested


def scaled_dot_attention(q, k, v, scale: float, need_weights: bool = False):
    """softmax(q k^T * scale) v over the last two dims.

    Without ``need_weights`` the fused kernel is used, which never stores the
    (L, L) weight matrix.
    """
    if not need_weights:
        return F.scaled_dot_product_attention(q, k, v, scale=scale), None
    w = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
    return w @ v, w


class DimAlign(nn.Module):
    """1x1 conv from C_i to gamma + 1 channels."""

    def __init__(self, in_channels: int, gamma: int):
        super().__init__()
        self.gamma = gamma
        self.proj = nn.Conv2d(in_channels, gamma + 1, 1)

    def forward(self, m) -> AlignedScale:
        if m.shape[1] != self.proj.in_channels:
            raise ConfigurationError(
                f"dim_align expects {self.proj.in_channels} channels, got {m.shape[1]}")
        out = self.proj(m)
        return AlignedScale(out[:, :self.gamma], out[:, self.gamma])


def dim_align(m: torch.Tensor, align: DimAlign) -> AlignedScale:
    return align(m)


class ScaleTransformer(nn.Module):
    """Single-head pre-norm transformer layer over spatial tokens."""

    def __init__(self, gamma: int, ffn_mult: int = 2):
        super().__init__()
        dim = gamma + 1
        self.gamma = gamma
        self.norm1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * gamma), nn.GELU(),
                                 nn.Linear(ffn_mult * gamma, dim))

    def forward(self, tokens, need_weights: bool = False):
        h = self.norm1(tokens)
        # the 1/sqrt(gamma) scale is deliberate even though tokens are gamma+1 wide
        out, w = scaled_dot_attention(self.q(h), self.k(h), self.v(h),
                                      1.0 / math.sqrt(self.gamma), need_weights)
        x = tokens + out
        return x + self.ffn(self.norm2(x)), w


def scale_self_attention(aligned: AlignedScale, layer: ScaleTransformer, need_weights=False):
    f, t = aligned
    b, g, h, w = f.shape
    tokens = torch.cat([f, t[:, None]], dim=1).flatten(2).transpose(1, 2)  # (B, HW, g+1)
    out, attn = layer(tokens, need_weights)
    out = out.transpose(1, 2).reshape(b, g + 1, h, w)
    return AlignedScale(out[:, :g], out[:, g]), attn


def token_summarize(token: torch.Tensor) -> torch.Tensor:
    """Spatial mean of a (..., H, W) token map."""
    return token.mean(dim=(-2, -1))


def scale_weights(summaries: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis (the scales); max-subtracted inside torch."""
    return torch.softmax(summaries, dim=-1)


def integrate_fpn(weighted) -> torch.Tensor:
    """F4 + pool(F3 + pool(F2 + pool(F1))) with 2x2 stride-2 max pooling."""
    acc = weighted[0]
    for f in weighted[1:]:
        expect = (acc.shape[-2] // 2, acc.shape[-1] // 2)
        if tuple(f.shape[-2:]) != expect or f.shape[:-2] != acc.shape[:-2]:
            raise ConfigurationError(
                f"pyramid ladder mismatch: {tuple(acc.shape)} cannot pool onto {tuple(f.shape)}")
        acc = f + F.max_pool2d(acc, 2)
    return acc


class IMSE(nn.Module):
    """Per-scale alignment and attention (parameters not shared across scales).

    ``token_mode="channel"`` reads the interventional token from the reserved
    last embedding channel.  ``"sequence"`` appends the spatial-mean embedding
    as an extra sequence token and reads its last dimension after attention.
    """

    def __init__(self, in_channels, gamma: int, ffn_mult: int = 2, token_mode: str = "channel"):
        super().__init__()
        if len(in_channels) != 4:
            raise ConfigurationError("IMSE needs exactly 4 scales")
        if token_mode not in ("channel", "sequence"):
            raise ConfigurationError(f"unknown token_mode {token_mode!r}")
        self.gamma = gamma
        self.token_mode = token_mode
        self.align = nn.ModuleList(DimAlign(c, gamma) for c in in_channels)
        self.attn = nn.ModuleList(ScaleTransformer(gamma, ffn_mult) for _ in in_channels)

    def forward(self, maps, need_weights: bool = False) -> IMSEOutput:
        if len(maps) != 4:
            raise ConfigurationError(f"expected 4 scales, got {len(maps)}")
        feats, summaries, attns = [], [], []
        for m, align, layer in zip(maps, self.align, self.attn):
            a = align(m)
            if self.token_mode == "channel":
                a, w = scale_self_attention(a, layer, need_weights)
                s = token_summarize(a.token)
            else:
                a, s, w = self._sequence_token(a, layer, need_weights)
            feats.append(a.features)
            summaries.append(s)
            attns.append(w)
        summaries = torch.stack(summaries, dim=-1)
        weights = scale_weights(summaries)
        weighted = [f * weights[:, i, None, None, None] for i, f in enumerate(feats)]
        return IMSEOutput(integrate_fpn(weighted), weights, summaries,
                          attns if need_weights else None)

    def _sequence_token(self, a: AlignedScale, layer, need_weights):
        f, t = a
        b, g, h, w = f.shape
        tokens = torch.cat([f, t[:, None]], dim=1).flatten(2).transpose(1, 2)
        tokens = torch.cat([tokens, tokens.mean(dim=1, keepdim=True)], dim=1)
        out, attn = layer(tokens, need_weights)
        grid = out[:, :-1].transpose(1, 2).reshape(b, g + 1, h, w)
        return AlignedScale(grid[:, :g], grid[:, g]), out[:, -1, g], attn


def imse_forward(maps, imse: IMSE, need_weights: bool = False) -> IMSEOutput:
    return imse(maps, need_weights)
