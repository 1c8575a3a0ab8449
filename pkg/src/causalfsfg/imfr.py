"""Interventional masked feature reconstruction.

Query term: a shared conv block turns channel max/mean maps of each query into
a global matrix G; its top-k positions form a binary mask used for a residual
boost of the query.  Support term: each enhanced query is rebuilt from every
class prototype by cross-attention with shared Q/K/V projections.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn

from .imse import scaled_dot_attention


class MaskPair(NamedTuple):
    G: torch.Tensor  # (..., H, W) in (0, 1)
    binary: torch.Tensor  # (..., H, W) in {0, 1}
    k: int


class IMFROutput(NamedTuple):
    q_rec: torch.Tensor  # (|Q|, N, HW, gamma)
    values: torch.Tensor  # (N, HW, gamma)
    masks: MaskPair
    attention: torch.Tensor | None  # (|Q|, N, HW, HW) when requested


class MaskBlock(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, q):
        pooled = torch.stack([q.amax(dim=1), q.mean(dim=1)], dim=1)  # (B, 2, H, W)
        return torch.sigmoid(self.conv(pooled))[:, 0]


def global_mask(q: torch.Tensor, block: MaskBlock) -> torch.Tensor:
    return block(q)


def binarize_topk(G: torch.Tensor, k: int, straight_through: bool = False) -> MaskPair:
    """Mark the k largest entries of each (H, W) map; ties go to the lower flat index.

    The binary mask is detached.  ``straight_through`` adds ``G - G.detach()``
    so gradients reach the mask block.
    """
    h, w = G.shape[-2:]
    if not 1 <= k <= h * w:
        raise ValueError(f"k={k} outside [1, {h * w}]")
    flat = G.detach().reshape(*G.shape[:-2], h * w)
    order = torch.sort(flat, dim=-1, descending=True, stable=True).indices
    binary = torch.zeros_like(flat)
    binary.scatter_(-1, order[..., :k], 1.0)
    binary = binary.reshape(G.shape)
    if straight_through:
        binary = binary + (G - G.detach())
    return MaskPair(G, binary, k)


def enhance_query(q: torch.Tensor, mask: MaskPair | torch.Tensor) -> torch.Tensor:
    """q + q * mask, the mask broadcast over channels."""
    binary = mask.binary if isinstance(mask, MaskPair) else mask
    if binary.shape[-2:] != q.shape[-2:]:
        raise ValueError(f"mask {tuple(binary.shape)} does not match query {tuple(q.shape)}")
    return q + q * binary.unsqueeze(-3)


def class_prototypes(features: torch.Tensor, labels: torch.Tensor, n_way: int) -> torch.Tensor:
    """Per-slot mean of support features -> (N, ...)."""
    protos = []
    for n in range(n_way):
        members = features[labels == n]
        if len(members) == 0:
            raise ValueError(f"class slot {n} has no support samples")
        protos.append(members.mean(dim=0))
    return torch.stack(protos)


def _tokens(x):
    return x.flatten(-2).transpose(-2, -1)  # (..., C, H, W) -> (..., HW, C)


class Reconstructor(nn.Module):
    """Shared bias-free projections W_Q, W_K, W_V (gamma x gamma)."""

    def __init__(self, gamma: int):
        super().__init__()
        self.gamma = gamma
        self.w_q = nn.Linear(gamma, gamma, bias=False)
        self.w_k = nn.Linear(gamma, gamma, bias=False)
        self.w_v = nn.Linear(gamma, gamma, bias=False)

    def forward(self, q_hat, protos, need_weights: bool = False):
        """q_hat (|Q|, g, H, W), protos (N, g, H, W) -> q_rec (|Q|, N, HW, g), V (N, HW, g)."""
        Q = self.w_q(_tokens(q_hat))
        K = self.w_k(_tokens(protos))
        V = self.w_v(_tokens(protos))
        nq, n = Q.shape[0], K.shape[0]
        q_rec, attn = scaled_dot_attention(
            Q[:, None].expand(nq, n, *Q.shape[1:]),
            K[None].expand(nq, n, *K.shape[1:]),
            V[None].expand(nq, n, *V.shape[1:]),
            1.0 / math.sqrt(self.gamma), need_weights)
        return q_rec, V, attn


def reconstruct(q_hat: torch.Tensor, proto: torch.Tensor, proj: Reconstructor):
    """Single pair: q_hat, proto (g, H, W) -> (q_rec (HW, g), V (HW, g), attention (HW, HW))."""
    q_rec, V, attn = proj(q_hat[None], proto[None], need_weights=True)
    return q_rec[0, 0], V[0], attn[0, 0]


class IMFR(nn.Module):
    def __init__(self, gamma: int, k: int, kernel_size: int = 7, straight_through: bool = False):
        super().__init__()
        self.k = k
        self.straight_through = straight_through
        self.mask_block = MaskBlock(kernel_size)
        self.reconstructor = Reconstructor(gamma)

    def forward(self, support, support_labels, query, n_way: int,
                need_weights: bool = False) -> IMFROutput:
        if support.shape[1:] != query.shape[1:]:
            raise ValueError(f"support {tuple(support.shape)} vs query {tuple(query.shape)}")
        masks = binarize_topk(global_mask(query, self.mask_block), self.k, self.straight_through)
        q_hat = enhance_query(query, masks)
        protos = class_prototypes(support, support_labels, n_way)
        q_rec, V, attn = self.reconstructor(q_hat, protos, need_weights)
        return IMFROutput(q_rec, V, masks, attn)


def imfr_forward(support, support_labels, query, n_way, imfr: IMFR, need_weights=False):
    return imfr(support, support_labels, query, n_way, need_weights)
