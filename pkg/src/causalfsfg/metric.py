"""Distances, class probabilities, loss and accuracy for one episode."""
from __future__ import annotations

import torch


def distance(q_rec: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Entry-wise L2 (Frobenius) norm of q_rec - values over the last two axes."""
    if q_rec.shape[-2:] != values.shape[-2:]:
        raise ValueError(f"shape mismatch {tuple(q_rec.shape)} vs {tuple(values.shape)}")
    return torch.linalg.vector_norm(q_rec - values, dim=(-2, -1))


def probabilities(d: torch.Tensor) -> torch.Tensor:
    """exp(-d_j) / sum_n exp(-d_n) along the last axis, shifted by the row minimum."""
    shifted = d - d.min(dim=-1, keepdim=True).values
    e = torch.exp(-shifted)
    return e / e.sum(dim=-1, keepdim=True)


def _check_labels(p, labels):
    if labels.shape[0] != p.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {p.shape[0]} queries")
    if labels.numel() and (labels.min() < 0 or labels.max() >= p.shape[1]):
        raise ValueError(f"labels must lie in [0, {p.shape[1]})")


def episode_loss(p: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _check_labels(p, labels)
    picked = p[torch.arange(len(labels)), labels]
    return -torch.log(picked.clamp_min(1e-12)).mean()


def episode_accuracy(p: torch.Tensor, labels: torch.Tensor) -> float:
    # torch.argmax returns the first maximal index, i.e. the smallest slot on ties
    _check_labels(p, labels)
    return (p.argmax(dim=-1) == labels).double().mean().item()
