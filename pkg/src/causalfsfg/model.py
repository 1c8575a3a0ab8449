"""Full few-shot classifier assembled from backbone, IMSE, IMFR and metric head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
from torch.utils.checkpoint import checkpoint

from .backbone import BackboneConfig, Conv4, fan_in_uniform_
from .data import ConfigurationError, Episode
from .imfr import IMFR, class_prototypes
from .imse import IMSE
from .metric import distance, probabilities


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gamma: int = 128
    top_k: int = 5
    ffn_mult: int = 2
    mask_kernel: int = 7
    token_mode: str = "channel"
    straight_through: bool = False
    proj_init: str = "identity"  # "fan_in", or "calibrated" (identity / feature rms at train start)
    proj_gain: float = 1.0
    feature_chunk: int = 0  # >0: encode images in chunks, recomputing activations in backward
    use_imse: bool = True
    use_imfr: bool = True

    def validate(self):
        self.backbone.validate()
        if self.gamma < 1:
            raise ConfigurationError("gamma must be positive")
        if self.feature_chunk < 0:
            raise ConfigurationError("feature_chunk must be >= 0")
        if self.proj_init not in ("identity", "fan_in", "calibrated"):
            raise ConfigurationError(
                f"proj_init {self.proj_init!r} not in identity/fan_in/calibrated")
        if self.use_imfr:
            _, h, w = self.feature_shape()
            if not 1 <= self.top_k <= h * w:
                raise ConfigurationError(f"top_k={self.top_k} outside [1, {h * w}]")

    def feature_shape(self) -> tuple[int, int, int]:
        """(C, H, W) of the per-sample feature fed to the metric head."""
        c, h, w = self.backbone.scale_shapes()[-1]
        return (self.gamma if self.use_imse else c), h, w


class EpisodeOutput(NamedTuple):
    distances: torch.Tensor  # (|Q|, N)
    probs: torch.Tensor  # (|Q|, N)
    extras: dict


class CausalFSFG(nn.Module):
    """With both flags off this is backbone M4 + flattened prototypes + Euclidean distance."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = Conv4(config.backbone)
        self.imse = (IMSE(config.backbone.channels, config.gamma, config.ffn_mult,
                          config.token_mode) if config.use_imse else None)
        width = config.feature_shape()[0]
        self.imfr = (IMFR(width, config.top_k, config.mask_kernel, config.straight_through)
                     if config.use_imfr else None)

    def features(self, images, need_weights: bool = False):
        chunk = self.config.feature_chunk
        if chunk and len(images) > chunk and not need_weights:
            return self._chunked_features(images, chunk)
        return self._encode(images, need_weights)

    def _chunked_features(self, images, chunk):
        # batch-norm statistics become per chunk in training mode
        parts = images.split(chunk)
        if not torch.is_grad_enabled():
            outs = [self._encode(p) for p in parts]
            extras = {"scales": [torch.cat(m) for m in zip(*(e["scales"] for _, e in outs))]}
            if self.imse is not None:
                extras["scale_weights"] = torch.cat([e["scale_weights"] for _, e in outs])
            return torch.cat([f for f, _ in outs]), extras
        feats, weights = [], []
        for part in parts:
            f, w = checkpoint(self._encode_plain, part, use_reentrant=False)
            feats.append(f)
            weights.append(w)
        extras = {} if self.imse is None else {"scale_weights": torch.cat(weights)}
        return torch.cat(feats), extras

    def _encode_plain(self, images):
        feat, extras = self._encode(images)
        return feat, extras.get("scale_weights", feat.new_zeros(len(images), 0))

    def _encode(self, images, need_weights: bool = False):
        maps = self.backbone(images)
        extras = {"scales": maps}
        if self.imse is None:
            return maps[-1], extras
        out = self.imse(maps, need_weights)
        extras.update(scale_weights=out.weights, imse_attention=out.attention)
        return out.feature, extras

    def forward(self, support, support_labels, query, n_way: int,
                need_weights: bool = False) -> EpisodeOutput:
        n_s = len(support)
        feats, extras = self.features(torch.cat([support, query]), need_weights)
        s, q = feats[:n_s], feats[n_s:]
        if self.imfr is None:
            protos = class_prototypes(s, support_labels, n_way)
            d = distance(q.flatten(1)[:, None, :, None], protos.flatten(1)[None, :, :, None])
        else:
            out = self.imfr(s, support_labels, q, n_way, need_weights)
            d = distance(out.q_rec, out.values[None])
            extras.update(masks=out.masks, imfr_attention=out.attention)
        return EpisodeOutput(d, probabilities(d), extras)

    def run_episode(self, episode: Episode, need_weights: bool = False) -> EpisodeOutput:
        dtype = next(self.parameters()).dtype
        return self(episode.support.to(dtype), episode.support_labels,
                    episode.query.to(dtype), episode.n_way, need_weights)


def build_model(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> CausalFSFG:
    torch.manual_seed(seed)
    model = CausalFSFG(config)
    fan_in_uniform_(model, torch.Generator().manual_seed(seed))
    if model.imfr is not None and config.proj_init in ("identity", "calibrated"):
        # start with attention that compares aligned positions; random small
        # projections make every distance independent of the query
        with torch.no_grad():
            for lin in (model.imfr.reconstructor.w_q, model.imfr.reconstructor.w_k,
                        model.imfr.reconstructor.w_v):
                lin.weight.copy_(config.proj_gain * torch.eye(lin.weight.shape[0]))
    return model.to(dtype)


@torch.no_grad()
def calibrate_projections(model: CausalFSFG, images: torch.Tensor) -> float:
    """Divide the IMFR projections by the rms of the features they will see.

    Keeps the initial attention sharpness comparable whether IMFR reads the
    encoder output or raw backbone maps.  Batch-norm buffers are restored, so
    only the projection scale changes.  Returns the measured rms.
    """
    if model.imfr is None:
        return 1.0
    buffers = [b.clone() for b in model.buffers()]
    feats, _ = model.features(images.to(next(model.parameters()).dtype))
    for b, saved in zip(model.buffers(), buffers):
        b.copy_(saved)
    rms = feats.pow(2).mean().sqrt().item()
    if rms > 0:
        for lin in (model.imfr.reconstructor.w_q, model.imfr.reconstructor.w_k,
                    model.imfr.reconstructor.w_v):
            lin.weight.div_(rms)
    return rms
