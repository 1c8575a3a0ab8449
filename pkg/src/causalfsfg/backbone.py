"""Conv-4 style multi-scale feature extractor."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ConfigurationError


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (64, 64, 64, 64)
    in_channels: int = 3
    input_size: int = 84
    # which activation of each block is exported as a scale: "post_pool" or "pre_pool"
    tap: str = "post_pool"

    def validate(self):
        if len(self.channels) != 4:
            raise ConfigurationError(f"backbone needs 4 blocks, got {len(self.channels)}")
        if min(self.channels) < 1 or self.in_channels < 1:
            raise ConfigurationError(f"channels must be positive: {self.channels}")
        if self.tap not in ("post_pool", "pre_pool"):
            raise ConfigurationError(f"unknown tap {self.tap!r}")
        if self.input_size // 16 < 1:
            raise ConfigurationError(f"input size {self.input_size} too small for 4 poolings")

    def scale_shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) of each exported scale."""
        shapes, s = [], self.input_size
        for c in self.channels:
            shapes.append((c, s, s) if self.tap == "pre_pool" else (c, s // 2, s // 2))
            s //= 2
        return shapes


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x):
        a = F.relu(self.bn(self.conv(x)))
        return a, F.max_pool2d(a, 2)


class Conv4(nn.Module):
    """Four conv-BN-ReLU-maxpool blocks; returns one map per block."""

    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        config.validate()
        self.config = config
        widths = (config.in_channels, *config.channels)
        self.blocks = nn.ModuleList(ConvBlock(a, b) for a, b in zip(widths[:-1], widths[1:]))

    @property
    def out_channels(self) -> tuple[int, ...]:
        return self.config.channels

    def forward(self, x) -> list[torch.Tensor]:
        if x.shape[1] != self.config.in_channels:
            raise ConfigurationError(
                f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        if min(x.shape[-2:]) < 16:
            raise ConfigurationError(f"input {tuple(x.shape[-2:])} too small for 4 blocks")
        maps = []
        for block in self.blocks:
            pre, x = block(x)
            maps.append(pre if self.config.tap == "pre_pool" else x)
        return maps


def extract_multiscale(backbone: Conv4, batch: torch.Tensor) -> list[torch.Tensor]:
    return backbone(batch)


def fan_in_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for conv/linear weights and biases; identity norms."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
            with torch.no_grad():
                if m.weight is not None:
                    m.weight.fill_(1.0)
                    m.bias.zero_()


def init_backbone(config: BackboneConfig, seed: int = 0) -> Conv4:
    net = Conv4(config)
    fan_in_uniform_(net, torch.Generator().manual_seed(seed))
    return net


def backbone_param_count(config: BackboneConfig) -> int:
    """Closed form: per block 9*c_in*c_out conv weights + c_out bias + 2*c_out norm affine."""
    widths = (config.in_channels, *config.channels)
    return sum(9 * a * b + b + 2 * b for a, b in zip(widths[:-1], widths[1:]))
