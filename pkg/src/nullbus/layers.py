"""Building blocks shared by the global path, local path and decoder."""

from __future__ import annotations

import logging
import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)


def gn_groups(channels: int, max_groups: int = 32) -> int:
    """Largest divisor of ``channels`` not exceeding ``max_groups`` (== min(32, C) for powers of two)."""
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(gn_groups(channels), channels)


def conv_gn_relu(cin: int, cout: int, kernel: int = 1, stride: int = 1, dilation: int = 1, groups: int = 1) -> nn.Sequential:
    pad = dilation * (kernel - 1) // 2
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad, dilation=dilation, groups=groups, bias=False),
        group_norm(cout),
        nn.ReLU(inplace=True),
    )


def film(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, channel_dim: int) -> torch.Tensor:
    """Feature-wise scale and shift, ``gamma * x + beta``.

    ``gamma`` and ``beta`` are (B, C) and are broadcast over every axis of ``x``
    except batch and ``channel_dim``.
    """
    if gamma.shape != beta.shape or gamma.shape[-1] != x.shape[channel_dim]:
        raise ValueError(
            f"modulation of size {tuple(gamma.shape)} does not match {x.shape[channel_dim]} channels (dim {channel_dim})"
        )
    shape = [x.shape[0]] + [1] * (x.dim() - 1)
    shape[channel_dim] = x.shape[channel_dim]
    return gamma.reshape(shape) * x + beta.reshape(shape)


class ModulationHeads(nn.Module):
    """Two MLP heads producing a scale and a shift from a prompt embedding.

    The scale is ``1 + tanh(mlp(z))`` and the shift ``mlp(z)``. Both final layers
    start at zero, so the modulation is the identity at initialization.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or in_dim
        self.gamma = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))
        self.beta = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))
        for head in (self.gamma, self.beta):
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)
        self.out_dim = out_dim

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return 1.0 + torch.tanh(self.gamma(z)), self.beta(z)


class SpatialSelfAttention(nn.Module):
    """Single-head self-attention over flattened spatial positions, with residual add."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = group_norm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.scale = 1.0 / math.sqrt(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) * self.scale, dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class ASPP(nn.Module):
    """Atrous spatial pyramid pooling.

    A rate of 1 is a 1x1 branch, other rates are 3x3 dilated branches; an
    image-pooling branch is added, and the concatenation is projected to
    ``out_channels``. Spatial size is preserved.
    """

    def __init__(self, in_channels: int, out_channels: int, rates: Sequence[int] = (1, 6, 12, 18)):
        super().__init__()
        if not rates or any(r < 1 for r in rates):
            raise ValueError(f"ASPP rates must be positive, got {tuple(rates)}")
        self.rates = tuple(int(r) for r in rates)
        n_branches = len(self.rates) + 1
        branch = max(1, round(out_channels / n_branches))
        self.branches = nn.ModuleList(
            conv_gn_relu(in_channels, branch, kernel=1 if r == 1 else 3, dilation=r) for r in self.rates
        )
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            # no norm here: a 1x1 map gives GroupNorm nothing to normalize over
            nn.Conv2d(in_channels, branch, 1, bias=False),
            nn.ReLU(inplace=True),
        )
        self.project = conv_gn_relu(branch * n_branches, out_channels, kernel=1)
        self.out_channels = out_channels

    def check_footprint(self, spatial: int) -> None:
        big = [r for r in self.rates if r > 1 and r >= spatial]
        if big:
            logger.info("ASPP rates %s exceed the %dx%d input; those taps land in padding", big, spatial, spatial)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        feats = [branch(x) for branch in self.branches]
        pooled = self.pool(x)
        feats.append(pooled.expand(-1, -1, h, w))
        return self.project(torch.cat(feats, dim=1))


class SqueezeExcitation(nn.Module):
    """Channel gating: ``x * sigmoid(fc(relu(fc(avgpool(x)))))``."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)
