"""Local path: a five-stage residual encoder whose two deepest stages get
self-attention and text-conditioned modulation, followed by ASPP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .layers import ASPP, ModulationHeads, SpatialSelfAttention, conv_gn_relu, film, group_norm

PAPER_WIDTHS = (64, 256, 512, 1024, 2048)
PAPER_BLOCKS = (3, 4, 6, 3)


@dataclass
class StageFeatures:
    e1: torch.Tensor
    e2: torch.Tensor
    e3: torch.Tensor
    e4: torch.Tensor
    e5: torch.Tensor

    def as_list(self) -> list[torch.Tensor]:
        return [self.e1, self.e2, self.e3, self.e4, self.e5]


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        mid = max(cout // self.expansion, 1)
        self.body = nn.Sequential(
            conv_gn_relu(cin, mid, 1),
            conv_gn_relu(mid, mid, 3, stride=stride),
            nn.Conv2d(mid, cout, 1, bias=False),
            group_norm(cout),
        )
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), group_norm(cout))

    def forward(self, x):
        return F.relu(self.body(x) + self.shortcut(x))


def _stage(cin: int, cout: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [Bottleneck(cin, cout, stride)]
    layers += [Bottleneck(cout, cout) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class StageEncoder(nn.Module):
    """ResNet-50 topology (stem + four bottleneck stages) with GroupNorm and a width multiplier.

    Strides: e1 = H/2, e2 = H/4, e3 = H/8, e4 = H/16, e5 = H/32.
    """

    def __init__(self, widths: Sequence[int] = PAPER_WIDTHS, blocks: Sequence[int] = PAPER_BLOCKS, in_chans: int = 1):
        super().__init__()
        if len(widths) != 5 or len(blocks) != 4:
            raise ValueError("need 5 stage widths and 4 block counts")
        c1, c2, c3, c4, c5 = widths
        self.widths = tuple(widths)
        self.stem = conv_gn_relu(in_chans, c1, kernel=7, stride=2)
        self.stages = nn.ModuleList([
            nn.Sequential(nn.MaxPool2d(3, stride=2, padding=1), _stage(c1, c2, blocks[0], 1)),
            _stage(c2, c3, blocks[1], 2),
            _stage(c3, c4, blocks[2], 2),
            _stage(c4, c5, blocks[3], 2),
        ])


class TextConditionedModulation(nn.Module):
    """Per-channel scale and shift of a stage map from the local prompt embedding."""

    def __init__(self, prompt_dim: int, channels: int):
        super().__init__()
        self.heads = ModulationHeads(prompt_dim, channels)

    def forward(self, e: torch.Tensor, z_l: torch.Tensor) -> torch.Tensor:
        if e.shape[1] != self.heads.out_dim:
            raise ValueError(f"stage has {e.shape[1]} channels, modulation heads were built for {self.heads.out_dim}")
        gamma, beta = self.heads(z_l)
        return film(e, gamma, beta, channel_dim=1)


class LocalPath(nn.Module):
    def __init__(self, prompt_dim: int, widths: Sequence[int] = PAPER_WIDTHS, blocks: Sequence[int] = PAPER_BLOCKS,
                 out_channels: int = 512, aspp_rates: Sequence[int] = (1, 6, 12, 18),
                 tcm_stages: Sequence[int] = (4, 5), attention_stages: Sequence[int] = (4, 5)):
        super().__init__()
        self.encoder = StageEncoder(widths, blocks)
        bad = [k for k in tcm_stages if k not in (1, 2, 3, 4, 5)]
        if bad:
            raise ValueError(f"tcm_stages must be in 1..5, got {bad}")
        self.tcm_stages = tuple(tcm_stages)
        self.attention_stages = tuple(attention_stages)
        self.tcm = nn.ModuleDict({str(k): TextConditionedModulation(prompt_dim, widths[k - 1]) for k in self.tcm_stages})
        self.attn = nn.ModuleDict({str(k): SpatialSelfAttention(widths[k - 1]) for k in self.attention_stages})
        self.aspp = ASPP(widths[-1], out_channels, aspp_rates)
        self.out_channels = out_channels

    def encode_stages(self, image: torch.Tensor, z_l: torch.Tensor | None = None) -> StageFeatures:
        """Run the encoder; stages listed in ``tcm_stages`` are modulated when ``z_l`` is given.

        Each returned map is the stage output after its attention / modulation,
        i.e. what the next stage consumes.
        """
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} must be divisible by 32")
        x = self.encoder.stem(image)
        feats = []
        for k in range(1, 6):
            if k > 1:
                x = self.encoder.stages[k - 2](x)
            if str(k) in self.attn:
                x = self.attn[str(k)](x)
            if z_l is not None and str(k) in self.tcm:
                x = self.tcm[str(k)](x, z_l)
            feats.append(x)
        return StageFeatures(*feats)

    def forward(self, image: torch.Tensor, z_l: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return the local bottleneck F_l and the skips [e1, e2, e3, e4]."""
        st = self.encode_stages(image, z_l)
        return self.aspp(st.e5), [st.e1, st.e2, st.e3, st.e4]
