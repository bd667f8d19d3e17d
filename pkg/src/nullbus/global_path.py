"""Global path: frozen vision-token backbone, prompt-conditioned token blend, and the
projector that turns tokens into a bottleneck-aligned feature map."""

from __future__ import annotations

import importlib
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import ModulationHeads, film, group_norm


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (B, N, d_tok), patch tokens only
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.shape[1] != h * w:
            raise ValueError(f"{self.tokens.shape[1]} tokens do not fill a {h}x{w} grid")


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ToyViT(nn.Module):
    """Small randomly initialized ViT used in place of a pretrained one.

    Weights come from a fixed seed and are never trained. Any backbone with the
    same ``patch_size`` / ``dim`` / ``tokens(x, block_index)`` surface can replace it.
    """

    def __init__(self, image_size: int = 96, patch_size: int = 8, dim: int = 64, depth: int = 2,
                 heads: int = 4, in_chans: int = 1, seed: int = 0):
        super().__init__()
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} is not divisible by patch size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        # build under a private RNG so the backbone does not depend on the global seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_embed = nn.Conv2d(in_chans, dim, patch_size, stride=patch_size)
            n = (image_size // patch_size) ** 2
            self.cls_token = nn.Parameter(0.02 * torch.randn(1, 1, dim))
            self.pos_embed = nn.Parameter(0.02 * torch.randn(1, n + 1, dim))
            self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(depth))
            self.norm = nn.LayerNorm(dim)

    def tokens(self, x: torch.Tensor, block_index: int = -2) -> TokenGrid:
        b, _, h, w = x.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"input {h}x{w} is not divisible by patch size {self.patch_size}")
        if (h, w) != (self.image_size, self.image_size):
            raise ValueError(f"backbone built for {self.image_size}x{self.image_size} input, got {h}x{w}")
        idx = block_index % self.depth
        t = self.patch_embed(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls_token.expand(b, -1, -1), t], dim=1) + self.pos_embed
        for i, blk in enumerate(self.blocks):
            t = blk(t)
            if i == idx:
                break
        grid = (h // self.patch_size, w // self.patch_size)
        return TokenGrid(t[:, 1:], grid)


def load_external_backbone(spec: str, **kwargs) -> nn.Module:
    """Import ``"package.module:factory"`` and call it with ``kwargs``."""
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise ValueError(f"external backbone must be given as 'module:callable', got {spec!r}")
    factory = getattr(importlib.import_module(module_name), attr)
    return factory(**kwargs)


class FrozenTokenEncoder(nn.Module):
    """Wraps a token backbone, freezes it and pins it to eval mode."""

    def __init__(self, backbone: nn.Module, block_index: int = -2):
        super().__init__()
        self.backbone = backbone
        self.block_index = block_index
        self.patch_size = backbone.patch_size
        self.dim = backbone.dim
        self.backbone.requires_grad_(False)
        self.backbone.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    def forward(self, image: torch.Tensor) -> TokenGrid:
        with torch.no_grad():
            return self.backbone.tokens(image, self.block_index)


class ConditionalBlend(nn.Module):
    """Scale-and-shift of every token by heads of the global prompt embedding."""

    def __init__(self, prompt_dim: int, token_dim: int):
        super().__init__()
        self.heads = ModulationHeads(prompt_dim, token_dim)

    def forward(self, grid: TokenGrid, z_g: torch.Tensor) -> TokenGrid:
        if z_g.shape[-1] != self.heads.gamma[0].in_features:
            raise ValueError(f"prompt dim {z_g.shape[-1]} != head input {self.heads.gamma[0].in_features}")
        if grid.tokens.shape[-1] != self.heads.out_dim:
            raise ValueError(f"token dim {grid.tokens.shape[-1]} != head output {self.heads.out_dim}")
        gamma, beta = self.heads(z_g)
        return TokenGrid(film(grid.tokens, gamma, beta, channel_dim=-1), grid.grid)


class GlobalFeatureProjector(nn.Module):
    """Tokens -> (d_tok, h_t, w_t) -> bilinear resize -> 1x1 conv to C_g -> GroupNorm."""

    def __init__(self, token_dim: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(token_dim, out_channels, 1)
        self.norm = group_norm(out_channels)

    def forward(self, grid: TokenGrid, target: tuple[int, int]) -> torch.Tensor:
        b, n, d = grid.tokens.shape
        h, w = grid.grid
        x = grid.tokens.transpose(1, 2).reshape(b, d, h, w)
        if (h, w) != tuple(target):
            x = F.interpolate(x, size=tuple(target), mode="bilinear", align_corners=False)
        return self.norm(self.proj(x))


class GlobalPath(nn.Module):
    def __init__(self, backbone: nn.Module, prompt_dim: int, out_channels: int, block_index: int = -2):
        super().__init__()
        self.encoder = FrozenTokenEncoder(backbone, block_index)
        self.blend = ConditionalBlend(prompt_dim, self.encoder.dim)
        self.project = GlobalFeatureProjector(self.encoder.dim, out_channels)

    def forward(self, image: torch.Tensor, z_g: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
        tokens = self.encoder(image)
        return self.project(self.blend(tokens, z_g), target)
