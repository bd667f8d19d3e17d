"""Bottleneck fusion, UpFusion decoder and the assembled segmentation network."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterator, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .global_path import GlobalPath, ToyViT, load_external_backbone
from .layers import ASPP, SqueezeExcitation, conv_gn_relu, group_norm
from .local_path import LocalPath
from .prompts import EncodedPrompts, NullableEmbeddings, PromptPair, build_text_encoder

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class Fusion(nn.Module):
    """``ASPP(conv1x1([F_g || F_l]))``; the global map comes first in the concatenation."""

    def __init__(self, global_channels: int, local_channels: int, out_channels: int,
                 rates: Sequence[int] = (1, 6, 12, 18)):
        super().__init__()
        self.reduce = conv_gn_relu(global_channels + local_channels, out_channels, kernel=1)
        self.refine = ASPP(out_channels, out_channels, rates)

    def forward(self, f_g: torch.Tensor, f_l: torch.Tensor) -> torch.Tensor:
        if f_g.shape[-2:] != f_l.shape[-2:]:
            raise ValueError(f"global map {tuple(f_g.shape[-2:])} and local map {tuple(f_l.shape[-2:])} are misaligned")
        return self.refine(self.reduce(torch.cat([f_g, f_l], dim=1)))


class UpFusion(nn.Module):
    """2x bilinear upsample, concat skip, squeeze-excitation, then a depthwise-pointwise residual block."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, se_reduction: int = 4):
        super().__init__()
        cat = in_channels + skip_channels
        self.se = SqueezeExcitation(cat, se_reduction)
        self.fuse = conv_gn_relu(cat, out_channels, kernel=1)
        self.depthwise = nn.Conv2d(out_channels, out_channels, 3, padding=1, groups=out_channels, bias=False)
        self.pointwise = nn.Conv2d(out_channels, out_channels, 1, bias=False)
        self.norm = group_norm(out_channels)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if x.shape[-2:] != skip.shape[-2:]:
            raise ValueError(f"upsampled map {tuple(x.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}")
        h = self.fuse(self.se(torch.cat([x, skip], dim=1)))
        return F.relu(h + self.norm(self.pointwise(self.depthwise(h))))


class NullBUS(nn.Module):
    """Prompt-optional dual-path segmentation network.

    ``forward(images, prompts)`` handles every prompt regime in one pass: each
    missing (or dropped) prompt is replaced by its learned null embedding.
    Ablations (``config.ablation``) swap a path for a learned constant map or
    disable text entirely; unused parameters are frozen so optimizers skip them.
    """

    def __init__(self, config: ModelConfig, encoder=None, backbone: nn.Module | None = None):
        super().__init__()
        self.config = config
        c = config
        encoder = encoder or build_text_encoder(c.text_encoder, c.text_dim, c.text_seed, c.embeddings_path)
        if encoder.dim != c.text_dim:
            raise ValueError(f"text encoder dim {encoder.dim} != configured text_dim {c.text_dim}")
        self.prompts = NullableEmbeddings(encoder, p=c.prompt_dropout, use_text=c.ablation != "zero_text",
                                          null_noise=c.null_noise, seed=c.text_seed)

        if backbone is None:
            if c.backbone == "toy":
                backbone = ToyViT(c.image_size, c.patch_size, c.token_dim, c.backbone_depth, c.backbone_heads,
                                  seed=c.backbone_seed)
            else:
                backbone = load_external_backbone(c.backbone_path or "", image_size=c.image_size)
        self.global_path = GlobalPath(backbone, c.text_dim, c.C_g, c.token_block_index)

        widths = c.stage_widths
        self.local_path = LocalPath(c.text_dim, widths, c.stage_blocks, c.C_l, c.aspp_rates, c.tcm_stages)
        self.local_path.aspp.check_footprint(c.bottleneck_size)

        self.fusion = Fusion(c.C_g, c.C_l, c.C_f, c.aspp_rates)
        self.fusion.refine.check_footprint(c.bottleneck_size)
        dec = c.decoder_channels
        skip_ch = [widths[3], widths[2], widths[1], widths[0]]
        ins = [c.C_f, *dec[:-1]]
        self.decoder = nn.ModuleList(
            UpFusion(cin, cs, cout, c.se_reduction) for cin, cs, cout in zip(ins, skip_ch, dec)
        )
        self.head = nn.Conv2d(dec[-1], 1, 1)

        if c.ablation == "zero_global":
            self.global_constant = nn.Parameter(torch.zeros(1, c.C_g, 1, 1))
            self.global_path.requires_grad_(False)
        if c.ablation == "zero_local":
            self.local_constant = nn.Parameter(torch.zeros(1, c.C_l, 1, 1))
            self.local_path.requires_grad_(False)

    # -- pieces -----------------------------------------------------------

    def encode_prompts(self, prompts: Sequence[PromptPair], mode: str | None = None,
                       generator: torch.Generator | None = None) -> EncodedPrompts:
        return self.prompts(prompts, mode, generator)

    def bottleneck(self, images: torch.Tensor, enc: EncodedPrompts):
        """Return (F_g, F_l, skips e1..e4)."""
        b, _, h, w = images.shape
        hb, wb = h // 32, w // 32
        c = self.config
        widths = c.stage_widths
        if c.ablation == "zero_local":
            f_l = self.local_constant.expand(b, -1, hb, wb)
            skips = [images.new_zeros(b, widths[i], h >> (i + 1), w >> (i + 1)) for i in range(4)]
        else:
            f_l, skips = self.local_path(images, enc.z_l)
        if c.ablation == "zero_global":
            f_g = self.global_constant.expand(b, -1, hb, wb)
        else:
            f_g = self.global_path(images, enc.z_g, (hb, wb))
        return f_g, f_l, skips

    def decode(self, fused: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        x = fused
        for stage, skip in zip(self.decoder, reversed(skips)):
            x = stage(x, skip)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        logits = self.head(x)
        out = self.config.output_size
        if logits.shape[-2:] != (out, out):
            logits = F.interpolate(logits, size=(out, out), mode="bilinear", align_corners=False)
        return logits

    def forward(self, images: torch.Tensor, prompts: Sequence[PromptPair], mode: str | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
        """images: (B, 1, H, W) in [0, 1]; returns logits (B, 1, out, out)."""
        if images.dim() == 3:
            images = images[:, None]
        if len(prompts) != images.shape[0]:
            raise ValueError(f"{images.shape[0]} images but {len(prompts)} prompt pairs")
        enc = self.encode_prompts(prompts, mode, generator)
        f_g, f_l, skips = self.bottleneck(images, enc)
        return self.decode(self.fusion(f_g, f_l), skips)

    # -- parameters -------------------------------------------------------

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        return (p for p in self.parameters() if p.requires_grad)

    def named_trainable_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        return ((n, p) for n, p in self.named_parameters() if p.requires_grad)

    def backbone_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        return self.global_path.encoder.backbone.named_parameters()


def build_model(config: ModelConfig, seed: int | None = 0, **kwargs) -> NullBUS:
    """Construct a model; ``seed`` fixes the initialization without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        return NullBUS(config, **kwargs)


def build_ablation(variant: str, base_config: ModelConfig, seed: int | None = 0, **kwargs) -> NullBUS:
    """Build one of the ablation variants: full, zero_text, zero_local, zero_global."""
    from .config import ABLATIONS

    if variant not in ABLATIONS:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")
    config = ModelConfig(**{**base_config.to_dict(), "ablation": variant})
    return build_model(config, seed=seed, **kwargs)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(model: NullBUS, path: str | Path, **extra) -> Path:
    path = Path(path)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": model.config.to_dict(),
            "config_hash": model.config.hash(),
            "state_dict": model.state_dict(),
            "extra": extra,
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path, config: ModelConfig | None = None, force: bool = False) -> tuple[NullBUS, dict]:
    """Rebuild a model from a checkpoint.

    If ``config`` is given and its hash differs from the stored one, loading is
    refused unless ``force`` (then the given config is used and tensors are
    loaded non-strictly).
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('format_version')!r}")
    stored = ModelConfig(**blob["config"])
    if stored.hash() != blob["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its recorded hash")
    strict = True
    if config is not None and config.hash() != blob["config_hash"]:
        if not force:
            raise CheckpointError(
                f"{path}: config hash {config.hash()} differs from checkpoint {blob['config_hash']} (use --force)"
            )
        logger.warning("loading %s with a mismatched config (forced)", path)
        stored, strict = config, False
    model = NullBUS(stored)
    if strict:
        model.load_state_dict(blob["state_dict"])
    else:
        own = model.state_dict()
        compatible = {k: v for k, v in blob["state_dict"].items() if k in own and own[k].shape == v.shape}
        model.load_state_dict(compatible, strict=False)
    model.eval()
    return model, blob.get("extra", {})
