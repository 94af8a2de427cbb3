"""Vision encoder adapters, channel projections, and the segmentation decoder.

The encoder contract: images [B,3,H,W] with H,W divisible by the patch size
map to two token grids [B,width,H/16,W/16] tapped at a shallow and a deep
block. Frozen adapters expose no trainable parameters (toy weights live in
buffers regenerated from a seed).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig, ModelConfig


class ShapeError(ValueError):
    pass


def group_norm(channels: int, groups: int) -> nn.GroupNorm:
    if channels % groups != 0:
        groups = 1
    return nn.GroupNorm(groups, channels)


def upsample_logits(logits: torch.Tensor, size_hw: tuple[int, int]) -> torch.Tensor:
    if logits.shape[-2:] == tuple(size_hw):
        return logits
    return F.interpolate(logits, size=size_hw, mode="bilinear", align_corners=False)


class ImageEncoder(nn.Module):
    """Adapter base: frozen feature extractor returning (shallow, deep) grids."""

    patch_size: int
    width: int
    frozen: bool = True

    def check_input(self, images: torch.Tensor) -> None:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected [B,3,H,W], got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(
                f"image size {h}x{w} not divisible by patch size {self.patch_size}; "
                f"pad the input to a multiple of {self.patch_size}"
            )


class ToyImageEncoder(ImageEncoder):
    """Desk-scale stand-in for a pretrained ViT: a seeded fixed random linear
    patch embedding followed by two fixed channel-mixing layers. The shallow
    tap is the first mixing layer's output, the deep tap the second's.
    All weights are buffers; nothing here ever trains."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.width = cfg.width
        rng = np.random.default_rng(np.random.SeedSequence([0x70E, cfg.seed]))
        in_dim = 3 * cfg.patch_size**2

        def buf(name, shape, scale):
            t = torch.from_numpy(rng.standard_normal(shape) * scale).float()
            self.register_buffer(name, t)

        buf("patch_weight", (self.width, in_dim), 1.0 / np.sqrt(in_dim))
        buf("patch_bias", (self.width,), 0.02)
        buf("mix1_weight", (self.width, self.width), 1.0 / np.sqrt(self.width))
        buf("mix1_bias", (self.width,), 0.02)
        buf("mix2_weight", (self.width, self.width), 1.0 / np.sqrt(self.width))
        buf("mix2_bias", (self.width,), 0.02)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self.check_input(images)
        b, _, h, w = images.shape
        gh, gw = h // self.patch_size, w // self.patch_size
        patches = F.unfold(images, kernel_size=self.patch_size, stride=self.patch_size)
        tokens = patches.transpose(1, 2)  # [B, N, 3*ps*ps]
        embedded = tokens @ self.patch_weight.to(tokens.dtype).T + self.patch_bias.to(tokens.dtype)
        shallow = torch.tanh(embedded @ self.mix1_weight.to(tokens.dtype).T + self.mix1_bias.to(tokens.dtype))
        deep = torch.tanh(shallow @ self.mix2_weight.to(tokens.dtype).T + self.mix2_bias.to(tokens.dtype))
        to_grid = lambda t: t.transpose(1, 2).reshape(b, self.width, gh, gw)
        return to_grid(shallow), to_grid(deep)


ENCODER_REGISTRY = {"toy": ToyImageEncoder}


def build_image_encoder(cfg: EncoderConfig) -> ImageEncoder:
    try:
        return ENCODER_REGISTRY[cfg.kind](cfg)
    except KeyError:
        raise ValueError(
            f"unknown encoder kind '{cfg.kind}' (registered: {sorted(ENCODER_REGISTRY)})"
        ) from None


class FeatureProjector(nn.Module):
    """1x1 convs taking encoder grids to the decoder's low/high channel counts."""

    def __init__(self, width: int, low_channels: int, high_channels: int):
        super().__init__()
        self.width = width
        self.low = nn.Conv2d(width, low_channels, kernel_size=1)
        self.high = nn.Conv2d(width, high_channels, kernel_size=1)

    def forward(self, shallow: torch.Tensor, deep: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if shallow.shape[1] != self.width or deep.shape[1] != self.width:
            raise ShapeError(
                f"encoder width mismatch: projector expects {self.width} channels, "
                f"got {shallow.shape[1]}/{deep.shape[1]}"
            )
        return self.low(shallow), self.high(deep)


class ASPP(nn.Module):
    """Parallel dilated branches plus image pooling; rate 1 means a 1x1 conv."""

    def __init__(self, in_channels: int, out_channels: int, rates: list[int], groups: int):
        super().__init__()

        def block(rate: int) -> nn.Sequential:
            if rate == 1:
                conv = nn.Conv2d(in_channels, out_channels, 1, bias=False)
            else:
                conv = nn.Conv2d(in_channels, out_channels, 3, padding=rate, dilation=rate, bias=False)
            return nn.Sequential(conv, group_norm(out_channels, groups), nn.ReLU(inplace=True))

        self.branches = nn.ModuleList(block(r) for r in rates)
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            group_norm(out_channels, groups),
            nn.ReLU(inplace=True),
        )
        n_branches = len(rates) + 1
        self.project = nn.Sequential(
            nn.Conv2d(n_branches * out_channels, out_channels, 1, bias=False),
            group_norm(out_channels, groups),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [branch(x) for branch in self.branches]
        pooled = self.pool(x)
        feats.append(pooled.expand(-1, -1, x.shape[-2], x.shape[-1]))
        return self.project(torch.cat(feats, dim=1))


class Decoder(nn.Module):
    """DeepLabV3+-style head: ASPP on the deep features, low-level reduction,
    fusion convs, classifier, bilinear upsample to the image resolution. Both
    feature maps share one grid (ViT taps), so no intermediate resampling."""

    def __init__(self, cfg: ModelConfig, num_classes: int):
        super().__init__()
        g = cfg.norm_groups
        self.aspp = ASPP(cfg.high_channels, cfg.aspp_channels, cfg.aspp_rates, g)
        self.reduce_low = nn.Sequential(
            nn.Conv2d(cfg.low_channels, cfg.low_reduced_channels, 1, bias=False),
            group_norm(cfg.low_reduced_channels, g),
            nn.ReLU(inplace=True),
        )
        fused = cfg.aspp_channels + cfg.low_reduced_channels
        self.fuse = nn.Sequential(
            nn.Conv2d(fused, cfg.decoder_channels, 3, padding=1, bias=False),
            group_norm(cfg.decoder_channels, g),
            nn.ReLU(inplace=True),
            nn.Conv2d(cfg.decoder_channels, cfg.decoder_channels, 3, padding=1, bias=False),
            group_norm(cfg.decoder_channels, g),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(cfg.decoder_channels, num_classes, 1)

    def forward(self, f_low: torch.Tensor, f_high: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        if f_low.shape[-2:] != f_high.shape[-2:]:
            raise ShapeError(
                f"low/high grids disagree: {f_low.shape[-2:]} vs {f_high.shape[-2:]}"
            )
        x = self.aspp(f_high)
        x = torch.cat([x, self.reduce_low(f_low)], dim=1)
        x = self.fuse(x)
        logits = self.classifier(x)
        return upsample_logits(logits, out_hw)
