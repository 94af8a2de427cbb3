"""Full segmentation model: frozen encoder, feature projection, decoder head,
and the two alignment branches over one shared pixel-embedding space."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .alignment import PixelProjector, PrototypeBank, TextBranch, build_text_encoder
from .augment import feature_perturb
from .backbone import Decoder, FeatureProjector, build_image_encoder
from .config import TrainConfig


@dataclass
class ModelOutputs:
    """Per-view logits. Decoder logits live at input resolution; alignment
    logits stay at feature resolution until fusion upsamples them."""

    s_dl: torch.Tensor
    s_zp: torch.Tensor | None
    s_zt: torch.Tensor | None
    z: torch.Tensor | None
    grid_hw: tuple[int, int]


class SegModel(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        num_classes = cfg.data.num_classes
        if len(cfg.align.class_names) != num_classes:
            raise ValueError(
                f"{len(cfg.align.class_names)} class names for {num_classes} classes"
            )
        self.encoder = build_image_encoder(cfg.encoder)
        self.projector = FeatureProjector(cfg.encoder.width, cfg.model.low_channels, cfg.model.high_channels)
        self.decoder = Decoder(cfg.model, num_classes)
        self.pixel_proj = PixelProjector(cfg.model.high_channels, cfg.align.embed_dim)
        self.prototypes = PrototypeBank(num_classes, cfg.align.embed_dim)
        self.text_branch = TextBranch(cfg.align, build_text_encoder(cfg.text_encoder))

    def forward(
        self,
        images: torch.Tensor,
        with_alignment: bool = True,
        perturb_rate: float = 0.0,
        perturb_seed: int | None = None,
    ) -> ModelOutputs:
        shallow, deep = self.encoder(images)
        f_low, f_high = self.projector(shallow, deep)
        if perturb_rate > 0.0:
            if perturb_seed is None:
                raise ValueError("perturb_seed is required when perturb_rate > 0")
            f_low = feature_perturb(f_low, perturb_rate, perturb_seed)
            f_high = feature_perturb(f_high, perturb_rate, perturb_seed + 1)
        out_hw = (images.shape[-2], images.shape[-1])
        s_dl = self.decoder(f_low, f_high, out_hw)
        grid_hw = (f_high.shape[-2], f_high.shape[-1])
        if not with_alignment:
            return ModelOutputs(s_dl=s_dl, s_zp=None, s_zt=None, z=None, grid_hw=grid_hw)
        z, grid_hw = self.pixel_proj(f_high)
        s_zp = self.prototypes.logits(z, grid_hw, self.cfg.align.temperature) if self.cfg.align.use_prototype else None
        s_zt = None
        if self.cfg.align.use_text:
            s_zt = self.text_branch.logits(z, self.text_branch.embeddings(), grid_hw)
        return ModelOutputs(s_dl=s_dl, s_zp=s_zp, s_zt=s_zt, z=z, grid_hw=grid_hw)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def param_groups(self, weight_decay: float) -> list[dict]:
        """Two optimizer groups: conv/linear weights decay, everything else
        (biases, norm gains, prototypes, context tokens) does not."""
        decay, no_decay = [], []
        decayed_names = set()
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)) and module.weight.requires_grad:
                decay.append(module.weight)
                decayed_names.add(id(module.weight))
        for p in self.parameters():
            if p.requires_grad and id(p) not in decayed_names:
                no_decay.append(p)
        return [
            {"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ]


def build_model(cfg: TrainConfig, seed: int | None = None) -> SegModel:
    """Construct a model with seeded trainable init. Frozen toy weights carry
    their own seeds, so two builds with equal seeds match exactly."""
    if seed is not None:
        torch.manual_seed(seed)
    return SegModel(cfg)
