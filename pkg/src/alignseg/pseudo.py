"""Logit fusion across branches and confidence-gated pseudo-labels with an
EMA-tracked threshold."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .backbone import upsample_logits
from .config import FusionConfig, PseudoConfig


def fuse_logits(
    s_dl: torch.Tensor,
    s_zp: torch.Tensor | None,
    s_zt: torch.Tensor | None,
    fusion: FusionConfig,
) -> torch.Tensor:
    """S_fuse = S_dl + eta_p * up(S_zp) + eta_t * up(S_zt).

    Alignment terms are upsampled to decoder resolution before the weighted
    sum. A zero weight (or a missing branch) skips its term entirely so the
    result is the identical S_dl tensor values, not S_dl plus a zero tensor.
    """
    out_hw = (s_dl.shape[-2], s_dl.shape[-1])
    fused = s_dl
    if s_zp is not None and fusion.eta_p != 0.0:
        fused = fused + fusion.eta_p * upsample_logits(s_zp, out_hw)
    if s_zt is not None and fusion.eta_t != 0.0:
        fused = fused + fusion.eta_t * upsample_logits(s_zt, out_hw)
    return fused


@dataclass
class PseudoLabelMap:
    """Hard labels with a per-pixel confidence gate. `mean_confidence` is the
    batch mean of max softmax probabilities over all pixels, gated or not;
    it feeds the threshold EMA."""

    labels: torch.Tensor
    valid: torch.Tensor
    confidence: torch.Tensor
    mean_confidence: float

    @property
    def valid_fraction(self) -> float:
        return self.valid.float().mean().item()


def generate_pseudo_labels(fused_logits: torch.Tensor, tau: float) -> PseudoLabelMap:
    """Argmax labels from fused logits; pixels whose max softmax probability
    reaches tau are valid. Detached from any graph."""
    with torch.no_grad():
        probs = torch.softmax(fused_logits.detach(), dim=1)
        confidence, labels = probs.max(dim=1)
        valid = confidence >= tau
        return PseudoLabelMap(
            labels=labels,
            valid=valid,
            confidence=confidence,
            mean_confidence=confidence.mean().item(),
        )


@dataclass
class ThresholdState:
    tau: float


def update_threshold(state: ThresholdState, batch_confidence: float, cfg: PseudoConfig) -> ThresholdState:
    """EMA step tau <- alpha * tau + (1 - alpha) * stat, clamped to the
    configured band. Returns a new state; the old one is untouched."""
    if not 0.0 <= cfg.ema_alpha <= 1.0:
        raise ValueError(f"ema_alpha must be in [0, 1], got {cfg.ema_alpha}")
    tau = cfg.ema_alpha * state.tau + (1.0 - cfg.ema_alpha) * batch_confidence
    tau = min(max(tau, cfg.tau_min), cfg.tau_max)
    return ThresholdState(tau=tau)
