"""Training objectives.

Supervised: cross-entropy per scoring branch plus an anchor-agreement term
between normalized prototypes and text embeddings. Unsupervised: gated hard
CE on strong views, a soft KL pull toward the weak prediction, and gated hard
CE on a feature-perturbed weak pass. The overall loss averages the two halves.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .alignment import l2_normalize
from .backbone import upsample_logits
from .config import LossConfig
from .data import IGNORE_VALUE
from .model import ModelOutputs


def ce_ignore(logits: torch.Tensor, targets: torch.Tensor, ignore_value: int = IGNORE_VALUE) -> tuple[torch.Tensor, int]:
    """Mean cross-entropy over labeled pixels. Returns (loss, n_valid); with
    zero valid pixels the loss is a graph-connected zero so callers can sum
    terms without branching."""
    valid = targets != ignore_value
    n_valid = int(valid.sum())
    if n_valid == 0:
        return logits.sum() * 0.0, 0
    return F.cross_entropy(logits, targets, ignore_index=ignore_value), n_valid


def masked_ce(logits: torch.Tensor, labels: torch.Tensor, valid: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Mean cross-entropy over pixels where `valid` is set."""
    n_valid = int(valid.sum())
    if n_valid == 0:
        return logits.sum() * 0.0, 0
    per_pixel = F.cross_entropy(logits, labels, reduction="none")
    return per_pixel[valid].mean(), n_valid


def kl_consistency(student_logits: torch.Tensor, teacher_logits: torch.Tensor, stopgrad_target: bool = True) -> torch.Tensor:
    """Mean over all pixels of KL(softmax(student) || softmax(teacher)).
    The teacher side is detached by default so the pull is one-directional."""
    if stopgrad_target:
        teacher_logits = teacher_logits.detach()
    log_p = F.log_softmax(student_logits, dim=1)
    log_q = F.log_softmax(teacher_logits, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()


def alignment_loss(prototypes: torch.Tensor, text_embeds: torch.Tensor, kind: str) -> torch.Tensor:
    """Agreement between the two per-class anchor sets, both row-normalized
    first. `mse` is elementwise mean squared error; `cosine` is one minus the
    mean per-class cosine; `kl` treats each normalized row as logits and takes
    the mean KL(softmax(P_c) || softmax(T_c)); `none` is a constant zero."""
    if kind == "none":
        return prototypes.sum() * 0.0
    p = l2_normalize(prototypes)
    t = l2_normalize(text_embeds)
    if kind == "mse":
        return F.mse_loss(p, t)
    if kind == "cosine":
        return 1.0 - (p * t).sum(dim=1).mean()
    if kind == "kl":
        log_p = F.log_softmax(p, dim=1)
        log_q = F.log_softmax(t, dim=1)
        return (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()
    raise ValueError(f"unknown alignment loss kind '{kind}'")


def supervised_loss(
    outputs: ModelOutputs,
    targets: torch.Tensor,
    cfg: LossConfig,
    anchors: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> dict[str, torch.Tensor]:
    """CE against ground truth on every active branch plus the anchor term.
    Alignment logits are bilinearly upsampled to label resolution before CE.
    `anchors` carries (prototype matrix, text matrix) when both branches are
    on; passing None drops the agreement term."""
    out_hw = (targets.shape[-2], targets.shape[-1])
    zero = outputs.s_dl.sum() * 0.0
    ce_dl, _ = ce_ignore(outputs.s_dl, targets)
    ce_proto = zero
    if outputs.s_zp is not None:
        ce_proto, _ = ce_ignore(upsample_logits(outputs.s_zp, out_hw), targets)
    ce_text = zero
    if outputs.s_zt is not None:
        ce_text, _ = ce_ignore(upsample_logits(outputs.s_zt, out_hw), targets)
    align = zero
    if anchors is not None:
        align = alignment_loss(anchors[0], anchors[1], cfg.align_kind)
    total = ce_dl + ce_proto + ce_text + align
    return {
        "sup_ce_dl": ce_dl,
        "sup_ce_proto": ce_proto,
        "sup_ce_text": ce_text,
        "sup_align": align,
        "sup_total": total,
    }


def unsupervised_loss(
    strong_logits: torch.Tensor,
    mixed_labels: torch.Tensor,
    mixed_valid: torch.Tensor,
    weak_target_logits: torch.Tensor,
    perturbed_logits: torch.Tensor | None,
    plain_labels: torch.Tensor | None,
    plain_valid: torch.Tensor | None,
    cfg: LossConfig,
) -> dict[str, torch.Tensor]:
    """Weighted unlabeled objective.

    The hard term scores the strong view against gated pseudo-labels; both
    were mixed with the same cutmix plans upstream, as was the weak logit map
    serving as the KL target. The correlation term scores a feature-perturbed
    pass over the unmixed weak view, so it gates with the unmixed labels.
    """
    lam_hard, lam_kl, lam_corr = cfg.lambda_
    hard, _ = masked_ce(strong_logits, mixed_labels, mixed_valid)
    kl = kl_consistency(strong_logits, weak_target_logits, cfg.kl_stopgrad_target)
    if perturbed_logits is not None:
        if plain_labels is None or plain_valid is None:
            raise ValueError("perturbed branch needs its own labels and gate")
        corr, _ = masked_ce(perturbed_logits, plain_labels, plain_valid)
    else:
        corr = strong_logits.sum() * 0.0
    total = lam_hard * hard + lam_kl * kl + lam_corr * corr
    return {
        "unsup_hard": hard,
        "unsup_kl": kl,
        "unsup_corr": corr,
        "unsup_total": total,
    }


@dataclass
class LossReport:
    """Scalar snapshot of one step. Composite fields are recomputed from the
    component floats in double precision, so the identities
    total == 0.5 * (sup_total + unsup_total) and the weighted sums hold to
    roundoff when checked from the report alone."""

    total: float
    sup_total: float
    unsup_total: float
    sup_ce_dl: float
    sup_ce_proto: float
    sup_ce_text: float
    sup_align: float
    unsup_hard: float
    unsup_kl: float
    unsup_corr: float
    valid_fraction: float

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def total_loss(
    sup: dict[str, torch.Tensor],
    unsup: dict[str, torch.Tensor],
    cfg: LossConfig,
    valid_fraction: float,
) -> tuple[torch.Tensor, LossReport]:
    """Backward target and its scalar report. The tensor sums in model dtype;
    the report rebuilds every composite from component floats."""
    loss = 0.5 * (sup["sup_total"] + unsup["unsup_total"])
    comp = {k: float(v.detach()) for k, v in {**sup, **unsup}.items()}
    lam_hard, lam_kl, lam_corr = cfg.lambda_
    sup_total = comp["sup_ce_dl"] + comp["sup_ce_proto"] + comp["sup_ce_text"] + comp["sup_align"]
    unsup_total = lam_hard * comp["unsup_hard"] + lam_kl * comp["unsup_kl"] + lam_corr * comp["unsup_corr"]
    report = LossReport(
        total=0.5 * (sup_total + unsup_total),
        sup_total=sup_total,
        unsup_total=unsup_total,
        sup_ce_dl=comp["sup_ce_dl"],
        sup_ce_proto=comp["sup_ce_proto"],
        sup_ce_text=comp["sup_ce_text"],
        sup_align=comp["sup_align"],
        unsup_hard=comp["unsup_hard"],
        unsup_kl=comp["unsup_kl"],
        unsup_corr=comp["unsup_corr"],
        valid_fraction=valid_fraction,
    )
    return loss, report
