"""Optimization loop: SGD with poly decay driving the weak-to-strong
semi-supervised step.

Every stochastic choice (batch composition, augmentations, cutmix boxes,
feature dropout) is a pure function of (config seed, step), so a resumed run
replays exactly the sequence an uninterrupted run would have produced.
"""

from __future__ import annotations

import math
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .augment import apply_cutmix, augment_labeled, augment_pair, sample_cutmix_plans
from .checkpoint import (
    apply_model_state,
    apply_optimizer_state,
    load_checkpoint,
    save_checkpoint,
)
from .config import TrainConfig
from .data import Sample, seed_for
from .losses import LossReport, supervised_loss, total_loss, unsupervised_loss
from .model import build_model
from .pseudo import ThresholdState, fuse_logits, generate_pseudo_labels, update_threshold


class NumericError(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the component
    breakdown for the diagnostic dump."""

    def __init__(self, message: str, components: dict | None = None):
        super().__init__(message)
        self.components = components or {}


def poly_lr(step: int, total_steps: int, lr0: float, power: float) -> float:
    """lr0 * (1 - step/total_steps)^power."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power


@lru_cache(maxsize=64)
def _epoch_perm(n: int, seed: int, tag: str, epoch: int) -> tuple[int, ...]:
    rng = np.random.default_rng(seed_for(seed, tag, epoch))
    return tuple(int(i) for i in rng.permutation(n))


def batch_indices(n: int, batch: int, step: int, seed: int, tag: str) -> list[int]:
    """Sample indices for one step, read from an endless stream of freshly
    shuffled epochs at offset step*batch. Short datasets cycle."""
    if n <= 0:
        return []
    out = []
    for j in range(batch):
        epoch, pos = divmod(step * batch + j, n)
        out.append(_epoch_perm(n, seed, tag, epoch)[pos])
    return out


def _to_batch(arrays: list[np.ndarray], dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)).to(dtype)


class Trainer:
    """Owns all mutable training state: parameters, optimizer, threshold,
    step counter."""

    def __init__(
        self,
        cfg: TrainConfig,
        labeled: list[Sample],
        unlabeled: list[Sample] | None = None,
    ):
        if not labeled:
            raise ValueError("training needs at least one labeled sample")
        self.cfg = cfg
        self.labeled = labeled
        self.unlabeled = unlabeled or []
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        self.model = build_model(cfg, seed=cfg.seed)
        self.optimizer = torch.optim.SGD(
            self.model.param_groups(cfg.optim.weight_decay),
            lr=cfg.optim.lr0,
            momentum=cfg.optim.momentum,
        )
        self.threshold = ThresholdState(tau=cfg.pseudo.tau_init)
        self.step = 0
        self._mean = torch.tensor(cfg.data.mean).view(1, 3, 1, 1)
        self._std = torch.tensor(cfg.data.std).view(1, 3, 1, 1)

    @property
    def iters_per_epoch(self) -> int:
        opt = self.cfg.optim
        if self.unlabeled:
            return math.ceil(len(self.unlabeled) / opt.batch_unlabeled)
        return math.ceil(len(self.labeled) / opt.batch_labeled)

    @property
    def total_steps(self) -> int:
        if self.cfg.optim.total_steps is not None:
            return self.cfg.optim.total_steps
        return self.cfg.optim.epochs * self.iters_per_epoch

    def _normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self._mean) / self._std

    def _labeled_batch(self, step: int) -> tuple[torch.Tensor, torch.Tensor]:
        cfg = self.cfg
        images, masks = [], []
        for slot, idx in enumerate(
            batch_indices(len(self.labeled), cfg.optim.batch_labeled, step, cfg.seed, "labeled")
        ):
            s = self.labeled[idx]
            img, mask = augment_labeled(
                s.image,
                s.mask,
                seed_for(cfg.seed, "aug-labeled", step, slot),
                cfg.augment,
            )
            images.append(img)
            masks.append(mask)
        return self._normalize(_to_batch(images, torch.float32)), _to_batch(masks, torch.int64)

    def _unlabeled_batch(self, step: int) -> tuple[torch.Tensor, torch.Tensor]:
        cfg = self.cfg
        weak, strong = [], []
        for slot, idx in enumerate(
            batch_indices(len(self.unlabeled), cfg.optim.batch_unlabeled, step, cfg.seed, "unlabeled")
        ):
            pair = augment_pair(
                self.unlabeled[idx].image,
                seed_for(cfg.seed, "aug-unlabeled", step, slot),
                cfg.augment,
            )
            weak.append(pair.weak)
            strong.append(pair.strong)
        return (
            self._normalize(_to_batch(weak, torch.float32)),
            self._normalize(_to_batch(strong, torch.float32)),
        )

    def _anchors(self) -> tuple[torch.Tensor, torch.Tensor] | None:
        align = self.cfg.align
        if align.use_prototype and align.use_text:
            return self.model.prototypes.weight, self.model.text_branch.embeddings()
        return None

    def train_step(self) -> LossReport:
        cfg = self.cfg
        step = self.step
        self.model.train()
        lr = poly_lr(step, self.total_steps, cfg.optim.lr0, cfg.optim.poly_power)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        x_l, y_l = self._labeled_batch(step)
        out_l = self.model(x_l, with_alignment=True)
        sup = supervised_loss(out_l, y_l, cfg.loss, self._anchors())

        mean_conf = None
        valid_fraction = 0.0
        if self.unlabeled:
            x_weak, x_strong = self._unlabeled_batch(step)
            with torch.no_grad():
                out_w = self.model(x_weak, with_alignment=True)
                fused_w = fuse_logits(out_w.s_dl, out_w.s_zp, out_w.s_zt, cfg.fusion)
            pl = generate_pseudo_labels(fused_w, self.threshold.tau)
            plans = sample_cutmix_plans(
                x_strong.shape[0],
                (x_strong.shape[-2], x_strong.shape[-1]),
                seed_for(cfg.seed, "cutmix", step),
                cfg.augment,
            )
            x_strong_m = apply_cutmix(x_strong, plans)
            labels_m = apply_cutmix(pl.labels, plans)
            valid_m = apply_cutmix(pl.valid, plans)
            kl_target = apply_cutmix(out_w.s_dl.detach(), plans)
            out_s = self.model(x_strong_m, with_alignment=False)
            fp_seed = int(
                np.random.default_rng(seed_for(cfg.seed, "feature-perturb", step)).integers(2**31 - 2)
            )
            out_fp = self.model(
                x_weak,
                with_alignment=False,
                perturb_rate=cfg.augment.feature_perturb_rate,
                perturb_seed=fp_seed,
            )
            unsup = unsupervised_loss(
                out_s.s_dl,
                labels_m,
                valid_m,
                kl_target,
                out_fp.s_dl,
                pl.labels,
                pl.valid,
                cfg.loss,
            )
            mean_conf = pl.mean_confidence
            valid_fraction = valid_m.float().mean().item()
        else:
            zero = out_l.s_dl.sum() * 0.0
            unsup = {"unsup_hard": zero, "unsup_kl": zero, "unsup_corr": zero, "unsup_total": zero}

        loss, report = total_loss(sup, unsup, cfg.loss, valid_fraction)
        if not math.isfinite(report.total):
            raise NumericError(
                f"non-finite loss at step {step}: {report.as_dict()}", report.as_dict()
            )
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        if mean_conf is not None:
            self.threshold = update_threshold(self.threshold, mean_conf, cfg.pseudo)
        self.step += 1
        return report

    def run(self, num_steps: int | None = None, callback=None) -> list[LossReport]:
        """Advance up to num_steps (default: the full schedule remainder)."""
        end = self.total_steps if num_steps is None else min(self.total_steps, self.step + num_steps)
        reports = []
        while self.step < end:
            report = self.train_step()
            reports.append(report)
            if callback is not None:
                callback(self.step, report, self)
        return reports

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(
            path, self.model, self.cfg, self.optimizer, step=self.step, tau=self.threshold.tau
        )

    def load(self, path: str | Path) -> None:
        """Restore parameters, momentum, step, and threshold in place. The
        checkpoint's config must describe the same model shape."""
        bundle = load_checkpoint(path)
        apply_model_state(self.model, bundle)
        apply_optimizer_state(self.optimizer, bundle)
        self.step = bundle.step
        self.threshold = ThresholdState(tau=bundle.tau)
