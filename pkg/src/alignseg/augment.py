"""Weak/strong view generation, CutMix, and feature-level perturbation.

Weak and strong views of one image share a single geometric transform
(rescale, crop, flip); only photometric ops differ, so pixel grids of the
two views correspond 1:1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter1d

from .config import AugmentConfig
from .data import seed_for


@dataclass
class Geometry:
    """Record of one shared geometric transform."""

    scaled_h: int
    scaled_w: int
    pad_top: int
    pad_left: int
    crop_top: int
    crop_left: int
    crop_size: int
    flip: bool


@dataclass
class ViewPair:
    weak: np.ndarray
    strong: np.ndarray
    geometry: Geometry


@dataclass
class CutMixPlan:
    box: tuple[int, int, int, int]  # top, left, h, w
    partner_index: int


def _resize(image: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image))[None].float()
    if mode == "nearest":
        out = F.interpolate(t, size=(out_h, out_w), mode="nearest")
    else:
        out = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out[0].numpy()


def _reflect_pad(image: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    if top == bottom == left == right == 0:
        return image
    pad = [(0, 0)] * (image.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(image, pad, mode="reflect")


def sample_geometry(shape_hw: tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator) -> Geometry:
    h, w = shape_hw
    scale = rng.uniform(cfg.scale_min, cfg.scale_max)
    scaled_h = max(1, int(round(h * scale)))
    scaled_w = max(1, int(round(w * scale)))
    pad_h = max(0, cfg.crop - scaled_h)
    pad_w = max(0, cfg.crop - scaled_w)
    pad_top = pad_h // 2
    pad_left = pad_w // 2
    avail_h = scaled_h + pad_h - cfg.crop
    avail_w = scaled_w + pad_w - cfg.crop
    crop_top = int(rng.integers(0, avail_h + 1))
    crop_left = int(rng.integers(0, avail_w + 1))
    flip = bool(rng.random() < cfg.hflip_prob)
    return Geometry(scaled_h, scaled_w, pad_top, pad_left, crop_top, crop_left, cfg.crop, flip)


def apply_geometry(image: np.ndarray, geom: Geometry, is_mask: bool = False) -> np.ndarray:
    """Replay a recorded transform on an image [3,H,W] or mask [H,W]."""
    arr = image[None] if is_mask else image
    if is_mask:
        arr = arr.astype(np.float32)
    if (geom.scaled_h, geom.scaled_w) != arr.shape[-2:]:
        arr = _resize(arr, geom.scaled_h, geom.scaled_w, "nearest" if is_mask else "bilinear")
    pad_h = max(0, geom.crop_size - geom.scaled_h)
    pad_w = max(0, geom.crop_size - geom.scaled_w)
    arr = _reflect_pad(arr, geom.pad_top, pad_h - geom.pad_top, geom.pad_left, pad_w - geom.pad_left)
    top, left, size = geom.crop_top, geom.crop_left, geom.crop_size
    arr = arr[..., top : top + size, left : left + size]
    if geom.flip:
        arr = arr[..., ::-1]
    arr = np.ascontiguousarray(arr)
    if is_mask:
        return np.round(arr[0]).astype(np.int64)
    return arr


def _luma(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def apply_photometric(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = image.astype(np.float32, copy=True)
    s = cfg.color_jitter_strength
    if rng.random() < cfg.color_jitter_prob:
        brightness = rng.uniform(1 - s, 1 + s)
        contrast = rng.uniform(1 - s, 1 + s)
        saturation = rng.uniform(1 - s, 1 + s)
        out = out * brightness
        out = (out - out.mean()) * contrast + out.mean()
        gray = _luma(out)[None]
        out = (out - gray) * saturation + gray
    if rng.random() < cfg.grayscale_prob:
        out = np.repeat(_luma(out)[None], 3, axis=0)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)
        out = gaussian_filter1d(out, sigma, axis=1, mode="reflect")
        out = gaussian_filter1d(out, sigma, axis=2, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def _split_rngs(seed) -> tuple[np.random.Generator, np.random.Generator]:
    base = seed if isinstance(seed, np.random.SeedSequence) else seed_for(seed)
    geom_seq, photo_seq = base.spawn(2)
    return np.random.default_rng(geom_seq), np.random.default_rng(photo_seq)


def weak_augment(image: np.ndarray, seed, cfg: AugmentConfig) -> np.ndarray:
    """Random rescale, crop, flip; deterministic given seed."""
    geom_rng, _ = _split_rngs(seed)
    geom = sample_geometry(image.shape[1:], cfg, geom_rng)
    return apply_geometry(image, geom)


def strong_augment(image: np.ndarray, seed, cfg: AugmentConfig) -> np.ndarray:
    """Weak geometry (same seed => same geometry) plus photometric ops."""
    geom_rng, photo_rng = _split_rngs(seed)
    geom = sample_geometry(image.shape[1:], cfg, geom_rng)
    return apply_photometric(apply_geometry(image, geom), cfg, photo_rng)


def augment_pair(image: np.ndarray, seed, cfg: AugmentConfig) -> ViewPair:
    """Weak and strong views sharing one geometry."""
    geom_rng, photo_rng = _split_rngs(seed)
    geom = sample_geometry(image.shape[1:], cfg, geom_rng)
    weak = apply_geometry(image, geom)
    strong = apply_photometric(weak, cfg, photo_rng)
    return ViewPair(weak=weak, strong=strong, geometry=geom)


def augment_labeled(image: np.ndarray, mask: np.ndarray, seed, cfg: AugmentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Weak geometry applied jointly to image (bilinear) and mask (nearest)."""
    geom_rng, _ = _split_rngs(seed)
    geom = sample_geometry(image.shape[1:], cfg, geom_rng)
    return apply_geometry(image, geom), apply_geometry(mask, geom, is_mask=True)


def sample_cutmix_plans(
    batch_size: int, shape_hw: tuple[int, int], seed, cfg: AugmentConfig
) -> list[CutMixPlan]:
    """One box + partner per sample. Batch of 1 yields an empty plan list."""
    if batch_size < 2:
        return []
    rng = np.random.default_rng(seed if isinstance(seed, np.random.SeedSequence) else seed_for(seed))
    h, w = shape_hw
    partners = rng.permutation(batch_size)
    plans = []
    for i in range(batch_size):
        if rng.random() >= cfg.cutmix_prob:
            plans.append(CutMixPlan(box=(0, 0, 0, 0), partner_index=int(partners[i])))
            continue
        area = rng.uniform(cfg.cutmix_area_min, cfg.cutmix_area_max) * h * w
        aspect = rng.uniform(cfg.cutmix_aspect_min, cfg.cutmix_aspect_max)
        box_h = min(h, max(1, int(round(np.sqrt(area * aspect)))))
        box_w = min(w, max(1, int(round(area / box_h))))
        top = int(rng.integers(0, h - box_h + 1))
        left = int(rng.integers(0, w - box_w + 1))
        plans.append(CutMixPlan(box=(top, left, box_h, box_w), partner_index=int(partners[i])))
    return plans


def apply_cutmix(batch, plans: list[CutMixPlan]):
    """Paste each plan's partner region into the batch (numpy or torch,
    shape [B,...,H,W]); identical boxes must be applied to every aligned
    target (labels, validity masks, logits)."""
    if not plans:
        return batch
    out = batch.clone() if isinstance(batch, torch.Tensor) else batch.copy()
    for i, plan in enumerate(plans):
        top, left, h, w = plan.box
        if h == 0 or w == 0:
            continue
        out[i, ..., top : top + h, left : left + w] = batch[
            plan.partner_index, ..., top : top + h, left : left + w
        ]
    return out


def cutmix(images, targets, seed, cfg: AugmentConfig):
    """Mix a batch of images and any number of aligned targets with shared boxes."""
    if images.shape[0] < 2:
        return images, list(targets), []
    plans = sample_cutmix_plans(images.shape[0], images.shape[-2:], seed, cfg)
    mixed_images = apply_cutmix(images, plans)
    mixed_targets = [apply_cutmix(t, plans) for t in targets]
    return mixed_images, mixed_targets, plans


def feature_perturb(features: torch.Tensor, rate: float, seed) -> torch.Tensor:
    """Channel dropout: zero each channel with probability `rate`, scale
    survivors by 1/(1-rate). Expectation-preserving; deterministic given seed."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"perturbation rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return features
    rng = np.random.default_rng(seed if isinstance(seed, np.random.SeedSequence) else seed_for(seed))
    b, c = features.shape[0], features.shape[1]
    keep = rng.random((b, c)) >= rate
    mask = torch.from_numpy(keep.astype(np.float64) / (1.0 - rate)).to(features.dtype)
    return features * mask.view(b, c, *([1] * (features.ndim - 2)))
