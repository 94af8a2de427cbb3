"""Metrics and inference: aggregated Dice/Jaccard, single-scale and
sliding-window prediction, and qualitative overlays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import TrainConfig
from .data import IGNORE_VALUE, DataError, Sample

PALETTE = [
    (60, 180, 75),
    (230, 25, 75),
    (67, 99, 216),
    (255, 225, 25),
    (145, 30, 180),
    (70, 240, 240),
]


@dataclass
class MetricReport:
    per_class_dice: list[float]
    per_class_jaccard: list[float]
    mean_dice: float
    mean_jaccard: float
    n_images: int

    def as_dict(self) -> dict:
        return {
            "per_class_dice": list(self.per_class_dice),
            "per_class_jaccard": list(self.per_class_jaccard),
            "mean_dice": self.mean_dice,
            "mean_jaccard": self.mean_jaccard,
            "n_images": self.n_images,
        }

    def summary(self) -> str:
        lines = [
            f"class {c}: dice {d:.4f}  jaccard {j:.4f}"
            for c, (d, j) in enumerate(zip(self.per_class_dice, self.per_class_jaccard))
        ]
        lines.append(
            f"mean over {len(self.per_class_dice)} classes ({self.n_images} images): "
            f"dice {self.mean_dice:.4f}  jaccard {self.mean_jaccard:.4f}"
        )
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["class,dice,jaccard"]
        for c, (d, j) in enumerate(zip(self.per_class_dice, self.per_class_jaccard)):
            rows.append(f"{c},{d!r},{j!r}")
        rows.append(f"mean,{self.mean_dice!r},{self.mean_jaccard!r}")
        return "\n".join(rows) + "\n"


def segmentation_counts(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_value: int = IGNORE_VALUE
) -> np.ndarray:
    """Per-class [intersection, pred count, gt count] over non-ignored pixels,
    as an int64 [C, 3] table ready to be summed across images."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {gt.shape}")
    keep = gt != ignore_value
    pred = pred[keep]
    gt = gt[keep]
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise ValueError(f"prediction labels outside [0, {num_classes})")
    if gt.size and (gt.min() < 0 or gt.max() >= num_classes):
        raise ValueError(f"target labels outside [0, {num_classes}) after ignore removal")
    counts = np.zeros((num_classes, 3), dtype=np.int64)
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        counts[c] = (np.sum(p & g), np.sum(p), np.sum(g))
    return counts


def report_from_counts(counts: np.ndarray, n_images: int) -> MetricReport:
    """Dice 2I/(P+G) and jaccard I/(P+G-I) per class from aggregated counts.
    A class absent from both predictions and targets scores 1.0."""
    dice, jacc = [], []
    for inter, p, g in counts.tolist():
        denom = p + g
        if denom == 0:
            dice.append(1.0)
            jacc.append(1.0)
        else:
            dice.append(2.0 * inter / denom)
            jacc.append(inter / (denom - inter))
    return MetricReport(
        per_class_dice=dice,
        per_class_jaccard=jacc,
        mean_dice=sum(dice) / len(dice),
        mean_jaccard=sum(jacc) / len(jacc),
        n_images=n_images,
    )


def dice_jaccard(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_value: int = IGNORE_VALUE
) -> MetricReport:
    """Metrics for a single prediction/target pair (or stacked batch)."""
    return report_from_counts(segmentation_counts(pred, gt, num_classes, ignore_value), n_images=1)


def _pad_reflect_to(image: torch.Tensor, min_h: int, min_w: int) -> torch.Tensor:
    """Reflect-pad [B,3,H,W] on the bottom/right so both sides reach the
    minimum; numpy handles pads wider than the source by re-reflecting."""
    h, w = image.shape[-2], image.shape[-1]
    pad_h, pad_w = max(0, min_h - h), max(0, min_w - w)
    if pad_h == 0 and pad_w == 0:
        return image
    arr = np.pad(image.numpy(), ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    return torch.from_numpy(arr)


def _window_starts(size: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def sliding_window_infer(
    model_fn, image: torch.Tensor, window: int, stride: int
) -> torch.Tensor:
    """Average of window logits weighted by per-pixel coverage. The final row
    and column of windows shift flush to the border so every pixel is seen.
    Images smaller than the window are reflect-padded and the result cropped.
    """
    if stride > window:
        raise ValueError(f"stride {stride} exceeds window {window}")
    if stride <= 0:
        raise ValueError("stride must be positive")
    h, w = image.shape[-2], image.shape[-1]
    padded = _pad_reflect_to(image, window, window)
    ph, pw = padded.shape[-2], padded.shape[-1]
    logits_sum = None
    coverage = torch.zeros(1, 1, ph, pw)
    for top in _window_starts(ph, window, stride):
        for left in _window_starts(pw, window, stride):
            tile = padded[..., top : top + window, left : left + window]
            out = model_fn(tile)
            if logits_sum is None:
                logits_sum = torch.zeros(out.shape[0], out.shape[1], ph, pw, dtype=out.dtype)
            logits_sum[..., top : top + window, left : left + window] += out
            coverage[..., top : top + window, left : left + window] += 1.0
    return (logits_sum / coverage)[..., :h, :w]


def single_scale_infer(model_fn, image: torch.Tensor, multiple: int = 16) -> torch.Tensor:
    """One forward at native size, reflect-padded up to the next multiple of
    the patch stride and cropped back."""
    h, w = image.shape[-2], image.shape[-1]
    target_h = -(-h // multiple) * multiple
    target_w = -(-w // multiple) * multiple
    padded = _pad_reflect_to(image, target_h, target_w)
    return model_fn(padded)[..., :h, :w]


def predict_forward(model, images: torch.Tensor) -> torch.Tensor:
    """Test-time prediction rule: decoder logits only. The alignment branches
    shape training and pseudo-labels; the decoder stays the primary head."""
    return model(images, with_alignment=False).s_dl


def evaluate(
    model,
    samples: list[Sample],
    cfg: TrainConfig,
    mode: str = "single",
    window: int | None = None,
    stride: int | None = None,
) -> MetricReport:
    """Dataset metrics with counts aggregated across images, matching how the
    benchmark tables score whole test sets."""
    if not samples:
        raise DataError("cannot evaluate an empty dataset")
    if mode not in ("single", "sliding"):
        raise ValueError(f"mode must be 'single' or 'sliding', got '{mode}'")
    window = window if window is not None else cfg.augment.crop
    stride = stride if stride is not None else max(1, window * 2 // 3)
    mean = torch.tensor(cfg.data.mean).view(1, 3, 1, 1)
    std = torch.tensor(cfg.data.std).view(1, 3, 1, 1)

    def model_fn(x: torch.Tensor) -> torch.Tensor:
        return predict_forward(model, (x - mean) / std)

    was_training = model.training
    model.eval()
    counts = np.zeros((cfg.data.num_classes, 3), dtype=np.int64)
    with torch.no_grad():
        for sample in samples:
            image = torch.from_numpy(sample.image).float().unsqueeze(0)
            if mode == "single":
                logits = single_scale_infer(model_fn, image)
            else:
                logits = sliding_window_infer(model_fn, image, window, stride)
            pred = logits.argmax(dim=1).squeeze(0).numpy()
            counts += segmentation_counts(pred, sample.mask, cfg.data.num_classes)
    if was_training:
        model.train()
    return report_from_counts(counts, n_images=len(samples))


def render_overlay(
    image: np.ndarray,
    pred: np.ndarray,
    gt: np.ndarray | None = None,
    alpha: float = 0.45,
) -> np.ndarray:
    """Prediction painted over the image: class fill at `alpha`, solid class
    boundaries, and (when gt is given) disagreement pixels flagged in white.
    Returns uint8 RGB at image size."""
    if image.shape[:2] != pred.shape:
        raise ValueError(f"image {image.shape[:2]} and prediction {pred.shape} disagree")
    canvas = image.astype(np.float64).copy()
    if canvas.max() > 1.0:
        canvas /= 255.0
    boundary = np.zeros_like(pred, dtype=bool)
    boundary[1:, :] |= pred[1:, :] != pred[:-1, :]
    boundary[:, 1:] |= pred[:, 1:] != pred[:, :-1]
    for c in range(1, int(pred.max()) + 1):
        color = np.array(PALETTE[(c - 1) % len(PALETTE)]) / 255.0
        fill = pred == c
        canvas[fill] = (1 - alpha) * canvas[fill] + alpha * color
    canvas[boundary] = 0.0
    if gt is not None:
        wrong = (pred != gt) & (gt != IGNORE_VALUE)
        canvas[wrong] = 1.0
    return np.clip(canvas * 255.0 + 0.5, 0, 255).astype(np.uint8)


def disagreement_count(pred: np.ndarray, gt: np.ndarray, ignore_value: int = IGNORE_VALUE) -> int:
    return int(np.sum((pred != gt) & (gt != ignore_value)))
