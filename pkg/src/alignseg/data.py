"""Dataset loading, labeled/unlabeled split manifests, and synthetic gland data.

On-disk layout: ``root/images/{train,test}/*.png`` with matching basenames in
``root/masks/{train,test}/*.png``. Masks are single-channel label images with
values in ``{0..C-1}`` plus 255 for ignored pixels.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

IGNORE_VALUE = 255


class DataError(ValueError):
    """Raised for malformed dataset layouts, masks, or split requests."""


@dataclass
class Sample:
    """One image with an optional mask. Image is [3,H,W] float32 in [0,1]."""

    image: np.ndarray
    mask: np.ndarray | None
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"sample '{self.id}': image must be [3,H,W], got {self.image.shape}")
        if self.mask is not None and self.mask.shape != self.image.shape[1:]:
            raise DataError(
                f"sample '{self.id}': mask shape {self.mask.shape} does not match "
                f"image shape {self.image.shape[1:]}"
            )


@dataclass
class SplitManifest:
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    seed: int
    ratio: float

    def save(self, path: str | Path) -> None:
        lines = [f"seed={self.seed} ratio={self.ratio!r}", "[labeled]"]
        lines += self.labeled_ids
        lines.append("[unlabeled]")
        lines += self.unlabeled_ids
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("seed="):
            raise DataError(f"manifest {path}: missing 'seed=... ratio=...' header")
        head = dict(part.split("=", 1) for part in lines[0].split())
        labeled: list[str] = []
        unlabeled: list[str] = []
        current: list[str] | None = None
        for line in lines[1:]:
            line = line.strip()
            if not line:
                continue
            if line == "[labeled]":
                current = labeled
            elif line == "[unlabeled]":
                current = unlabeled
            elif current is None:
                raise DataError(f"manifest {path}: id '{line}' before any section")
            else:
                current.append(line)
        return cls(labeled, unlabeled, seed=int(head["seed"]), ratio=float(head["ratio"]))


@dataclass
class SyntheticSpec:
    """Generator knobs for the desk-scale gland-like dataset."""

    n_images: int = 40
    size: int = 64
    n_blobs: tuple[int, int] = (1, 3)
    blob_scale: tuple[float, float] = (0.16, 0.3)
    noise_sigma: float = 0.05
    seed: int = 0


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _load_mask(path: Path, num_classes: int, sample_id: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.int64)
    bad = np.unique(arr[(arr >= num_classes) & (arr != IGNORE_VALUE)])
    if bad.size:
        raise DataError(
            f"mask for '{sample_id}' contains values {bad.tolist()} outside "
            f"{{0..{num_classes - 1}, {IGNORE_VALUE}}}"
        )
    return arr


def load_dataset(root: str | Path, split: str, num_classes: int = 2) -> list[Sample]:
    """Load all samples of one split, ordered by id. Every image needs a mask."""
    if split not in ("train", "test"):
        raise DataError(f"split must be 'train' or 'test', got '{split}'")
    root = Path(root)
    image_dir = root / "images" / split
    mask_dir = root / "masks" / split
    if not image_dir.is_dir():
        raise DataError(f"no samples found: missing directory {image_dir}")
    image_paths = sorted(image_dir.glob("*.png"), key=lambda p: p.stem)
    if not image_paths:
        raise DataError(f"no samples found under {image_dir}")
    samples = []
    for path in image_paths:
        sample_id = path.stem
        mask_path = mask_dir / path.name
        if not mask_path.is_file():
            raise DataError(f"missing mask for '{sample_id}' (expected {mask_path})")
        samples.append(
            Sample(
                image=_load_image(path),
                mask=_load_mask(mask_path, num_classes, sample_id),
                id=sample_id,
            )
        )
    return samples


def write_dataset(samples: list[Sample], root: str | Path, split: str) -> None:
    """Write samples as lossless 8-bit PNGs in the standard layout."""
    root = Path(root)
    image_dir = root / "images" / split
    mask_dir = root / "masks" / split
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        rgb = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb.transpose(1, 2, 0)).save(image_dir / f"{sample.id}.png")
        if sample.mask is None:
            raise DataError(f"sample '{sample.id}' has no mask to write")
        Image.fromarray(sample.mask.astype(np.uint8)).save(mask_dir / f"{sample.id}.png")


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def make_ssl_split(ids: list[str], ratio: float, seed: int) -> SplitManifest:
    """Deterministic labeled/unlabeled split: shuffle by seed, label the first
    round-half-up(ratio * N) ids."""
    if not ids:
        raise DataError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate ids in split request")
    if not 0.0 < ratio <= 1.0:
        raise DataError(f"ratio must be in (0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_labeled = round_half_up(ratio * len(ids))
    n_labeled = max(1, min(n_labeled, len(ids)))
    return SplitManifest(
        labeled_ids=order[:n_labeled],
        unlabeled_ids=order[n_labeled:],
        seed=seed,
        ratio=ratio,
    )


def seed_for(*parts) -> np.random.SeedSequence:
    """Stable seed derivation from mixed int/str parts.

    Words are interleaved with their position and prefixed with the part
    count: bare SeedSequence entropy ignores trailing zero words, so
    (0, "a") and (0, "a", 0) would otherwise seed identical streams.
    """
    entropy = [len(parts)]
    for i, part in enumerate(parts):
        if isinstance(part, str):
            word = zlib.crc32(part.encode("utf-8"))
        else:
            word = int(part) & 0xFFFFFFFF
        entropy += [i + 1, word]
    return np.random.SeedSequence(entropy)


def _ellipse_support(size: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    dy = yy - cy
    dx = xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    noise = rng.standard_normal((size, size))
    smooth = gaussian_filter(noise, sigma=sigma, mode="reflect")
    peak = np.abs(smooth).max()
    return smooth / (peak + 1e-8)

def _generate_one(rng: np.random.Generator, spec: SyntheticSpec, sample_id: str) -> Sample:
    size = spec.size
    lo, hi = spec.n_blobs
    n = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    mask = np.zeros((size, size), dtype=np.int64)
    for _ in range(n):
        a = rng.uniform(*spec.blob_scale) * size
        b = rng.uniform(*spec.blob_scale) * size
        theta = rng.uniform(0, np.pi)
        margin = max(a, b) * 0.7
        cy = rng.uniform(margin, size - margin)
        cx = rng.uniform(margin, size - margin)
        mask |= _ellipse_support(size, cy, cx, a, b, theta)

    # stroma with low-frequency mottling; every image carries its own global
    # tint so color alone is an unreliable cue across the dataset
    tint = rng.uniform(-0.10, 0.10, size=3)
    background = np.empty((3, size, size), dtype=np.float64)
    mottle = _smooth_noise(rng, size, sigma=size / 10)
    base_bg = np.array([0.74, 0.62, 0.70]) + tint
    for c in range(3):
        background[c] = base_bg[c] + 0.05 * mottle

    # glands are slightly darker by a per-image amount that can nearly vanish;
    # the dependable foreground signal is the striped lumen-like texture
    base_fg = base_bg + rng.uniform(-0.16, -0.02, size=3)
    freq = rng.uniform(0.25, 0.45)
    phase = rng.uniform(0, 2 * np.pi)
    angle = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[:size, :size]
    stripes = np.sin(freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    foreground = np.empty_like(background)
    for c in range(3):
        foreground[c] = base_fg[c] + 0.12 * stripes

    image = np.where(mask[None], foreground, background)
    image += spec.noise_sigma * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image=image, mask=mask, id=sample_id)


def generate_synthetic_glands(spec: SyntheticSpec) -> list[Sample]:
    """Deterministic textured images with elliptical glands; masks trace blob
    supports exactly (classes: 0 background, 1 gland; never 255)."""
    if spec.size < 32:
        raise DataError(f"synthetic size must be >= 32, got {spec.size}")
    if spec.n_images < 1:
        raise DataError("n_images must be >= 1")
    if spec.n_blobs[0] < 0 or spec.n_blobs[1] < spec.n_blobs[0]:
        raise DataError(f"invalid n_blobs range {spec.n_blobs}")
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_images)
    return [
        _generate_one(np.random.default_rng(child), spec, f"synth_{i:04d}")
        for i, child in enumerate(children)
    ]
