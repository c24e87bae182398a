"""Datasets: synthetic shape/texture images, corruptions, CIFAR records, hybrid sets.

Images are uint8 arrays of shape (N, H, W, 3).  Everything random is driven
by explicit integer seeds.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .freqfilter import filter_image

SHAPES = ("disk", "square", "triangle", "cross")
CORRUPTIONS = ("gaussian-noise", "shot-noise", "gaussian-blur", "contrast", "brightness")
SEVERITIES = (1, 2, 3, 4, 5)

# severity 1..5 parameter tables
GAUSSIAN_NOISE_SIGMA = (8.0, 13.0, 18.0, 26.0, 38.0)  # in 0..255 intensity units
SHOT_NOISE_RATE = (60.0, 25.0, 12.0, 5.0, 3.0)  # photons per unit intensity
BLUR_SIGMA = (0.4, 0.6, 0.8, 1.1, 1.5)
CONTRAST_FACTOR = (0.75, 0.6, 0.45, 0.3, 0.2)
BRIGHTNESS_SHIFT = (13.0, 26.0, 38.0, 51.0, 64.0)


@dataclass
class ImageSet:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.dtype != np.uint8 or self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be uint8 (N, H, W, 3), got {self.images.dtype} {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ------------------------------------------------------------ synthetic data


def _texture(kind: int, size: int) -> np.ndarray:
    y, x = np.indices((size, size))
    if kind == 0:
        pat = (-1.0) ** x
    elif kind == 1:
        pat = (-1.0) ** y
    elif kind == 2:
        pat = (-1.0) ** (x + y)
    else:
        pat = (-1.0) ** x * (-1.0) ** (y // 2)
    return pat


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    y, x = np.indices((size, size)) + 0.5
    dx, dy = x - cx, y - cy
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        half = r * 0.886  # equal area with the disk
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "triangle":
        rr = r * 1.3
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = angle + np.pi / 2 + 2 * np.pi * k / 3
            nx, ny = np.cos(a), np.sin(a)
            inside &= dx * nx + dy * ny <= rr / 2
        return inside
    if kind == "cross":
        arm = r * 0.35
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    raise ValueError(kind)


@dataclass(frozen=True)
class ShapeTextureConfig:
    k_classes: int = 3
    size: int = 32
    texture_strength: float = 8.0
    noise_sigma: float = 4.0
    radius: tuple[float, float] = (0.2, 0.3)  # fraction of image size
    min_contrast: float = 40.0
    max_offset: float | None = 4.0  # center jitter in pixels; None: anywhere the shape fits
    ramp: float = 0.0  # max amplitude of a random linear illumination ramp
    bright_shape: bool = True  # shape always brighter than the background
    texture_agreement: float = 1.0  # P(texture == class) in the ID splits


def render_shape_texture(
    labels: np.ndarray, textures: np.ndarray, cfg: ShapeTextureConfig, rng: np.random.Generator
) -> np.ndarray:
    """Draw one image per (label, texture) pair."""
    n, size = len(labels), cfg.size
    out = np.empty((n, size, size, 3), dtype=np.uint8)
    pats = [_texture(k, size) for k in range(cfg.k_classes)]
    yy, xx = np.indices((size, size)) / size - 0.5
    for i in range(n):
        r = rng.uniform(*cfg.radius) * size
        if cfg.max_offset is None:
            cx, cy = rng.uniform(r + 1, size - r - 1, size=2)
        else:
            cx, cy = size / 2 + rng.uniform(-cfg.max_offset, cfg.max_offset, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        if cfg.bright_shape:
            bg = rng.uniform(40, 120, size=3)
            fg = bg.mean() + cfg.min_contrast + rng.uniform(0, 60, size=3)
        else:
            bg = rng.uniform(60, 196, size=3)
            fg = rng.uniform(60, 196, size=3)
            while abs(fg.mean() - bg.mean()) < cfg.min_contrast:
                fg = rng.uniform(40, 216, size=3)
        ramp_dir = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(ramp_dir) * xx + np.sin(ramp_dir) * yy) * rng.uniform(0, cfg.ramp)
        mask = _shape_mask(SHAPES[labels[i]], size, cx, cy, r, angle)
        img = np.where(mask[..., None], fg, bg) + ramp[..., None]
        if cfg.texture_strength:
            phase = rng.choice((-1.0, 1.0))
            img = img + phase * cfg.texture_strength * pats[textures[i]][..., None]
        if cfg.noise_sigma:
            img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
        out[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return out


def gen_shape_texture(
    n: int,
    k_classes: int = 3,
    size: int = 32,
    texture_strength: float = 8.0,
    seed: int = 0,
    n_val: int | None = None,
    n_test: int | None = None,
    noise_sigma: float = 4.0,
    **render,
) -> dict[str, ImageSet]:
    """Shape-labelled images with a class-correlated high-frequency texture.

    ``train``, ``val`` and ``test_id`` pair every class with its own 2-pixel
    period texture; in ``test_shift`` the texture is drawn independently of
    the class, so the texture cue carries no label information.
    """
    if not 2 <= k_classes <= len(SHAPES):
        raise ValueError(f"k_classes must be in [2, {len(SHAPES)}]")
    if n < k_classes:
        raise ValueError("need at least one training sample per class")
    if size % 8 or size < 16:
        raise ValueError("size must be a multiple of 8 and at least 16")
    if texture_strength < 0:
        raise ValueError("texture_strength must be >= 0")
    cfg = ShapeTextureConfig(k_classes, size, float(texture_strength), float(noise_sigma), **render)
    n_val = max(n // 10, 1) if n_val is None else n_val
    n_test = max(n // 3, 1) if n_test is None else n_test
    splits = {}
    for j, (name, count) in enumerate((("train", n), ("val", n_val), ("test_id", n_test), ("test_shift", n_test))):
        rng = np.random.default_rng(derive_seed(seed, j))
        labels = rng.integers(0, k_classes, size=count)
        textures = rng.integers(0, k_classes, size=count)
        if name != "test_shift":
            keep = rng.random(count) < cfg.texture_agreement
            textures = np.where(keep, labels, textures)
        splits[name] = ImageSet(render_shape_texture(labels, textures, cfg, rng), labels)
    return splits


# --------------------------------------------------------------- corruptions


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ValueError("severity must be in 1..5")


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    m = x.mean(axis=(-3, -2), keepdims=True)
    return _to_u8((x - m) * factor + m)


def shift_brightness(img: np.ndarray, shift: float) -> np.ndarray:
    return _to_u8(np.asarray(img, dtype=np.float64) + shift)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def corrupt(img: np.ndarray, spec: CorruptionSpec, seed: int = 0) -> np.ndarray:
    """Apply one corruption to an image (H, W, 3) or a batch (N, H, W, 3)."""
    img = np.asarray(img)
    s = spec.severity - 1
    rng = np.random.default_rng(seed)
    x = img.astype(np.float64)
    if spec.kind == "gaussian-noise":
        return _to_u8(x + rng.normal(0.0, GAUSSIAN_NOISE_SIGMA[s], size=x.shape))
    if spec.kind == "shot-noise":
        rate = SHOT_NOISE_RATE[s]
        return _to_u8(rng.poisson(x / 255.0 * rate) / rate * 255.0)
    if spec.kind == "gaussian-blur":
        sig = BLUR_SIGMA[s]
        sigma = (0.0,) * (x.ndim - 3) + (sig, sig, 0.0)
        return _to_u8(ndimage.gaussian_filter(x, sigma=sigma, mode="reflect"))
    if spec.kind == "contrast":
        return adjust_contrast(img, CONTRAST_FACTOR[s])
    return shift_brightness(img, BRIGHTNESS_SHIFT[s])


# -------------------------------------------------------------- CIFAR files


def read_records(path, size: int = 32, max_label: int = 10) -> ImageSet:
    """Read CIFAR-style binary records: 1 label byte, then planar R, G, B bytes."""
    record = 1 + 3 * size * size
    raw = np.fromfile(os.fspath(path), dtype=np.uint8)
    if raw.size % record:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of {record}")
    rec = raw.reshape(-1, record)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= max_label:
        raise ValueError(f"{path}: label {labels.max()} out of range [0, {max_label})")
    images = rec[:, 1:].reshape(-1, 3, size, size).transpose(0, 2, 3, 1)
    return ImageSet(np.ascontiguousarray(images), labels)


def write_records(path, data: ImageSet) -> None:
    n, h, w, _ = data.images.shape
    if h != w:
        raise ValueError("records hold square images")
    if n and (data.labels.min() < 0 or data.labels.max() > 255):
        raise ValueError("labels must fit in one byte")
    rec = np.empty((n, 1 + 3 * h * w), dtype=np.uint8)
    rec[:, 0] = data.labels
    rec[:, 1:] = data.images.transpose(0, 3, 1, 2).reshape(n, -1)
    rec.tofile(os.fspath(path))


def load_cifar10(path) -> ImageSet:
    """CIFAR-10 binary batch file (3073-byte records, labels in [0, 10))."""
    return read_records(path, 32, 10)


def save_cifar10(path, data: ImageSet) -> None:
    if data.images.shape[1:] != (32, 32, 3):
        raise ValueError("CIFAR records hold 32x32 RGB images")
    write_records(path, data)


def load_cifar_batches(paths: Sequence) -> ImageSet:
    parts = [load_cifar10(p) for p in paths]
    return ImageSet(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


# ------------------------------------------------------------ hybrid / split


@dataclass
class HybridDataset:
    """One epoch's split of ``base`` into filtered and untouched samples."""

    base: ImageSet
    filt_indices: np.ndarray
    lambda_per_image: dict[int, int]
    epoch_seed: int
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def orig_indices(self) -> np.ndarray:
        mask = np.ones(len(self.base), dtype=bool)
        mask[self.filt_indices] = False
        return np.flatnonzero(mask)

    def image(self, i: int) -> np.ndarray:
        lam = self.lambda_per_image.get(int(i))
        if lam is None:
            return self.base.images[i]
        key = (int(i), lam)
        if key not in self._cache:
            self._cache[key] = filter_image(self.base.images[i], lam)
        return self._cache[key]

    def mixed(self) -> ImageSet:
        """D_mix: every base sample, with the filtered ones swapped in."""
        images = self.base.images.copy()
        for i in self.filt_indices:
            images[i] = self.image(int(i))
        return ImageSet(images, self.base.labels)

    def filtered(self) -> ImageSet:
        return ImageSet(np.stack([self.image(int(i)) for i in self.filt_indices]) if len(self.filt_indices)
                        else self.base.images[:0], self.base.labels[self.filt_indices])

    def original(self) -> ImageSet:
        return self.base.subset(self.orig_indices)


def build_hybrid(
    base: ImageSet,
    rho: float,
    lambda_set: Sequence[int] = (15, 18, 25),
    epoch: int = 0,
    run_seed: int = 0,
    cache: dict | None = None,
) -> HybridDataset:
    """Pick round(rho * N) samples to filter, each with a λ drawn uniformly from ``lambda_set``.

    ``cache`` may be shared across epochs; entries are keyed by (index, λ) so
    reuse never changes pixel values.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must be in [0, 1]")
    if len(lambda_set) == 0:
        raise ValueError("lambda_set is empty")
    seed = derive_seed(run_seed, epoch)
    rng = np.random.default_rng(seed)
    n = len(base)
    k = int(round(rho * n))
    filt = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    lams = rng.choice(np.asarray(lambda_set, dtype=np.int64), size=k)
    return HybridDataset(
        base=base,
        filt_indices=filt.astype(np.int64),
        lambda_per_image={int(i): int(l) for i, l in zip(filt, lams)},
        epoch_seed=seed,
        _cache={} if cache is None else cache,
    )


def split_train_val(data: ImageSet, frac: float = 0.1, seed: int = 1) -> tuple[ImageSet, ImageSet]:
    if not 0.0 < frac < 1.0:
        raise ValueError("frac must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(data))
    n_val = int(round(frac * len(data)))
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


def save_splits(out_dir, splits: dict[str, ImageSet], manifest: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        write_records(out / f"{name}.bin", ds)
    first = next(iter(splits.values()))
    info = {
        "size": int(first.images.shape[1]),
        "num_classes": max(ds.num_classes for ds in splits.values()),
        "counts": {name: len(ds) for name, ds in splits.items()},
    }
    info.update(manifest or {})
    (out / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True))


def load_splits(data_dir) -> dict[str, ImageSet]:
    d = Path(data_dir)
    manifest = d / "manifest.json"
    size = json.loads(manifest.read_text())["size"] if manifest.exists() else 32
    return {p.stem: read_records(p, size, 256) for p in sorted(d.glob("*.bin"))}
