"""Masks, EM images, augmentation and the procedural stand-in corpus.

A mask is a float64 array of shape (3, R, R), one-hot per pixel with channel
order (mitochondria, membrane, background). An EM image is a float64 array of
shape (1, R, R) with values in [0, 1]. On disk masks are P6 files coloured
red / green / blue by class and EM images are P5 files.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor
from .netpbm import ImageFormatError, read_netpbm, write_netpbm
from .rng import SeededRng

MITO, MEMBRANE, BACKGROUND = 0, 1, 2
MASK_COLORS = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255]], dtype=np.uint8)

MASK_CROP_AREA = 0.9
EM_CROP_AREA = 0.98


@dataclass
class PairedDataset:
    masks: list[np.ndarray]
    images: list[np.ndarray]
    provenance: str  # "real" or "synthetic"

    def __post_init__(self):
        if not self.masks or len(self.masks) != len(self.images):
            raise ValueError("dataset needs at least one (mask, image) pair")
        res = {m.shape[-1] for m in self.masks} | {im.shape[-1] for im in self.images}
        if len(res) != 1:
            raise ValueError(f"mixed resolutions in dataset: {sorted(res)}")

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def resolution(self) -> int:
        return self.masks[0].shape[-1]


# --- resizing -------------------------------------------------------------

def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest neighbour on pixel centres; ``arr`` is (C, H, W)."""
    _, h, w = arr.shape
    rows = ((2 * np.arange(out_h) + 1) * h) // (2 * out_h)
    cols = ((2 * np.arange(out_w) + 1) * w) // (2 * out_w)
    return arr[:, rows][:, :, cols]


def _bilinear_axis(arr: np.ndarray, out_n: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    src = np.clip((np.arange(out_n) + 0.5) * (n / out_n) - 0.5, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    shape = [1] * arr.ndim
    shape[axis] = out_n
    frac = frac.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1.0 - frac) + np.take(arr, i1, axis=axis) * frac


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel centres; ``arr`` is (C, H, W)."""
    arr = np.asarray(arr, dtype=np.float64)
    return _bilinear_axis(_bilinear_axis(arr, out_h, 1), out_w, 2)


# --- mask encoding ---------------------------------------------------------

def is_one_hot(mask: np.ndarray) -> bool:
    return (mask.ndim == 3 and mask.shape[0] == 3 and bool(np.all((mask == 0) | (mask == 1)))
            and bool(np.all(mask.sum(axis=0) == 1)))


def one_hot(labels: np.ndarray) -> np.ndarray:
    return (labels[None] == np.arange(3)[:, None, None]).astype(np.float64)


def harden_mask(soft) -> np.ndarray:
    """Per-pixel argmax of a soft 3-channel simplex; ties go to the lower channel."""
    arr = soft.data if isinstance(soft, Tensor) else np.asarray(soft, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a 3×R×R mask, got shape {arr.shape}")
    dev = np.abs(arr.sum(axis=0) - 1.0).max()
    if dev > 1e-6 or arr.min() < 0:
        raise ValueError(f"input is not a per-pixel simplex (max sum deviation {dev:.3g})")
    return one_hot(np.argmax(arr, axis=0))


def mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    return MASK_COLORS[np.argmax(mask, axis=0)]


def em_to_gray(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image[0] * 255.0), 0, 255).astype(np.uint8)


def load_mask(path: str | Path, resolution: int) -> np.ndarray:
    pixels = read_netpbm(path)
    if pixels.ndim != 3:
        raise ImageFormatError(f"{path}: mask must be an RGB (P6) image")
    rgb = resize_nearest(pixels.transpose(2, 0, 1), resolution, resolution)
    return one_hot(np.argmax(rgb, axis=0))


def load_em(path: str | Path, resolution: int) -> np.ndarray:
    pixels = read_netpbm(path)
    if pixels.ndim != 2:
        raise ImageFormatError(f"{path}: EM image must be grayscale (P5)")
    return resize_bilinear(pixels[None].astype(np.float64), resolution, resolution) / 255.0


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    write_netpbm(path, mask_to_rgb(mask))


def save_em(path: str | Path, image: np.ndarray) -> None:
    write_netpbm(path, em_to_gray(image))


# --- manifests --------------------------------------------------------------

def read_manifest(path: str | Path) -> list[tuple[Path, Path]]:
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'mask_path<TAB>em_path'")
        pairs.append(tuple(path.parent / p.strip() for p in parts))
    if not pairs:
        raise ValueError(f"{path}: manifest lists no pairs")
    return pairs


def load_dataset(manifest: str | Path, resolution: int) -> PairedDataset:
    pairs = read_manifest(manifest)
    return PairedDataset([load_mask(m, resolution) for m, _ in pairs],
                         [load_em(e, resolution) for _, e in pairs], "real")


def write_dataset(dataset: PairedDataset, out_dir: str | Path) -> Path:
    """Write masks, images and a ``manifest.tsv`` with relative paths; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# {dataset.provenance} corpus, {len(dataset)} pairs at {dataset.resolution}px"]
    for i, (m, im) in enumerate(zip(dataset.masks, dataset.images)):
        save_mask(out / f"mask_{i:04d}.ppm", m)
        save_em(out / f"em_{i:04d}.pgm", im)
        lines.append(f"mask_{i:04d}.ppm\tem_{i:04d}.pgm")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# --- augmentation -------------------------------------------------------------

def crop_side(resolution: int, crop_area: float) -> int:
    return max(1, math.floor(resolution * math.sqrt(crop_area)))


def augment(mask: np.ndarray, image: np.ndarray | None, crop_area: float,
            rng: SeededRng) -> tuple[np.ndarray, np.ndarray | None]:
    """Random flips and an area-fraction square crop, resized back to full size.

    Draw order: vertical flip, horizontal flip, crop top, crop left.
    """
    if not 0.0 < crop_area <= 1.0:
        raise ValueError(f"crop_area must lie in (0, 1], got {crop_area}")
    res = mask.shape[-1]
    vflip, hflip = rng.bernoulli(), rng.bernoulli()
    side = crop_side(res, crop_area)
    top, left = rng.integers(res - side + 1), rng.integers(res - side + 1)

    def apply(arr, resize):
        if vflip:
            arr = arr[:, ::-1]
        if hflip:
            arr = arr[:, :, ::-1]
        arr = arr[:, top : top + side, left : left + side]
        return np.ascontiguousarray(resize(arr, res, res))

    return apply(mask, resize_nearest), None if image is None else apply(image, resize_bilinear)


# --- synthetic corpus ---------------------------------------------------------

def _blob(res: int, rng: SeededRng) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    cy, cx = rng.uniform() * res, rng.uniform() * res
    a = max(1.5, (0.04 + 0.07 * rng.uniform()) * res)
    b = max(1.5, (0.04 + 0.07 * rng.uniform()) * res)
    theta = rng.uniform() * math.pi
    dy, dx = yy - cy, xx - cx
    u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
    phi = np.arctan2(v, u)
    wobble = sum(0.06 * rng.uniform() * np.cos(m * phi + 2 * math.pi * rng.uniform()) for m in (2, 3, 4))
    return np.hypot(u, v) <= 1.0 + wobble


def _membrane(res: int, rng: SeededRng) -> np.ndarray:
    out = np.zeros((res, res), dtype=bool)
    for _ in range(2 + rng.integers(3)):
        y, x = rng.uniform() * res, rng.uniform() * res
        heading = rng.uniform() * 2 * math.pi
        width = 2 + rng.integers(3)
        turns = rng.normal((2 * res,), 0.0, 0.12)
        for turn in turns:
            heading += turn
            y += math.sin(heading)
            x += math.cos(heading)
            r0, c0 = int(math.floor(y - width / 2)), int(math.floor(x - width / 2))
            out[max(r0, 0) : max(r0 + width, 0), max(c0, 0) : max(c0 + width, 0)] = True
    return out


def synth_mask(res: int, rng: SeededRng, max_mito: float = 0.20) -> np.ndarray:
    """Random membrane curves under random perturbed-ellipse mitochondria."""
    labels = np.full((res, res), BACKGROUND)
    labels[_membrane(res, rng)] = MEMBRANE
    target = 0.07 + 0.10 * rng.uniform()
    mito = np.zeros((res, res), dtype=bool)
    for _ in range(500):
        cand = mito | _blob(res, rng)
        if cand.mean() <= max_mito:
            mito = cand
        if mito.mean() >= target:
            break
    labels[mito] = MITO
    return one_hot(labels)


def _smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(3 * sigma))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    padded = np.pad(field, radius, mode="reflect")
    rows = sliding_window_view(padded, len(taps), axis=0) @ taps
    return sliding_window_view(rows, len(taps), axis=1) @ taps


def render_em(mask: np.ndarray, rng: SeededRng) -> np.ndarray:
    """Deterministic EM-like rendering: class intensity, smooth noise, dark mitochondria rims."""
    res = mask.shape[-1]
    base = mask[MITO] * 0.35 + mask[MEMBRANE] * 0.15 + mask[BACKGROUND] * 0.65
    noise = _smooth(rng.normal((res, res)), max(1.0, res / 32))
    noise /= noise.std() + 1e-12
    mito = mask[MITO] > 0
    padded = np.pad(mito, 1, mode="edge")
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    rim = mito & ~interior
    img = base + 0.04 * noise - 0.12 * rim
    return np.clip(img, 0.0, 1.0)[None]


def synth_corpus(n: int, resolution: int, seed: int) -> PairedDataset:
    """``n`` mask/EM pairs; item ``i`` uses the child stream ``(seed, i)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    root = SeededRng(seed)
    masks, images = [], []
    for i in range(n):
        rng = root.spawn(i)
        m = synth_mask(resolution, rng)
        masks.append(m)
        images.append(render_em(m, rng))
    return PairedDataset(masks, images, "synthetic")
