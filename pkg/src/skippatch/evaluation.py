"""PCA comparison of real and generated images, plus image grids for inspection."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import em_to_gray, mask_to_rgb, resize_bilinear, resize_nearest
from .netpbm import write_netpbm
from .rng import SeededRng

LABELS = ("real", "generated-p16", "generated-p70", "generated-skip")
POWER_TOL = 1e-12
POWER_MAX_ITER = 10_000
SEPARATOR = 2


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (q, dim), orthonormal rows
    eigenvalues: np.ndarray  # descending


@dataclass(frozen=True)
class ScatterPoint:
    x: float
    y: float
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label {self.label!r} not in {LABELS}")


def featurize(image: np.ndarray, side: int = 32) -> np.ndarray:
    """Downsample to ``side``×``side`` and flatten channels-major.

    Three-channel arrays are treated as masks (nearest neighbour), anything else
    as intensity images (bilinear).
    """
    if side > image.shape[-1]:
        raise ValueError(f"side {side} exceeds image resolution {image.shape[-1]}")
    if image.shape[0] == 3:
        small = resize_nearest(image, side, side)
    else:
        small = resize_bilinear(image, side, side)
    return np.asarray(small, dtype=np.float64).reshape(-1)


def _power_eigs(a: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``q`` eigenpairs of a symmetric PSD matrix by power iteration with deflation."""
    m = a.shape[0]
    a = a.copy()
    vecs, vals = [], []
    for j in range(q):
        v = SeededRng([0, j]).normal((m,))
        for u in vecs:
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        for _ in range(POWER_MAX_ITER):
            w = a @ v
            for u in vecs:
                w -= (u @ w) * u
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            w /= norm
            done = np.linalg.norm(w - v) < POWER_TOL
            v = w
            if done:
                break
        lam = float(v @ a @ v)
        vecs.append(v)
        vals.append(lam)
        a -= lam * np.outer(v, v)
    return np.array(vals), np.array(vecs)


def _fix_sign(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for row in out:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return out


def fit_pca(vectors: Sequence[np.ndarray], q: int = 2) -> PcaModel:
    """PCA with the (n - 1)-normalised covariance.

    When the dimension exceeds the sample count the eigenproblem is solved on
    the n×n Gram matrix and mapped back to feature space.
    """
    x = np.asarray(np.stack([np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors]))
    n, dim = x.shape
    if n < 2:
        raise ValueError("fit_pca needs at least two vectors")
    if not 1 <= q <= min(n - 1, dim):
        raise ValueError(f"q must lie in [1, {min(n - 1, dim)}], got {q}")
    mean = x.mean(axis=0)
    xc = x - mean
    if not np.any(xc):
        raise ValueError("degenerate covariance: data has zero variance")
    if dim <= n:
        vals, comps = _power_eigs(xc.T @ xc / (n - 1), q)
    else:
        vals, u = _power_eigs(xc @ xc.T / (n - 1), q)
        comps = []
        for lam, col in zip(vals, u):
            c = xc.T @ col
            for prev in comps:
                c -= (prev @ c) * prev
            norm = np.linalg.norm(c)
            if norm < 1e-12 * max(1.0, math.sqrt(abs(lam) * (n - 1))):
                c = _complete_basis(comps, dim)
            else:
                c /= norm
            comps.append(c)
        comps = np.array(comps)
    order = np.argsort(-vals, kind="stable")
    return PcaModel(mean, _fix_sign(comps[order]), vals[order])


def _complete_basis(found: list[np.ndarray], dim: int) -> np.ndarray:
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        for u in found:
            e -= (u @ e) * u
        if np.linalg.norm(e) > 0.5:
            return e / np.linalg.norm(e)
    raise ValueError("cannot extend basis")


def project(model: PcaModel, vector: np.ndarray) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    if v.shape != model.mean.shape:
        raise ValueError(f"vector length {v.size} != model dimension {model.mean.size}")
    return model.components @ (v - model.mean)


def pca_scatter(groups: Mapping[str, Sequence[np.ndarray]], side: int = 32) -> list[ScatterPoint]:
    """Fit a 2-component PCA on every image of every group and project each one."""
    for label in groups:
        if label not in LABELS:
            raise ValueError(f"label {label!r} not in {LABELS}")
    feats = [(label, featurize(img, side)) for label, imgs in groups.items() for img in imgs]
    model = fit_pca([f for _, f in feats], q=2)
    return [ScatterPoint(*map(float, project(model, f)), label) for label, f in feats]


def emit_scatter(points: Sequence[ScatterPoint], path: str | Path) -> None:
    if not points:
        raise ValueError("no points to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("x", "y", "label"))
        for p in points:
            w.writerow((f"{p.x:.17g}", f"{p.y:.17g}", p.label))


def read_scatter(path: str | Path) -> list[ScatterPoint]:
    with open(path, newline="") as fh:
        return [ScatterPoint(float(r["x"]), float(r["y"]), r["label"]) for r in csv.DictReader(fh)]


def grid_pixels(images: Sequence[np.ndarray], cols: int) -> np.ndarray:
    """Tile images row-major with 2-pixel white separators; masks are coloured by class."""
    if not images:
        raise ValueError("no images to tile")
    shape = images[0].shape
    for i, im in enumerate(images):
        if im.shape != shape:
            raise ValueError(f"image {i} has shape {im.shape}, expected {shape}")
    cols = max(1, min(cols, len(images)))
    rows = math.ceil(len(images) / cols)
    h, w = shape[1:]
    tiles = [mask_to_rgb(im) if shape[0] == 3 else em_to_gray(im) for im in images]
    canvas_shape = (rows * h + (rows - 1) * SEPARATOR, cols * w + (cols - 1) * SEPARATOR)
    canvas = np.full(canvas_shape + tiles[0].shape[2:], 255, dtype=np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        top, left = r * (h + SEPARATOR), c * (w + SEPARATOR)
        canvas[top : top + h, left : left + w] = tile
    return canvas


def emit_grid(images: Sequence[np.ndarray], cols: int, path: str | Path) -> None:
    write_netpbm(path, grid_pixels(images, cols))
