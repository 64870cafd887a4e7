"""Small synthetic image worlds for the distance/frequency/view-learning studies.

Three families:

* mosaics: large images tiled with textured cells whose class labels follow a
  slow random walk, so nearby patches agree and far patches decorrelate. Used
  by the patch-distance sweep.
* textured class images: one texture per image; class lives in mid-frequency
  stripes, a DC color tint and pixel noise are nuisances. Used by the
  frequency-split sweep.
* planted-channel toy: tiny 3-channel images where the label is written into
  per-channel patterns and nuisances are a shared scalar plus smooth field.
  Used by the learned-view study.
"""

from __future__ import annotations

import math

import numpy as np

from .datasets import texture_tile, _hsv_to_rgb

__all__ = [
    "mosaic_image",
    "mosaic_pool",
    "sample_patch_probe_set",
    "textured_class_image",
    "textured_class_set",
    "planted_channel_set",
]


# ---------------------------------------------------------------------------
# mosaics for the patch-distance sweep


def _class_field(rng: np.random.Generator, cells: int, n_classes: int, hold: float = 0.82) -> np.ndarray:
    """Cell-class grid via a sticky random walk: neighbors usually agree.

    Interior cells copy the up or left neighbor with equal odds, so the
    agreement decays isotropically; copying left only would leave diagonal
    neighbors nearly independent.
    """
    field = np.empty((cells, cells), dtype=np.int64)
    field[0, 0] = rng.integers(n_classes)
    for y in range(cells):
        for x in range(cells):
            if y == 0 and x == 0:
                continue
            if y == 0:
                ref = field[y, x - 1]
            elif x == 0:
                ref = field[y - 1, x]
            else:
                ref = field[y - 1, x] if rng.random() < 0.5 else field[y, x - 1]
            if rng.random() < hold:
                field[y, x] = ref
            else:
                field[y, x] = rng.integers(n_classes)
    return field


def mosaic_image(
    rng: np.random.Generator,
    size: int = 224,
    cell: int = 32,
    n_classes: int = 10,
) -> tuple[np.ndarray, np.ndarray]:
    """(3, size, size) float32 mosaic plus its (cells, cells) class field.

    A global tint couples all locations weakly; the sticky class field makes
    patch content similarity decay with spatial distance.
    """
    if size % cell:
        raise ValueError("cell must divide size")
    cells = size // cell
    field = _class_field(rng, cells, n_classes)
    img = np.empty((3, size, size), dtype=np.float32)
    for y in range(cells):
        for x in range(cells):
            img[:, y * cell : (y + 1) * cell, x * cell : (x + 1) * cell] = texture_tile(
                field[y, x], rng, cell, n_classes, freq_scale=0.55, noise=0.03, class_hue=False
            )
    tint = _hsv_to_rgb(rng.uniform(), 0.5, 1.0)[:, None, None].astype(np.float32)
    img = 0.82 * img + 0.18 * tint
    return np.clip(img, 0.0, 1.0), field


def mosaic_pool(
    rng: np.random.Generator, n_images: int, size: int = 224, cell: int = 32, n_classes: int = 10
) -> np.ndarray:
    out = np.empty((n_images, 3, size, size), dtype=np.float32)
    for i in range(n_images):
        out[i] = mosaic_image(rng, size, cell, n_classes)[0]
    return out


def sample_patch_probe_set(
    rng: np.random.Generator, n: int, patch: int = 32, n_classes: int = 10
) -> tuple[np.ndarray, np.ndarray]:
    """Labeled single-texture patches matching the mosaic cell statistics."""
    x = np.empty((n, 3, patch, patch), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = int(rng.integers(n_classes))
        x[i] = texture_tile(cls, rng, patch, n_classes, freq_scale=0.55, noise=0.03, class_hue=False)
        y[i] = cls
    return x, y


# ---------------------------------------------------------------------------
# textured class images for the frequency-split sweep


_FINE_COLOR = _hsv_to_rgb(0.58, 0.5, 1.0)[:, None, None]


def textured_class_image(
    class_id: int, rng: np.random.Generator, size: int = 32, n_classes: int = 10
) -> np.ndarray:
    """Class stripes at one spatial frequency, nuisances in the bands around it.

    Four components. A DC color tint is the pure low-pass nuisance; it never
    crosses into the high-pass view of a Gaussian split. Class stripes near
    wavelength 8 px carry the label in their orientation and hue. A nuisance
    stripe near 5 px gets a fully random signature per image; it enters the
    high-pass view before the class band does and drains out of the low-pass
    view before the class band does. A fine 2.2 px stripe is identical across
    images except for phase: to a pooling encoder it is loud clutter with at
    most a phase scalar of usable shared information, which keeps the sigma
    extremes (where it dominates one view) from being trivially matchable.
    """
    cls = int(class_id)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    def stripe(theta: float, lam: float, phase: float) -> np.ndarray:
        return np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / lam + phase)

    theta_c = cls * math.pi / n_classes + rng.uniform(-0.08, 0.08)
    lam_c = 8.0 + rng.uniform(-0.4, 0.4)
    color = _hsv_to_rgb((cls / n_classes) % 1.0, 0.8, 1.0)[:, None, None]
    signal = 0.22 * color * stripe(theta_c, lam_c, rng.uniform(0, 2 * math.pi))

    theta_n = rng.uniform(0, math.pi)
    lam_n = 5.0 + rng.uniform(-0.25, 0.25)
    nuis_color = _hsv_to_rgb(rng.uniform(), 0.5, 1.0)[:, None, None]
    nuisance = 0.16 * nuis_color * stripe(theta_n, lam_n, rng.uniform(0, 2 * math.pi))

    fine = 0.22 * _FINE_COLOR * stripe(0.4, 2.2, rng.uniform(0, 2 * math.pi))

    tint = _hsv_to_rgb(rng.uniform(), 0.6, 1.0)[:, None, None] * rng.uniform(0.10, 0.40)
    noise = rng.normal(0, 0.02, (3, size, size))
    img = 0.30 + signal + nuisance + fine + tint + noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def textured_class_set(
    rng: np.random.Generator, n: int, size: int = 32, n_classes: int = 10
) -> tuple[np.ndarray, np.ndarray]:
    x = np.empty((n, 3, size, size), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = int(rng.integers(n_classes))
        x[i] = textured_class_image(cls, rng, size, n_classes)
        y[i] = cls
    return x, y


# ---------------------------------------------------------------------------
# planted-channel toy for the learned-view study


def planted_channel_set(
    rng: np.random.Generator,
    n: int,
    size: int = 8,
    n_classes: int = 4,
    signal: float = 0.8,
    nuisance: float = 1.0,
    noise: float = 0.2,
    collinear: float = 0.0,
    patterns: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images = class pattern + shared scalar + smooth field + channel noise.

    Every channel carries the full class pattern (scaled by `signal`), so a
    single channel suffices to classify; the shared nuisances dominate raw
    pixel variance, which is what a learned split should strip away.

    `collinear` blends the per-channel patterns toward a rank-1 structure
    (one base pattern per class, distinct per-channel gains). At 1.0 a
    pixel-wise cross-channel map can null the class in a channel subset, so
    an adversarial view split is able to destroy label information; at 0.0
    the patterns are independent and no such map exists.
    Returns (x (n,3,size,size) float32, y (n,), patterns) so train/test splits
    can share the same planted patterns.
    """
    if not 0.0 <= collinear <= 1.0:
        raise ValueError("collinear must be in [0, 1]")
    if patterns is None:
        prng = np.random.default_rng(12345)
        indep = prng.normal(0, 1.0, (n_classes, 3, size, size))
        base = prng.normal(0, 1.0, (n_classes, 1, size, size))
        gains = np.array([1.0, 0.6, 1.5]).reshape(1, 3, 1, 1)
        patterns = collinear * gains * base + (1.0 - collinear) * indep
        patterns -= patterns.mean(axis=(2, 3), keepdims=True)
    y = rng.integers(n_classes, size=n)
    x = signal * patterns[y]
    # shared scalar nuisance: one draw lights up all channels and pixels
    x = x + nuisance * rng.normal(0, 1.0, (n, 1, 1, 1))
    # smooth spatial field shared across channels
    u = rng.normal(0, 1.0, (n, 1, 2, 2))
    field = np.kron(u, np.ones((1, 1, size // 2, size // 2)))
    x = x + nuisance * field
    x = x + noise * rng.normal(0, 1.0, (n, 3, size, size))
    return x.astype(np.float32), y.astype(np.int64), patterns
