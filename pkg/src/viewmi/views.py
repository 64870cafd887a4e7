"""View constructors: patches, colorspace splits, frequency splits, augmentation.

Everything here is deterministic given (input, config, rng state), so view
generation can be replayed or parallelized across samples with per-sample
RNG streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from skimage import color as _skcolor

__all__ = [
    "Image",
    "ViewPair",
    "AugmentationConfig",
    "register_colorspace",
    "registered_colorspaces",
    "convert_colorspace",
    "color_split",
    "patch_pair",
    "frequency_split",
    "gaussian_blur",
    "augment",
    "augment_pair",
    "resize_image",
]


# ---------------------------------------------------------------------------
# colorspace registry

# SECAM luma/chroma matrix; rows 2 and 3 sum to zero so gray maps to zero chroma.
_YDBDR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.450, -0.883, 1.333],
        [-1.333, 1.116, 0.217],
    ]
)
_YDBDR_INV = np.linalg.inv(_YDBDR)


def _rgb_to_ydbdr(data: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jhw->ihw", _YDBDR, data)


def _ydbdr_to_rgb(data: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jhw->ihw", _YDBDR_INV, data)


def _rgb_to_lab(data: np.ndarray) -> np.ndarray:
    return _skcolor.rgb2lab(np.transpose(data, (1, 2, 0))).transpose(2, 0, 1)


def _lab_to_rgb(data: np.ndarray) -> np.ndarray:
    return _skcolor.lab2rgb(np.transpose(data, (1, 2, 0))).transpose(2, 0, 1)


@dataclass(frozen=True)
class _ColorSpace:
    name: str
    channels: int
    from_rgb: object | None
    to_rgb: object | None


_SPACES: dict[str, _ColorSpace] = {}


def register_colorspace(name: str, channels: int, from_rgb=None, to_rgb=None) -> None:
    """Add a colorspace to the conversion registry.

    Converters are (C,H,W) -> (C,H,W) array maps; either may be None for
    spaces that are not reachable by matrix conversion (e.g. LEARNED, which
    only a flow generator produces).
    """
    _SPACES[name] = _ColorSpace(name, channels, from_rgb, to_rgb)


def registered_colorspaces() -> tuple[str, ...]:
    return tuple(_SPACES)


register_colorspace("RGB", 3)
register_colorspace("YDbDr", 3, _rgb_to_ydbdr, _ydbdr_to_rgb)
register_colorspace("Lab", 3, _rgb_to_lab, _lab_to_rgb)
register_colorspace("LEARNED", 3)


# ---------------------------------------------------------------------------
# image and view-pair types


def _parse_tag(tag: str) -> tuple[str, int | None]:
    """Split 'SPACE' or 'SPACE:a' / 'SPACE:a-b' into (space, channel count)."""
    if ":" not in tag:
        return tag, None
    base, _, rng = tag.partition(":")
    if "-" in rng:
        lo, hi = rng.split("-")
        width = int(hi) - int(lo) + 1
    else:
        width = 1
    return base, width


@dataclass
class Image:
    """Channel-first image, float64, values natively [0,1] before conversion.

    colorspace is one of the registered spaces, optionally annotated with a
    channel range for split views ("YDbDr:0", "YDbDr:1-2"); full-space images
    must carry the space's full channel count.
    """

    data: np.ndarray
    colorspace: str = "RGB"

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"image data must be (channels, height, width), got {d.shape}")
        if not 1 <= d.shape[0] <= 3:
            raise ValueError(f"channel count must be 1..3, got {d.shape[0]}")
        if not np.isfinite(d).all():
            raise ValueError("image data must be finite")
        base, width = _parse_tag(self.colorspace)
        if base not in _SPACES:
            raise ValueError(f"unknown colorspace {base!r}; registered: {registered_colorspaces()}")
        expected = _SPACES[base].channels if width is None else width
        if d.shape[0] != expected:
            raise ValueError(
                f"colorspace tag {self.colorspace!r} implies {expected} channels, data has {d.shape[0]}"
            )
        self.data = d

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class ViewPair:
    """Two views of one source datum plus enough metadata to regenerate them."""

    v1: Image
    v2: Image
    generator: str
    params: dict = field(default_factory=dict)
    shared_factors: tuple[str, ...] | None = None

    def __post_init__(self):
        if (self.v1.height, self.v1.width) != (self.v2.height, self.v2.width):
            raise ValueError("views must share spatial dimensions")


# ---------------------------------------------------------------------------
# conversions and splits


def convert_colorspace(img: Image, target: str) -> Image:
    """Convert a full-space image between RGB and a registered space."""
    if target not in _SPACES:
        raise ValueError(f"unknown colorspace {target!r}; registered: {registered_colorspaces()}")
    base, width = _parse_tag(img.colorspace)
    if width is not None:
        raise ValueError(f"cannot convert split view tagged {img.colorspace!r}")
    if base == target:
        return Image(img.data.copy(), target)
    if target == "RGB":
        space = _SPACES[base]
        if space.to_rgb is None:
            raise ValueError(f"{base} has no conversion back to RGB")
        return Image(space.to_rgb(img.data), "RGB")
    if base != "RGB":
        raise ValueError(f"forward conversions start from RGB, got {base}")
    space = _SPACES[target]
    if space.from_rgb is None:
        raise ValueError(f"{target} is not reachable by conversion (produced by a generator)")
    return Image(space.from_rgb(img.data), target)


def color_split(img: Image) -> ViewPair:
    """Split a 3-channel image into first channel vs remaining two."""
    if img.channels != 3:
        raise ValueError(f"color_split needs a 3-channel image, got {img.channels}")
    base, _ = _parse_tag(img.colorspace)
    v1 = Image(img.data[0:1].copy(), f"{base}:0")
    v2 = Image(img.data[1:3].copy(), f"{base}:1-2")
    return ViewPair(v1, v2, generator="color_split", params={"colorspace": base})


def patch_pair(img: Image, d: int, patch: int, rng: np.random.Generator) -> ViewPair:
    """Two patch views at diagonal offset d, start position uniform over valid range.

    Out-of-range starts are rejected up front (never clamped), so patch
    statistics carry no boundary bias.
    """
    d, patch = int(d), int(patch)
    if patch < 1:
        raise ValueError("patch size must be >= 1")
    if d < 0:
        raise ValueError("offset d must be >= 0")
    max_y = img.height - patch - d
    max_x = img.width - patch - d
    if max_y < 0 or max_x < 0:
        raise ValueError(
            f"no valid start: image {img.height}x{img.width}, patch {patch}, offset {d} "
            f"needs start range [0, {max_y}]x[0, {max_x}]"
        )
    y = int(rng.integers(0, max_y + 1))
    x = int(rng.integers(0, max_x + 1))
    v1 = Image(img.data[:, y : y + patch, x : x + patch].copy(), img.colorspace)
    v2 = Image(img.data[:, y + d : y + d + patch, x + d : x + d + patch].copy(), img.colorspace)
    return ViewPair(v1, v2, generator="patch_pair", params={"d": d, "patch": patch, "x": x, "y": y})


def gaussian_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), reflect padding."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    r = math.ceil(3 * sigma)
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2 * sigma**2))
    k /= k.sum()
    out = ndimage.correlate1d(np.asarray(data, dtype=np.float64), k, axis=-1, mode="reflect")
    return ndimage.correlate1d(out, k, axis=-2, mode="reflect")


def frequency_split(img: Image, sigma: float) -> ViewPair:
    """Low-pass / high-pass view pair: v1 = blur(img, sigma), v2 = img - v1.

    v1 is rounded to float32 precision so that v2 is an exactly representable
    float64 difference whenever the image values themselves are float32-grade
    (8-bit files, float32 synthesis); then v1 + v2 reconstructs the input
    bit-exactly. Arbitrary full-precision inputs reconstruct within one ulp.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    v1_data = gaussian_blur(img.data, sigma).astype(np.float32).astype(np.float64)
    v2_data = img.data - v1_data
    v1 = Image(v1_data, img.colorspace)
    v2 = Image(v2_data, img.colorspace)
    return ViewPair(v1, v2, generator="frequency_split", params={"sigma": float(sigma)})


# ---------------------------------------------------------------------------
# augmentation pipeline


@dataclass(frozen=True)
class AugmentationConfig:
    """Strength-parameterized augmentation family.

    crop_bound is the lower bound on the cropped area fraction; jitter
    maps strength x to amplitudes 0.4x (brightness, contrast, saturation)
    and 0.1x (hue).
    """

    crop_bound: float = 0.2
    jitter_strength: float = 1.0
    blur_sigma_range: tuple[float, float] | None = None
    grayscale_prob: float = 0.0
    flip_prob: float = 0.5
    out_size: int = 64

    def __post_init__(self):
        if not 0 < self.crop_bound <= 1:
            raise ValueError("crop_bound must be in (0, 1]")
        if self.jitter_strength < 0:
            raise ValueError("jitter_strength must be >= 0")
        if self.blur_sigma_range is not None:
            lo, hi = self.blur_sigma_range
            if not 0 < lo <= hi:
                raise ValueError("blur_sigma_range needs 0 < lo <= hi")
        for name in ("grayscale_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.out_size < 1:
            raise ValueError("out_size must be positive")


def resize_image(data: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear resize to out_size x out_size."""
    t = torch.from_numpy(np.ascontiguousarray(data)).unsqueeze(0)
    out = F.interpolate(t, size=(out_size, out_size), mode="bilinear", align_corners=False)
    return out.squeeze(0).numpy()


_LUMA = np.array([0.299, 0.587, 0.114])


def _jitter(data: np.ndarray, x: float, rng: np.random.Generator) -> np.ndarray:
    amp, hue_amp = 0.4 * x, 0.1 * x
    b, c, s = 1.0 + rng.uniform(-amp, amp, size=3)
    data = np.clip(data * b, 0.0, 1.0)
    gray_mean = float(np.einsum("c,chw->hw", _LUMA, data).mean())
    data = np.clip((data - gray_mean) * c + gray_mean, 0.0, 1.0)
    gray = np.einsum("c,chw->hw", _LUMA, data)[None]
    data = np.clip(gray + (data - gray) * s, 0.0, 1.0)
    if hue_amp > 0:
        delta = rng.uniform(-hue_amp, hue_amp)
        hsv = _skcolor.rgb2hsv(np.transpose(data, (1, 2, 0)))
        hsv[..., 0] = (hsv[..., 0] + delta) % 1.0
        data = np.clip(_skcolor.hsv2rgb(hsv).transpose(2, 0, 1), 0.0, 1.0)
    return data


def augment(img: Image, cfg: AugmentationConfig, rng: np.random.Generator) -> Image:
    """One draw from the augmentation family.

    Order: random resized crop (area fraction uniform in [crop_bound, 1]),
    color jitter, optional grayscale, optional Gaussian blur, optional
    horizontal flip. Identity-strength configs reduce to a pure resize.
    """
    if img.colorspace != "RGB":
        raise ValueError("augmentation operates on RGB images")
    data = img.data
    h, w = data.shape[1], data.shape[2]

    if cfg.crop_bound < 1.0:
        frac = rng.uniform(cfg.crop_bound, 1.0)
        side_h = max(1, min(h, round(h * math.sqrt(frac))))
        side_w = max(1, min(w, round(w * math.sqrt(frac))))
        top = int(rng.integers(0, h - side_h + 1))
        left = int(rng.integers(0, w - side_w + 1))
        data = data[:, top : top + side_h, left : left + side_w]
    data = resize_image(data, cfg.out_size)
    data = np.clip(data, 0.0, 1.0)

    if cfg.jitter_strength > 0:
        data = _jitter(data, cfg.jitter_strength, rng)
    if cfg.grayscale_prob > 0 and rng.random() < cfg.grayscale_prob:
        data = np.repeat(np.einsum("c,chw->hw", _LUMA, data)[None], 3, axis=0)
    if cfg.blur_sigma_range is not None:
        sigma = rng.uniform(*cfg.blur_sigma_range)
        data = np.clip(gaussian_blur(data, sigma), 0.0, 1.0)
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        data = data[:, :, ::-1].copy()
    return Image(np.ascontiguousarray(data), "RGB")


def augment_pair(img: Image, cfg: AugmentationConfig, rng: np.random.Generator) -> ViewPair:
    """Two independent augmentation draws of one image."""
    v1 = augment(img, cfg, rng)
    v2 = augment(img, cfg, rng)
    return ViewPair(
        v1,
        v2,
        generator="augment_pair",
        params={
            "crop_bound": cfg.crop_bound,
            "jitter_strength": cfg.jitter_strength,
            "out_size": cfg.out_size,
        },
    )
