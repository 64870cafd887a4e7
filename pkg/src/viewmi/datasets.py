"""Colorful moving-digit sequences with controllable shared factors.

Each sample has three generative factors: digit class, digit position, and
background class. A sequence shows one digit gliding over a fixed background
with specular wall reflections; the companion view is a single image that
copies a chosen subset of frame t's factors and redraws the rest. The digit
source is a built-in glyph font with per-instance rotation/scale jitter and
the backgrounds are a procedural 10-class texture pool, so synthesis is
fully deterministic given the config seed.

Also home to the labeled-image manifest loader and the chunked sequence
container used by the CLI.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

__all__ = [
    "MovingMNISTConfig",
    "FactorSpec",
    "SampleLabels",
    "Sequence",
    "FactorPair",
    "MovingDigitWorld",
    "synth_sequence",
    "make_factor_pair",
    "render_glyph",
    "texture_tile",
    "build_texture_pool",
    "LabeledImages",
    "load_labeled_images",
    "save_sequence_dataset",
    "load_sequence_dataset",
]

FACTORS = ("digit", "position", "background")

# 5x7 bitmap font, one row string per scanline
_GLYPH_ROWS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}
_GLYPH_BASE = {
    d: np.array([[c == "1" for c in row] for row in rows], dtype=np.float64)
    for d, rows in _GLYPH_ROWS.items()
}


def render_glyph(digit_class: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """One digit instance: upscaled bitmap with rotation/scale jitter.

    Returns a (size, size) float32 alpha mask in [0, 1].
    """
    base = _GLYPH_BASE[int(digit_class)]
    scale = size // 7  # 7 rows fill the box; 5 cols get padded
    up = np.kron(base, np.ones((scale, scale)))
    pad_h = size - up.shape[0]
    pad_w = size - up.shape[1]
    up = np.pad(up, ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)))
    angle = rng.uniform(-12.0, 12.0)
    zoom = rng.uniform(0.88, 1.1)
    out = ndimage.rotate(up, angle, reshape=False, order=1, mode="constant")
    c = (size - 1) / 2.0
    out = ndimage.affine_transform(
        out, np.diag([1 / zoom, 1 / zoom]), offset=c * (1 - 1 / zoom), order=1, mode="constant"
    )
    out = ndimage.gaussian_filter(out, 0.6)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def texture_tile(
    class_id: int,
    rng: np.random.Generator,
    size: int = 96,
    n_classes: int = 10,
    freq_scale: float = 1.0,
    noise: float = 0.04,
    class_hue: bool = True,
) -> np.ndarray:
    """One textured tile of the given class: stripe signature, optional hue code.

    Class identity fixes the stripe orientation and frequency, plus the base
    hue when class_hue is set; the instance draws phase, pixel noise, and
    either a small hue jitter (class_hue) or a fully random hue, in which
    case color statistics carry no label information at all.
    Returns (3, size, size) float32 in [0, 1].
    """
    cls = int(class_id)
    if class_hue:
        hue = (cls / n_classes + rng.uniform(-0.02, 0.02)) % 1.0
    else:
        hue = rng.uniform()
    theta = cls * math.pi / n_classes + rng.uniform(-0.12, 0.12)
    freq = freq_scale * (3.0 + 0.9 * cls + rng.uniform(-0.25, 0.25))
    phase = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    c1 = _hsv_to_rgb(hue, 0.75, 0.9)
    c2 = _hsv_to_rgb((hue + 0.13) % 1.0, 0.45, 0.4)
    img = c1[:, None, None] * wave + c2[:, None, None] * (1.0 - wave)
    img = img + rng.normal(0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def build_texture_pool(
    rng: np.random.Generator, n_classes: int = 10, per_class: int = 12, size: int = 96
) -> np.ndarray:
    """(n_classes, per_class, 3, size, size) float32 texture pool."""
    pool = np.empty((n_classes, per_class, 3, size, size), dtype=np.float32)
    for c in range(n_classes):
        for i in range(per_class):
            pool[c, i] = texture_tile(c, rng, size, n_classes)
    return pool


# ---------------------------------------------------------------------------
# config and sample types


@dataclass(frozen=True)
class MovingMNISTConfig:
    canvas: int = 64
    digit: int = 28
    speed_factor: float = 0.1
    k: int = 10
    t: int = 20
    n_classes: int = 10
    pool_per_class: int = 12
    pool_size: int = 96
    seed: int = 0

    def __post_init__(self):
        if self.digit > self.canvas:
            raise ValueError("digit must fit in canvas")
        if not 1 <= self.k < self.t:
            raise ValueError("need 1 <= k < t")
        if self.pool_size < self.canvas:
            raise ValueError("pool images must be at least canvas-sized")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes to redraw distinct factors")

    @property
    def speed(self) -> float:
        return self.speed_factor * self.canvas


@dataclass(frozen=True)
class FactorSpec:
    """Which factors the companion view copies from frame t (may be empty)."""

    shared: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        shared = frozenset(self.shared)
        unknown = shared - set(FACTORS)
        if unknown:
            raise ValueError(f"unknown factors {sorted(unknown)}; valid: {FACTORS}")
        object.__setattr__(self, "shared", shared)


@dataclass(frozen=True)
class SampleLabels:
    digit_class: int
    position: tuple[float, float]  # (x, y) bbox center at frame t, sub-pixel
    background_class: int
    canvas: int = 64

    def __post_init__(self):
        x, y = self.position
        if not (0 <= x < self.canvas and 0 <= y < self.canvas):
            raise ValueError(f"position {self.position} outside canvas {self.canvas}")


@dataclass
class Sequence:
    """Frames plus the latent state make_factor_pair needs for factor copying."""

    frames: np.ndarray  # (t, 3, canvas, canvas) float32
    positions: np.ndarray  # (t, 2) float64 top-left (y, x), sub-pixel
    reflected: np.ndarray  # (t,) bool, True where a wall bounce happened
    glyph: np.ndarray  # (digit, digit) float32 alpha
    background: np.ndarray  # (3, canvas, canvas) float32


@dataclass
class FactorPair:
    """v1 = first k frames of the sequence; v2 = single factor-controlled image."""

    v1: np.ndarray  # (k, 3, canvas, canvas) float32
    v2: np.ndarray  # (3, canvas, canvas) float32
    shared: frozenset
    labels: SampleLabels
    v2_labels: SampleLabels


class MovingDigitWorld:
    """Deterministic sample factory for one MovingMNISTConfig.

    The texture pool is built once from cfg.seed; per-sample randomness comes
    from the rng handed to each call, so (cfg, seed) fully determine output.
    """

    def __init__(self, cfg: MovingMNISTConfig):
        self.cfg = cfg
        pool_rng = np.random.default_rng(cfg.seed)
        self.pool = build_texture_pool(pool_rng, cfg.n_classes, cfg.pool_per_class, cfg.pool_size)

    # -- low-level pieces

    def _draw_background(self, rng: np.random.Generator) -> tuple[int, np.ndarray]:
        cfg = self.cfg
        cls = int(rng.integers(cfg.n_classes))
        img = self.pool[cls, int(rng.integers(cfg.pool_per_class))]
        margin = cfg.pool_size - cfg.canvas
        y, x = (int(v) for v in rng.integers(0, margin + 1, size=2))
        return cls, img[:, y : y + cfg.canvas, x : x + cfg.canvas].copy()

    def _compose(self, background: np.ndarray, glyph: np.ndarray, top_left: np.ndarray) -> np.ndarray:
        """Alpha-blend the white digit at the (rounded) sub-pixel position."""
        cfg = self.cfg
        frame = background.copy()
        y = int(round(float(top_left[0])))
        x = int(round(float(top_left[1])))
        y = min(max(y, 0), cfg.canvas - cfg.digit)
        x = min(max(x, 0), cfg.canvas - cfg.digit)
        region = frame[:, y : y + cfg.digit, x : x + cfg.digit]
        frame[:, y : y + cfg.digit, x : x + cfg.digit] = region * (1.0 - glyph) + glyph
        return frame

    def _center(self, top_left: np.ndarray) -> tuple[float, float]:
        half = (self.cfg.digit - 1) / 2.0
        return (float(top_left[1]) + half, float(top_left[0]) + half)  # (x, y)

    # -- spec operations

    def synth_sequence(
        self, rng: np.random.Generator, velocity: tuple[float, float] | None = None
    ) -> tuple[Sequence, SampleLabels]:
        """Simulate and render frames 1..t; labels read off at frame t.

        velocity overrides the uniform-direction draw (test hook; (0, 0)
        freezes the digit in place).
        """
        cfg = self.cfg
        digit_class = int(rng.integers(cfg.n_classes))
        glyph = render_glyph(digit_class, rng, cfg.digit)
        bg_class, background = self._draw_background(rng)
        limit = float(cfg.canvas - cfg.digit)
        pos = rng.uniform(0.0, limit, size=2)  # top-left (y, x)
        if velocity is None:
            theta = rng.uniform(0.0, 2 * math.pi)
            vel = np.array([math.sin(theta), math.cos(theta)]) * cfg.speed
        else:
            vel = np.array(velocity, dtype=np.float64)

        positions = np.empty((cfg.t, 2))
        reflected = np.zeros(cfg.t, dtype=bool)
        frames = np.empty((cfg.t, 3, cfg.canvas, cfg.canvas), dtype=np.float32)
        for i in range(cfg.t):
            positions[i] = pos
            frames[i] = self._compose(background, glyph, pos)
            if i + 1 < cfg.t:
                pos = pos + vel
                for axis in range(2):
                    while pos[axis] < 0.0 or pos[axis] > limit:
                        if pos[axis] < 0.0:
                            pos[axis] = -pos[axis]
                        else:
                            pos[axis] = 2 * limit - pos[axis]
                        vel[axis] = -vel[axis]
                        reflected[i + 1] = True

        seq = Sequence(frames, positions, reflected, glyph, background)
        labels = SampleLabels(digit_class, self._center(positions[-1]), bg_class, cfg.canvas)
        return seq, labels

    def make_factor_pair(
        self, seq: Sequence, labels: SampleLabels, spec: FactorSpec, rng: np.random.Generator
    ) -> FactorPair:
        """v1 = frames 1..k; v2 copies shared factors from frame t, redraws the rest.

        Redraws are class-exclusive: an unshared digit or background never
        repeats the original class. Draw order is fixed (digit, position,
        background) so pairs replay deterministically.
        """
        cfg = self.cfg
        if "digit" in spec.shared:
            v2_digit = labels.digit_class
            glyph = seq.glyph
        else:
            v2_digit = int((labels.digit_class + 1 + rng.integers(cfg.n_classes - 1)) % cfg.n_classes)
            glyph = render_glyph(v2_digit, rng, cfg.digit)
        limit = float(cfg.canvas - cfg.digit)
        if "position" in spec.shared:
            top_left = seq.positions[-1].copy()
        else:
            top_left = rng.uniform(0.0, limit, size=2)
        if "background" in spec.shared:
            v2_bg = labels.background_class
            background = seq.background
        else:
            v2_bg = int(
                (labels.background_class + 1 + rng.integers(cfg.n_classes - 1)) % cfg.n_classes
            )
            img = self.pool[v2_bg, int(rng.integers(cfg.pool_per_class))]
            margin = cfg.pool_size - cfg.canvas
            y, x = (int(v) for v in rng.integers(0, margin + 1, size=2))
            background = img[:, y : y + cfg.canvas, x : x + cfg.canvas].copy()

        v2 = self._compose(background, glyph, top_left)
        v2_labels = SampleLabels(v2_digit, self._center(top_left), v2_bg, cfg.canvas)
        return FactorPair(seq.frames[: cfg.k].copy(), v2, spec.shared, labels, v2_labels)

    def render_single(
        self, rng: np.random.Generator
    ) -> tuple[np.ndarray, SampleLabels]:
        """Fresh standalone labeled image (digit at uniform position over background)."""
        cfg = self.cfg
        digit_class = int(rng.integers(cfg.n_classes))
        glyph = render_glyph(digit_class, rng, cfg.digit)
        bg_class, background = self._draw_background(rng)
        top_left = rng.uniform(0.0, float(cfg.canvas - cfg.digit), size=2)
        img = self._compose(background, glyph, top_left)
        return img, SampleLabels(digit_class, self._center(top_left), bg_class, cfg.canvas)


def synth_sequence(
    cfg: MovingMNISTConfig, rng: np.random.Generator, **kw
) -> tuple[Sequence, SampleLabels]:
    """One-shot convenience wrapper; bulk callers should hold a MovingDigitWorld."""
    return MovingDigitWorld(cfg).synth_sequence(rng, **kw)


def make_factor_pair(
    cfg: MovingMNISTConfig,
    seq: Sequence,
    labels: SampleLabels,
    spec: FactorSpec,
    rng: np.random.Generator,
) -> FactorPair:
    return MovingDigitWorld(cfg).make_factor_pair(seq, labels, spec, rng)


# ---------------------------------------------------------------------------
# labeled image manifests


@dataclass
class LabeledImages:
    """Manifest-backed image set; label -1 marks unlabeled rows."""

    paths: list[Path]
    labels: np.ndarray
    class_names: list[str]

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def per_class_counts(self) -> dict[str, int]:
        return {
            name: int(np.sum(self.labels == i)) for i, name in enumerate(self.class_names)
        }

    @property
    def labeled(self) -> "LabeledImages":
        keep = self.labels >= 0
        return LabeledImages(
            [p for p, k in zip(self.paths, keep) if k], self.labels[keep], self.class_names
        )

    @property
    def unlabeled(self) -> "LabeledImages":
        keep = self.labels < 0
        return LabeledImages(
            [p for p, k in zip(self.paths, keep) if k], self.labels[keep], self.class_names
        )

    def __len__(self) -> int:
        return len(self.paths)

    def load_array(self, indices=None) -> np.ndarray:
        """(N, 3, H, W) float32 in [0, 1]."""
        idx = range(len(self.paths)) if indices is None else indices
        imgs = []
        for i in idx:
            with PILImage.open(self.paths[i]) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            imgs.append(arr.transpose(2, 0, 1))
        return np.stack(imgs) if imgs else np.empty((0, 3, 0, 0), dtype=np.float32)

    def shuffled_indices(self, seed: int) -> np.ndarray:
        return np.random.default_rng(seed).permutation(len(self.paths))

    def split(self, train_fraction: float, seed: int) -> tuple["LabeledImages", "LabeledImages"]:
        order = self.shuffled_indices(seed)
        cut = int(round(train_fraction * len(order)))
        pick = lambda part: LabeledImages(  # noqa: E731
            [self.paths[i] for i in part], self.labels[part], self.class_names
        )
        return pick(order[:cut]), pick(order[cut:])


def load_labeled_images(manifest_path) -> LabeledImages:
    """Load a `path,label` CSV manifest (empty label = unlabeled row)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    paths: list[Path] = []
    raw_labels: list[str] = []
    with open(manifest_path, newline="") as f:
        for i, row in enumerate(csv.reader(f)):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{manifest_path}: row {i} has {len(row)} fields, expected 2")
            p = root / row[0] if not Path(row[0]).is_absolute() else Path(row[0])
            if not p.exists():
                raise ValueError(f"{manifest_path}: row {i}: missing file {p}")
            paths.append(p)
            raw_labels.append(row[1].strip())
    class_names = sorted({l for l in raw_labels if l})
    name_to_id = {n: i for i, n in enumerate(class_names)}
    labels = np.array([name_to_id.get(l, -1) for l in raw_labels], dtype=np.int64)
    return LabeledImages(paths, labels, class_names)


# ---------------------------------------------------------------------------
# chunked sequence container


def save_sequence_dataset(
    out_dir,
    frames: np.ndarray,
    labels: dict[str, np.ndarray],
    config: MovingMNISTConfig | None = None,
    chunk_bytes: int = 64 * 1024 * 1024,
) -> None:
    """Write frames as raw chunks plus a JSON sidecar with shapes and labels."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = np.ascontiguousarray(frames)
    per_sample = frames[0].nbytes if len(frames) else 1
    per_chunk = max(1, chunk_bytes // per_sample)
    chunks = []
    for ci, start in enumerate(range(0, len(frames), per_chunk)):
        block = frames[start : start + per_chunk]
        name = f"chunk_{ci:04d}.bin"
        (out / name).write_bytes(block.tobytes())
        chunks.append({"file": name, "samples": int(len(block))})
    meta = {
        "dtype": frames.dtype.str,
        "shape": list(frames.shape),
        "chunks": chunks,
        "labels": {k: np.asarray(v).tolist() for k, v in labels.items()},
        "config": None if config is None else config.__dict__,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_sequence_dataset(in_dir) -> tuple[np.ndarray, dict[str, np.ndarray], dict]:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    dtype = np.dtype(meta["dtype"])
    shape = tuple(meta["shape"])
    parts = []
    for entry in meta["chunks"]:
        raw = (src / entry["file"]).read_bytes()
        parts.append(np.frombuffer(raw, dtype=dtype).reshape((entry["samples"],) + shape[1:]))
    frames = np.concatenate(parts) if parts else np.empty(shape, dtype=dtype)
    if frames.shape != shape:
        raise ValueError(f"{in_dir}: chunk payload {frames.shape} disagrees with sidecar {shape}")
    labels = {k: np.asarray(v) for k, v in meta["labels"].items()}
    return frames, labels, meta
