"""The four studies behind the sweep CLI and the acceptance suite.

Each study fixes a protocol (data seeds, encoder spec, critic, schedule,
probe sets) and exposes single-point runners plus a sweep driver, so the CLI
and tests execute literally the same code. Pools and probe sets are built
from dedicated data seeds and shared across all grid points of a sweep; only
the training seed and the swept parameter vary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import torch

from .datasets import FactorSpec, MovingDigitWorld, MovingMNISTConfig
from .flow_gen import FlowGenerator
from .harness import PointResult, SweepRecord, run_sweep
from .mi_core import CriticConfig, info_nce_loss, make_protocol_id
from .toydata import (
    mosaic_image,
    planted_channel_set,
    sample_patch_probe_set,
    textured_class_set,
)
from .trainer import (
    ArrayPairSource,
    CallablePairSource,
    EncoderSpec,
    PretrainConfig,
    build_encoder,
    contrastive_pretrain,
    embed_images,
    linear_probe,
)
from .view_learning import (
    ViewLearnConfig,
    freeze_views,
    make_view_critics,
    split_views,
    train_semisupervised,
    train_unsupervised,
)
from .views import Image, frequency_split, patch_pair

__all__ = [
    "PatchSweepSettings",
    "patch_point",
    "patch_distance_sweep",
    "FrequencySweepSettings",
    "frequency_point",
    "frequency_sweep",
    "FactorStudySettings",
    "FACTOR_NAMES",
    "factor_point",
    "moving_mnist_factor_study",
    "ViewLearnStudySettings",
    "view_learning_study",
    "EXPERIMENT_SWEEPS",
]

_ENCODER_CHANNELS = (8, 16, 32, 64)


def _to_float(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# patch-distance sweep


@dataclass(frozen=True)
class PatchSweepSettings:
    sweep_id: str = "patch_distance"
    # image large enough that the widest offset still leaves a broad start
    # range, else the critic memorizes (image, position) off the small pool
    image_size: int = 384
    cell: int = 32
    patch: int = 32
    pool_images: int = 64
    distances: tuple[int, ...] = (0, 16, 32, 64, 128, 176)
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 30
    steps_per_epoch: int = 50
    batch_size: int = 128
    lr: float = 0.03
    embed_dim: int = 64
    probe_train: int = 2000
    probe_test: int = 1000
    data_seed: int = 1234


@lru_cache(maxsize=2)
def _patch_pool(s: PatchSweepSettings) -> tuple[Image, ...]:
    rng = np.random.default_rng(s.data_seed)
    return tuple(
        Image(mosaic_image(rng, s.image_size, s.cell)[0].astype(np.float64), "RGB")
        for _ in range(s.pool_images)
    )


@lru_cache(maxsize=2)
def _patch_probe_sets(s: PatchSweepSettings):
    rng = np.random.default_rng(s.data_seed + 1)
    x, y = sample_patch_probe_set(rng, s.probe_train + s.probe_test, s.patch)
    return (x[: s.probe_train], y[: s.probe_train]), (x[s.probe_train :], y[s.probe_train :])


def patch_point(
    s: PatchSweepSettings, d: int, seed: int, capture: dict | None = None
) -> PointResult:
    """One grid point: pretrain on patch pairs at offset d, probe texture class.

    capture, when given, receives the trained encoders and the raw pretrain
    result so callers (the pretrain CLI) can persist them.
    """
    pool = _patch_pool(s)

    def pair_fn(rng: np.random.Generator, b: int):
        v1 = np.empty((b, 3, s.patch, s.patch), dtype=np.float32)
        v2 = np.empty_like(v1)
        for i in range(b):
            img = pool[int(rng.integers(len(pool)))]
            vp = patch_pair(img, int(d), s.patch, rng)
            v1[i] = vp.v1.data
            v2[i] = vp.v2.data
        return v1, v2

    spec = EncoderSpec(in_channels=3, conv_channels=_ENCODER_CHANNELS, embed_dim=s.embed_dim)
    encoder = build_encoder(spec, seed=seed)
    source = CallablePairSource(pair_fn, steps=s.steps_per_epoch)
    cfg = PretrainConfig(batch_size=s.batch_size, epochs=s.epochs, lr=s.lr, seed=seed)
    result = contrastive_pretrain(encoder, encoder, source, cfg)
    if capture is not None:
        capture["encoders"] = (encoder, encoder)
        capture["pretrain"] = result

    train, test = _patch_probe_sets(s)
    z_tr = embed_images(encoder, train[0])
    z_te = embed_images(encoder, test[0])
    probe = linear_probe(z_tr, train[1], z_te, test[1], task="classification", seed=seed)
    protocol = make_protocol_id(
        op="patch_distance",
        pretrain=result.protocol_id,
        pool=s.pool_images,
        image=s.image_size,
        cell=s.cell,
        patch=s.patch,
        data_seed=s.data_seed,
        probe=(s.probe_train, s.probe_test),
    )
    return PointResult(result.estimate.value, {"accuracy_pct": 100.0 * probe.metric_value}, protocol)


def patch_distance_sweep(s: PatchSweepSettings, progress=None) -> list[SweepRecord]:
    return run_sweep(
        s.sweep_id, "patch_offset_px", s.distances, s.seeds,
        lambda d, seed: patch_point(s, d, seed), progress,
    )


# ---------------------------------------------------------------------------
# frequency-split sweep


@dataclass(frozen=True)
class FrequencySweepSettings:
    sweep_id: str = "frequency_split"
    sigmas: tuple[float, ...] = (0.3, 0.45, 0.65, 0.95, 1.4, 2.1, 3.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    n_pairs: int = 3000
    image_size: int = 32
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.03
    embed_dim: int = 64
    probe_train: int = 2000
    probe_test: int = 1000
    data_seed: int = 555


@lru_cache(maxsize=2)
def _frequency_pool(s: FrequencySweepSettings):
    rng = np.random.default_rng(s.data_seed)
    n = s.n_pairs + s.probe_train + s.probe_test
    return textured_class_set(rng, n, s.image_size)


@lru_cache(maxsize=4)
def _frequency_views(s: FrequencySweepSettings, sigma: float):
    """Low/high band views for the whole pool at one sigma (shared across seeds)."""
    x, y = _frequency_pool(s)
    v1 = np.empty_like(x)
    v2 = np.empty_like(x)
    for i in range(len(x)):
        vp = frequency_split(Image(x[i].astype(np.float64), "RGB"), float(sigma))
        v1[i] = vp.v1.data.astype(np.float32)
        v2[i] = vp.v2.data.astype(np.float32)
    return v1, v2, y


def frequency_point(
    s: FrequencySweepSettings, sigma: float, seed: int, capture: dict | None = None
) -> PointResult:
    """Pretrain the two band encoders at one sigma; probe class from f1 || f2."""
    v1, v2, y = _frequency_views(s, float(sigma))
    n = s.n_pairs
    spec = EncoderSpec(in_channels=3, conv_channels=_ENCODER_CHANNELS, embed_dim=s.embed_dim)
    enc1 = build_encoder(spec, seed=seed)
    enc2 = build_encoder(spec, seed=seed + 10_000)
    source = ArrayPairSource(v1[:n], v2[:n])
    cfg = PretrainConfig(batch_size=s.batch_size, epochs=s.epochs, lr=s.lr, seed=seed)
    result = contrastive_pretrain(enc1, enc2, source, cfg)
    if capture is not None:
        capture["encoders"] = (enc1, enc2)
        capture["pretrain"] = result

    sl_tr = slice(n, n + s.probe_train)
    sl_te = slice(n + s.probe_train, None)
    z_tr = np.concatenate([embed_images(enc1, v1[sl_tr]), embed_images(enc2, v2[sl_tr])], axis=1)
    z_te = np.concatenate([embed_images(enc1, v1[sl_te]), embed_images(enc2, v2[sl_te])], axis=1)
    probe = linear_probe(z_tr, y[sl_tr], z_te, y[sl_te], task="classification", seed=seed)
    protocol = make_protocol_id(
        op="frequency_split",
        pretrain=result.protocol_id,
        pairs=s.n_pairs,
        image=s.image_size,
        data_seed=s.data_seed,
        probe=(s.probe_train, s.probe_test),
    )
    return PointResult(result.estimate.value, {"accuracy_pct": 100.0 * probe.metric_value}, protocol)


def frequency_sweep(s: FrequencySweepSettings, progress=None) -> list[SweepRecord]:
    return run_sweep(
        s.sweep_id, "sigma", s.sigmas, s.seeds,
        lambda sig, seed: frequency_point(s, sig, seed), progress,
    )


# ---------------------------------------------------------------------------
# moving-digit factor study


FACTOR_NAMES = ("digit", "position", "background")


@dataclass(frozen=True)
class FactorStudySettings:
    sweep_id: str = "moving_mnist_factors"
    dataset: MovingMNISTConfig = field(default_factory=MovingMNISTConfig)
    samples: int = 10_000
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.03
    embed_dim: int = 64
    seeds: tuple[int, ...] = (0, 1, 2)
    probe_train: int = 2000
    probe_test: int = 1000
    data_seed: int = 777


@lru_cache(maxsize=1)
def _factor_pairs(s: FactorStudySettings, shared: str):
    """uint8 (v1 sequences, v2 singles) for one shared-factor config.

    maxsize=1 on purpose: one config's sequences are ~1.2 GB, and the sweep
    visits seeds innermost so a single slot is always a hit within a config.
    """
    world = MovingDigitWorld(replace(s.dataset, seed=s.data_seed))
    rng = np.random.default_rng(s.data_seed + 1 + FACTOR_NAMES.index(shared))
    spec = FactorSpec(frozenset({shared}))
    cfg = s.dataset
    v1 = np.empty((s.samples, cfg.k, 3, cfg.canvas, cfg.canvas), dtype=np.uint8)
    v2 = np.empty((s.samples, 3, cfg.canvas, cfg.canvas), dtype=np.uint8)
    for i in range(s.samples):
        seq, labels = world.synth_sequence(rng)
        pair = world.make_factor_pair(seq, labels, spec, rng)
        v1[i] = np.round(pair.v1 * 255.0).astype(np.uint8)
        v2[i] = np.round(pair.v2 * 255.0).astype(np.uint8)
    return v1, v2


@lru_cache(maxsize=1)
def _factor_probe_set(s: FactorStudySettings):
    """Fresh labeled single images, shared by every config and seed."""
    world = MovingDigitWorld(replace(s.dataset, seed=s.data_seed))
    rng = np.random.default_rng(s.data_seed + 50)
    n = s.probe_train + s.probe_test
    cfg = s.dataset
    x = np.empty((n, 3, cfg.canvas, cfg.canvas), dtype=np.float32)
    digit = np.empty(n, dtype=np.int64)
    bkgd = np.empty(n, dtype=np.int64)
    pos = np.empty((n, 2), dtype=np.float64)
    for i in range(n):
        img, labels = world.render_single(rng)
        x[i] = img
        digit[i] = labels.digit_class
        bkgd[i] = labels.background_class
        pos[i] = labels.position
    return x, digit, bkgd, pos


def factor_point(s: FactorStudySettings, shared: str, seed: int) -> PointResult:
    """Pretrain sequence/image encoders on one shared-factor config, probe all tasks."""
    if shared not in FACTOR_NAMES:
        raise ValueError(f"unknown factor {shared!r}")
    v1, v2 = _factor_pairs(s, shared)
    # pool_grid=4: a global average would erase the digit's location, making
    # the position-shared config unmatchable in principle
    spec_seq = EncoderSpec(
        in_channels=3, conv_channels=_ENCODER_CHANNELS, embed_dim=s.embed_dim,
        aggregator="lstm", pool_grid=4,
    )
    spec_img = EncoderSpec(
        in_channels=3, conv_channels=_ENCODER_CHANNELS, embed_dim=s.embed_dim, pool_grid=4
    )
    f1 = build_encoder(spec_seq, seed=seed)
    f2 = build_encoder(spec_img, seed=seed + 10_000)
    source = ArrayPairSource(v1, v2, transform=_to_float)
    cfg = PretrainConfig(batch_size=s.batch_size, epochs=s.epochs, lr=s.lr, seed=seed)
    result = contrastive_pretrain(f1, f2, source, cfg)

    x, digit, bkgd, pos = _factor_probe_set(s)
    z = embed_images(f2, x)
    tr = slice(None, s.probe_train)
    te = slice(s.probe_train, None)
    digit_probe = linear_probe(z[tr], digit[tr], z[te], digit[te], task="classification", seed=seed)
    bkgd_probe = linear_probe(z[tr], bkgd[tr], z[te], bkgd[te], task="classification", seed=seed)
    loc_probe = linear_probe(
        z[tr], pos[tr], z[te], pos[te], task="localization", canvas=s.dataset.canvas, seed=seed
    )
    protocol = make_protocol_id(
        op="factor_study",
        pretrain=result.protocol_id,
        samples=s.samples,
        dataset=(s.dataset.canvas, s.dataset.digit, s.dataset.k, s.dataset.t),
        data_seed=s.data_seed,
        probe=(s.probe_train, s.probe_test),
    )
    return PointResult(
        result.estimate.value,
        {
            "digit_err_pct": 100.0 * (1.0 - digit_probe.metric_value),
            "bkgd_err_pct": 100.0 * (1.0 - bkgd_probe.metric_value),
            "loc_err_px": loc_probe.metric_value,
        },
        protocol,
    )


def moving_mnist_factor_study(s: FactorStudySettings, progress=None) -> list[SweepRecord]:
    """Sweep over which factor the views share; param value = factor index."""
    return run_sweep(
        s.sweep_id, "shared_factor_idx", tuple(range(len(FACTOR_NAMES))), s.seeds,
        lambda idx, seed: factor_point(s, FACTOR_NAMES[int(idx)], seed), progress,
    )


# ---------------------------------------------------------------------------
# learned-view study (planted-channel toy)


@dataclass(frozen=True)
class ViewLearnStudySettings:
    unlabeled: int = 4096
    label_count: int = 512
    probe_train: int = 2048
    probe_test: int = 1024
    n_classes: int = 4
    image_size: int = 8
    signal: float = 0.8
    nuisance: float = 1.0
    noise: float = 0.2
    collinear: float = 1.0  # rank-1 class patterns: the split CAN go wrong
    total_steps: int = 2400
    batch_size: int = 128
    gen_lr: float = 2e-4
    critic_lr: float = 6e-4
    semi_lr: float = 2e-4  # equal generator/critic rates in semi mode
    ce_weight: float = 1.0
    flow_depth: int = 6
    flow_width: int = 16
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_critic_steps: int = 400
    eval_batches: int = 64
    data_seed: int = 99


@lru_cache(maxsize=1)
def _planted_pools(s: ViewLearnStudySettings):
    rng = np.random.default_rng(s.data_seed)
    n = s.unlabeled + s.label_count + s.probe_train + s.probe_test
    x, y, _ = planted_channel_set(
        rng, n, s.image_size, s.n_classes,
        signal=s.signal, nuisance=s.nuisance, noise=s.noise, collinear=s.collinear,
    )
    u = slice(None, s.unlabeled)
    l = slice(s.unlabeled, s.unlabeled + s.label_count)
    ptr = slice(s.unlabeled + s.label_count, s.unlabeled + s.label_count + s.probe_train)
    pte = slice(s.unlabeled + s.label_count + s.probe_train, None)
    return (x[u], (x[l], y[l]), (x[ptr], y[ptr]), (x[pte], y[pte]))


def _pool_batch_fn(pool: np.ndarray):
    def fn(rng: np.random.Generator, b: int) -> np.ndarray:
        return pool[rng.integers(len(pool), size=b)]

    return fn


def estimate_split_mi(
    generator: FlowGenerator, pool: np.ndarray, s: ViewLearnStudySettings, seed: int
) -> float:
    """Frozen-generator InfoNCE estimate with freshly trained critics.

    The identical estimator runs against the identity generator and every
    trained generator, so reductions compare like with like.
    """
    torch.manual_seed(seed)
    c1, c2, score_cfg = make_view_critics(s.image_size, s.image_size, seed=seed + 500)
    opt = torch.optim.Adam(list(c1.parameters()) + list(c2.parameters()), lr=s.critic_lr)
    batch_fn = _pool_batch_fn(pool)
    rng = np.random.default_rng(seed + 1)
    for _ in range(s.eval_critic_steps):
        x = torch.from_numpy(batch_fn(rng, s.batch_size))
        with torch.no_grad():
            v1, v2 = split_views(generator(x))
        loss = info_nce_loss(c1(v1), c2(v2), score_cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
    total = 0.0
    eval_rng = np.random.default_rng(seed + 2)
    with torch.no_grad():
        for _ in range(s.eval_batches):
            x = torch.from_numpy(batch_fn(eval_rng, s.batch_size))
            v1, v2 = split_views(generator(x))
            total += float(info_nce_loss(c1(v1), c2(v2), score_cfg))
    return math.log(s.batch_size) - total / s.eval_batches


def _view_pixel_probes(
    generator: FlowGenerator, train, test, s: ViewLearnStudySettings, seed: int
) -> tuple[float, float]:
    """Linear probes on the raw pixels of each learned view; returns accuracies."""
    frozen = freeze_views(generator)
    v1_tr, v2_tr = frozen(train[0])
    v1_te, v2_te = frozen(test[0])
    acc = []
    for vtr, vte in ((v1_tr, v1_te), (v2_tr, v2_te)):
        p = linear_probe(
            vtr.reshape(len(vtr), -1), train[1], vte.reshape(len(vte), -1), test[1],
            task="classification", seed=seed,
        )
        acc.append(p.metric_value)
    return acc[0], acc[1]


EXPERIMENT_SWEEPS = {
    "patch_distance": patch_distance_sweep,
    "frequency": frequency_sweep,
    "moving_mnist_factors": moving_mnist_factor_study,
}


def view_learning_study(s: ViewLearnStudySettings, progress=None) -> dict:
    """Identity baseline vs unsupervised vs semi-supervised learned splits."""
    unlabeled, labeled, probe_tr, probe_te = _planted_pools(s)
    batch_fn = _pool_batch_fn(unlabeled)

    def labeled_fn(rng: np.random.Generator, b: int):
        idx = rng.integers(len(labeled[0]), size=b)
        return labeled[0][idx], labeled[1][idx]

    def log(msg):
        if progress is not None:
            progress(msg)

    report: dict = {"identity": [], "unsupervised": [], "semi": []}
    for seed in s.seeds:
        identity_gen = FlowGenerator(mode="VP", depth=s.flow_depth, width=s.flow_width, seed=seed)
        id_mi = estimate_split_mi(identity_gen, unlabeled, s, seed)
        a1, a2 = _view_pixel_probes(identity_gen, probe_tr, probe_te, s, seed)
        report["identity"].append({"i_nce": id_mi, "acc1": a1, "acc2": a2})
        log(f"identity seed={seed}: i_nce={id_mi:.4f} acc=({a1:.3f},{a2:.3f})")

        for mode in ("unsupervised", "semi"):
            gen = FlowGenerator(mode="VP", depth=s.flow_depth, width=s.flow_width, seed=seed)
            c1, c2, score_cfg = make_view_critics(s.image_size, s.image_size, seed=seed + 1000)
            if mode == "unsupervised":
                cfg = ViewLearnConfig(
                    mode=mode, total_steps=s.total_steps, batch_size=s.batch_size,
                    gen_lr=s.gen_lr, critic_lr=s.critic_lr, seed=seed,
                )
                res = train_unsupervised(gen, c1, c2, score_cfg, batch_fn, cfg)
            else:
                cfg = ViewLearnConfig(
                    mode=mode, total_steps=s.total_steps, batch_size=s.batch_size,
                    gen_lr=s.semi_lr, critic_lr=s.semi_lr, seed=seed,
                    label_count=s.label_count, ce_weight=s.ce_weight,
                )
                res = train_semisupervised(
                    gen, c1, c2, score_cfg, batch_fn, labeled_fn, s.n_classes, cfg
                )
            mi = estimate_split_mi(gen, unlabeled, s, seed)
            a1, a2 = _view_pixel_probes(gen, probe_tr, probe_te, s, seed)
            entry = {
                "i_nce": mi,
                "acc1": a1,
                "acc2": a2,
                "final_acc": 0.5 * (a1 + a2),
                "protocol_id": res.protocol_id,
            }
            report[mode].append(entry)
            log(f"{mode} seed={seed}: i_nce={mi:.4f} acc=({a1:.3f},{a2:.3f})")

    def mean(key, rows):
        return float(np.mean([r[key] for r in rows]))

    report["summary"] = {
        "identity_i_nce_mean": mean("i_nce", report["identity"]),
        "unsup_i_nce_mean": mean("i_nce", report["unsupervised"]),
        "semi_i_nce_mean": mean("i_nce", report["semi"]),
        "semi_reduction_pct": 100.0
        * (1.0 - mean("i_nce", report["semi"]) / mean("i_nce", report["identity"])),
        "unsup_reduction_pct": 100.0
        * (1.0 - mean("i_nce", report["unsupervised"]) / mean("i_nce", report["identity"])),
        "semi_acc_std": float(np.std([r["final_acc"] for r in report["semi"]])),
        "unsup_acc_std": float(np.std([r["final_acc"] for r in report["unsupervised"]])),
        "chance": 1.0 / s.n_classes,
    }
    return report
