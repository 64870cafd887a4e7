"""Adversarial learning of view splits with an invertible generator.

The generator is a channel-wise invertible flow; its output is split into a
1-channel view and a 2-channel view. Two critics embed the views and score
them with InfoNCE. Training alternates: the critics take one or more ascent
steps on the estimate with the generator frozen, then the generator takes a
descent step on a fresh forward pass. Invertibility guarantees no sample
information is destroyed, only repartitioned between the views.

Semi-supervised mode adds per-view linear classifiers on a separately drawn
labeled stream; their cross-entropy (weighted by ce_weight) pulls label
information into both views while the InfoNCE term squeezes everything else
out. With ce_weight = 0 the labeled terms contribute exactly zero gradient,
so a semi run replays the matching unsupervised run step for step.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .flow_gen import FlowGenerator
from .mi_core import CriticConfig, info_nce_loss, make_protocol_id
from .trainer import TrainingDiverged

__all__ = [
    "ViewLearnConfig",
    "TrainTrace",
    "ViewLearnResult",
    "FrozenViews",
    "make_view_critics",
    "split_views",
    "train_unsupervised",
    "train_semisupervised",
    "freeze_views",
]

BatchFn = Callable[[np.random.Generator, int], np.ndarray]
LabeledBatchFn = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class ViewLearnConfig:
    mode: str = "unsupervised"  # unsupervised | semi
    total_steps: int = 1000
    batch_size: int = 128
    gen_lr: float = 2e-4
    critic_lr: float = 6e-4
    critic_steps: int = 1
    ce_weight: float = 1.0
    label_count: int = 0
    grad_clip: float = 5.0
    seed: int = 0
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.mode not in ("unsupervised", "semi"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.total_steps < 1 or self.batch_size < 2:
            raise ValueError("need total_steps >= 1 and batch_size >= 2")
        if self.critic_steps < 1:
            raise ValueError("critic_steps must be positive")
        if self.gen_lr < 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be positive (gen_lr may be 0 for probes)")
        if self.mode == "unsupervised":
            if self.label_count != 0:
                raise ValueError("unsupervised mode takes no labels")
            # the critic must outpace the generator or the estimate lags the
            # moving target and the minimax signal degrades
            if self.critic_lr <= self.gen_lr:
                raise ValueError("unsupervised mode requires critic_lr > gen_lr")
        else:
            if self.label_count <= 0:
                raise ValueError("semi mode requires label_count > 0")
        if self.ce_weight < 0:
            raise ValueError("ce_weight must be nonnegative")


@dataclass
class StepRecord:
    step: int
    i_nce_nats: float
    critic_loss: float
    gen_loss: float
    ce1: float = math.nan
    ce2: float = math.nan


class TrainTrace:
    """Per-step training log; round-trips through CSV for later inspection."""

    FIELDS = ("step", "i_nce_nats", "critic_loss", "gen_loss", "ce1", "ce2")

    def __init__(self, records: list[StepRecord] | None = None):
        self.records: list[StepRecord] = records or []

    def append(self, rec: StepRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.FIELDS)
            for r in self.records:
                w.writerow([f"{getattr(r, k):.17g}" if k != "step" else r.step for k in self.FIELDS])

    @classmethod
    def from_csv(cls, path) -> "TrainTrace":
        records = []
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            for row in reader:
                records.append(
                    StepRecord(
                        int(row["step"]),
                        *(float(row[k]) for k in cls.FIELDS[1:]),
                    )
                )
        return cls(records)


@dataclass
class ViewLearnResult:
    generator: FlowGenerator
    critic1: nn.Module
    critic2: nn.Module
    trace: TrainTrace
    protocol_id: str
    wall_time_s: float
    classifier1: nn.Module | None = None
    classifier2: nn.Module | None = None

    @property
    def final_i_nce(self) -> float:
        return self.trace.records[-1].i_nce_nats


def split_views(flowed: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Channel split of the generator output: view 1 = channel 0, view 2 = rest."""
    return flowed[:, :1], flowed[:, 1:]


class _MLPCritic(nn.Module):
    def __init__(self, in_features: int, embed: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Flatten(), nn.Linear(in_features, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, embed)
        )

    def forward(self, x):
        return self.net(x)


def make_view_critics(
    height: int, width: int, embed: int = 64, hidden: int = 128, seed: int = 0
) -> tuple[nn.Module, nn.Module, CriticConfig]:
    """Flatten-MLP critics for the 1-channel and 2-channel views, plus score config."""
    torch.manual_seed(seed)
    c1 = _MLPCritic(height * width, embed, hidden)
    c2 = _MLPCritic(2 * height * width, embed, hidden)
    score_cfg = CriticConfig(head_kind="mlp", embed_dim=embed, temperature=0.15)
    return c1, c2, score_cfg


def _check_finite(value: float, step: int, ceiling: float, trace: TrainTrace, what: str) -> None:
    if not math.isfinite(value) or value > ceiling:
        raise TrainingDiverged(
            f"step {step}: {what} = {value} breaches ceiling {ceiling:.3f}", trace=trace
        )


def _clip_grads(module: nn.Module, clip: float) -> None:
    if clip > 0:
        torch.nn.utils.clip_grad_norm_(module.parameters(), clip)


def train_unsupervised(
    generator: FlowGenerator,
    critic1: nn.Module,
    critic2: nn.Module,
    score_cfg: CriticConfig,
    batch_fn: BatchFn,
    cfg: ViewLearnConfig,
    phase_hook: Callable[[str, int], None] | None = None,
) -> ViewLearnResult:
    """Minimax view learning: critics raise the InfoNCE estimate, generator lowers it.

    Each outer step runs cfg.critic_steps critic updates on no-grad views,
    then one generator update on a fresh differentiable forward. Batches come
    from a dedicated rng stream seeded by cfg.seed, so runs replay exactly.
    """
    if cfg.mode != "unsupervised":
        raise ValueError("config mode must be 'unsupervised'")
    return _train(generator, critic1, critic2, score_cfg, batch_fn, None, cfg, phase_hook)


def train_semisupervised(
    generator: FlowGenerator,
    critic1: nn.Module,
    critic2: nn.Module,
    score_cfg: CriticConfig,
    batch_fn: BatchFn,
    labeled_fn: LabeledBatchFn,
    n_classes: int,
    cfg: ViewLearnConfig,
    phase_hook: Callable[[str, int], None] | None = None,
) -> ViewLearnResult:
    """Unsupervised objective plus label retention on a separate labeled stream.

    Per-view linear classifiers are trained jointly with the generator; their
    cross-entropy (times ce_weight) opposes the InfoNCE squeeze for label
    information specifically. The labeled stream uses its own rng, so setting
    ce_weight = 0 reproduces the unsupervised run bit for bit.
    """
    if cfg.mode != "semi":
        raise ValueError("config mode must be 'semi'")
    return _train(generator, critic1, critic2, score_cfg, batch_fn, (labeled_fn, n_classes), cfg, phase_hook)


def _train(generator, critic1, critic2, score_cfg, batch_fn, labeled, cfg, phase_hook):
    torch.manual_seed(cfg.seed)
    classifier1 = classifier2 = None
    gen_params = list(generator.parameters())
    gen_side_params = list(gen_params)
    if labeled is not None:
        labeled_fn, n_classes = labeled
        probe = torch.from_numpy(batch_fn(np.random.default_rng(cfg.seed), 2))
        h, w = probe.shape[2], probe.shape[3]
        classifier1 = nn.Linear(h * w, n_classes)
        classifier2 = nn.Linear(2 * h * w, n_classes)
        gen_side_params += list(classifier1.parameters()) + list(classifier2.parameters())

    opt_critic = torch.optim.Adam(
        list(critic1.parameters()) + list(critic2.parameters()), lr=cfg.critic_lr
    )
    opt_gen = torch.optim.Adam(gen_side_params, lr=cfg.gen_lr)
    ceiling = cfg.divergence_factor * math.log(cfg.batch_size)
    unlabeled_rng = np.random.default_rng(cfg.seed)
    labeled_rng = np.random.default_rng(cfg.seed + 7919)
    ce = nn.CrossEntropyLoss()

    trace = TrainTrace()
    t0 = time.perf_counter()
    for step in range(cfg.total_steps):
        critic_loss_val = math.nan
        for _ in range(cfg.critic_steps):
            x = torch.from_numpy(batch_fn(unlabeled_rng, cfg.batch_size))
            with torch.no_grad():
                v1, v2 = split_views(generator(x))
            loss_c = info_nce_loss(critic1(v1), critic2(v2), score_cfg)
            critic_loss_val = float(loss_c.detach())
            _check_finite(critic_loss_val, step, ceiling, trace, "critic loss")
            opt_critic.zero_grad()
            loss_c.backward()
            opt_critic.step()
            if phase_hook is not None:
                phase_hook("critic", step)

        # generator phase: fresh batch, fresh forward, critics held fixed
        x = torch.from_numpy(batch_fn(unlabeled_rng, cfg.batch_size))
        v1, v2 = split_views(generator(x))
        nce = info_nce_loss(critic1(v1), critic2(v2), score_cfg)
        gen_loss = -nce
        ce1_val = ce2_val = math.nan
        if labeled is not None:
            xl, yl = labeled_fn(labeled_rng, cfg.batch_size)
            xl_t = torch.from_numpy(xl)
            yl_t = torch.from_numpy(np.asarray(yl, dtype=np.int64))
            v1l, v2l = split_views(generator(xl_t))
            ce1 = ce(classifier1(v1l.flatten(1)), yl_t)
            ce2 = ce(classifier2(v2l.flatten(1)), yl_t)
            ce1_val, ce2_val = float(ce1.detach()), float(ce2.detach())
            _check_finite(ce1_val, step, ceiling, trace, "view-1 classifier loss")
            _check_finite(ce2_val, step, ceiling, trace, "view-2 classifier loss")
            gen_loss = gen_loss + cfg.ce_weight * (ce1 + ce2)
        gen_loss_val = float(gen_loss.detach())
        if not math.isfinite(gen_loss_val):
            raise TrainingDiverged(f"step {step}: generator loss is not finite", trace=trace)
        opt_gen.zero_grad()
        gen_loss.backward()
        _clip_grads(generator, cfg.grad_clip)
        opt_gen.step()
        if phase_hook is not None:
            phase_hook("generator", step)

        trace.append(
            StepRecord(
                step,
                math.log(cfg.batch_size) - critic_loss_val,
                critic_loss_val,
                gen_loss_val,
                ce1_val,
                ce2_val,
            )
        )

    protocol_id = make_protocol_id(
        op="train_views",
        mode=cfg.mode,
        steps=cfg.total_steps,
        batch=cfg.batch_size,
        gen_lr=cfg.gen_lr,
        critic_lr=cfg.critic_lr,
        critic_steps=cfg.critic_steps,
        ce_weight=cfg.ce_weight,
        temperature=score_cfg.temperature,
    )
    return ViewLearnResult(
        generator, critic1, critic2, trace, protocol_id,
        time.perf_counter() - t0, classifier1, classifier2,
    )


class FrozenViews:
    """Deterministic view transform wrapping a trained generator (eval, no grad)."""

    def __init__(self, generator: FlowGenerator):
        self.generator = generator
        self.generator.eval()
        for p in self.generator.parameters():
            p.requires_grad_(False)

    def __call__(self, x: np.ndarray | torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        t = torch.as_tensor(np.asarray(x, dtype=np.float32))
        squeeze = t.dim() == 3
        if squeeze:
            t = t.unsqueeze(0)
        with torch.no_grad():
            v1, v2 = split_views(self.generator(t))
        v1n, v2n = v1.numpy(), v2.numpy()
        return (v1n[0], v2n[0]) if squeeze else (v1n, v2n)


def freeze_views(generator: FlowGenerator) -> FrozenViews:
    return FrozenViews(generator)
