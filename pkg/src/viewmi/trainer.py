"""Encoders, contrastive pretraining, and frozen-feature probes.

The pretrainer pulls matched view batches from a pair source, pushes them
through per-view encoders and projection heads, and minimizes the symmetric
InfoNCE loss with SGD + cosine decay. Downstream quality is read out by
linear probes over frozen embeddings; the encoder is checksummed around the
embedding pass so accidental finetuning cannot go unnoticed.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Protocol

import numpy as np
import torch
from torch import nn

from .mi_core import CriticConfig, MIEstimate, info_nce_loss, make_protocol_id

__all__ = [
    "TrainingDiverged",
    "EncoderSpec",
    "build_encoder",
    "build_head",
    "default_critic",
    "PretrainConfig",
    "PretrainResult",
    "ArrayPairSource",
    "CallablePairSource",
    "contrastive_pretrain",
    "embed_images",
    "encoder_checksum",
    "ProbeResult",
    "linear_probe",
    "probe_encoder",
    "supervised_baseline",
    "save_encoder",
    "load_encoder",
]


class TrainingDiverged(RuntimeError):
    """Loss went non-finite or blew past the divergence ceiling."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# encoders and heads


@dataclass(frozen=True)
class EncoderSpec:
    in_channels: int
    conv_channels: tuple[int, ...] = (8, 16, 32, 64)
    embed_dim: int = 64
    aggregator: str = "none"  # none | lstm
    pool_grid: int = 1  # >1 keeps a coarse spatial grid instead of one global cell

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if not self.conv_channels:
            raise ValueError("need at least one conv layer")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        if self.aggregator not in ("none", "lstm"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.pool_grid < 1:
            raise ValueError("pool_grid must be positive")


class ConvEncoder(nn.Module):
    """Stride-2 conv/BN stack -> average pool -> linear embedding.

    The batch norms are load-bearing: natural-image views share almost all
    of their pixel energy, so without them the pooled features start nearly
    identical across a batch and the normalized contrastive loss sits at its
    uniform-scores saddle (gradient ~ 0) forever. pool_grid=1 averages the
    whole map (translation-invariant features); a coarser grid keeps enough
    spatial layout for the embedding to carry object position.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        layers = []
        prev = spec.in_channels
        for ch in spec.conv_channels:
            layers += [
                nn.Conv2d(prev, ch, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
            ]
            prev = ch
        self.conv = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(spec.pool_grid)
        self.fc = nn.Linear(prev * spec.pool_grid**2, spec.embed_dim)
        self.spec = spec

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise ValueError(f"expected (B, C, H, W), got {tuple(x.shape)}")
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} channels, got {x.shape[1]}")
        h = self.pool(self.conv(x)).flatten(1)
        return self.fc(h)


class SequenceEncoder(nn.Module):
    """Per-frame ConvEncoder, then an LSTM over time; last output is the embedding."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.frame_encoder = ConvEncoder(spec)
        self.lstm = nn.LSTM(spec.embed_dim, spec.embed_dim, batch_first=True)
        self.spec = spec

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5:
            raise ValueError(f"expected (B, T, C, H, W), got {tuple(x.shape)}")
        b, t = x.shape[:2]
        frames = self.frame_encoder(x.reshape(b * t, *x.shape[2:]))
        out, _ = self.lstm(frames.reshape(b, t, -1))
        return out[:, -1]


def build_encoder(spec: EncoderSpec, seed: int | None = None) -> nn.Module:
    if seed is not None:
        torch.manual_seed(seed)
    return SequenceEncoder(spec) if spec.aggregator == "lstm" else ConvEncoder(spec)


def build_head(kind: str, in_dim: int, out_dim: int, hidden: int = 128) -> nn.Module:
    if kind == "linear":
        return nn.Linear(in_dim, out_dim)
    if kind == "mlp":
        return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))
    raise ValueError(f"unknown head kind {kind!r}")


def default_critic(head_kind: str = "linear", embed_dim: int = 64) -> CriticConfig:
    """Standard critic settings: temperature 0.07 for linear heads, 0.15 for mlp."""
    temp = 0.07 if head_kind == "linear" else 0.15
    return CriticConfig(head_kind=head_kind, embed_dim=embed_dim, temperature=temp)


# ---------------------------------------------------------------------------
# pair sources


class PairSource(Protocol):
    def batches(
        self, rng: np.random.Generator, batch_size: int
    ) -> Iterator[tuple[torch.Tensor, torch.Tensor]]: ...

    def steps_per_epoch(self, batch_size: int) -> int: ...


class ArrayPairSource:
    """Matched (v1, v2) arrays; each epoch reshuffles, partial tail batch dropped.

    transform runs on each batch before the torch conversion (e.g. uint8
    storage to float32 in [0, 1]) so big pools can stay byte-sized in RAM.
    """

    def __init__(
        self,
        v1: np.ndarray,
        v2: np.ndarray,
        transform: Callable[[np.ndarray], np.ndarray] | None = None,
    ):
        if len(v1) != len(v2):
            raise ValueError("v1/v2 sample counts differ")
        if len(v1) < 2:
            raise ValueError("need at least 2 pairs")
        self.v1 = v1
        self.v2 = v2
        self.transform = transform

    def __len__(self) -> int:
        return len(self.v1)

    def steps_per_epoch(self, batch_size: int) -> int:
        return len(self.v1) // batch_size

    def batches(self, rng, batch_size):
        order = rng.permutation(len(self.v1))
        t = self.transform or (lambda a: a)
        for s in range(self.steps_per_epoch(batch_size)):
            idx = order[s * batch_size : (s + 1) * batch_size]
            yield torch.from_numpy(t(self.v1[idx])), torch.from_numpy(t(self.v2[idx]))


class CallablePairSource:
    """Pairs synthesized on demand: fn(rng, batch_size) -> (v1, v2) arrays."""

    def __init__(self, fn: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]], steps: int):
        if steps < 1:
            raise ValueError("steps must be positive")
        self.fn = fn
        self.steps = steps

    def steps_per_epoch(self, batch_size: int) -> int:
        return self.steps

    def batches(self, rng, batch_size):
        for _ in range(self.steps):
            v1, v2 = self.fn(rng, batch_size)
            yield torch.from_numpy(v1), torch.from_numpy(v2)


# ---------------------------------------------------------------------------
# contrastive pretraining


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 128
    epochs: int = 50
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("epochs and lr must be positive")


@dataclass
class PretrainResult:
    encoder1: nn.Module
    encoder2: nn.Module
    head1: nn.Module
    head2: nn.Module
    estimate: MIEstimate
    epoch_losses: list[float]
    step_losses: list[float]
    protocol_id: str
    wall_time_s: float

    @property
    def terminal_loss(self) -> float:
        return self.step_losses[-1]


def _unique_params(*modules: nn.Module):
    seen: dict[int, nn.Parameter] = {}
    for m in modules:
        for p in m.parameters():
            seen.setdefault(id(p), p)
    return list(seen.values())


def contrastive_pretrain(
    encoder1: nn.Module,
    encoder2: nn.Module,
    source: PairSource,
    cfg: PretrainConfig,
    critic: CriticConfig | None = None,
    head_in_dims: tuple[int, int] | None = None,
    step_hook: Callable[[int, float], None] | None = None,
) -> PretrainResult:
    """Train both encoders (plus fresh projection heads) with symmetric InfoNCE.

    The reported estimate comes from a full no-grad pass over one evaluation
    epoch using the v1-anchored loss, so value <= log(batch_size) holds by
    construction. Determinism: (cfg.seed, source content) fixes every batch,
    init, and update; reruns match bit-for-bit on CPU.
    """
    critic = critic or default_critic()
    torch.manual_seed(cfg.seed)
    in1 = head_in_dims[0] if head_in_dims else encoder1.spec.embed_dim
    in2 = head_in_dims[1] if head_in_dims else encoder2.spec.embed_dim
    head1 = build_head(critic.head_kind, in1, critic.embed_dim, critic.mlp_hidden)
    head2 = build_head(critic.head_kind, in2, critic.embed_dim, critic.mlp_hidden)

    params = _unique_params(encoder1, encoder2, head1, head2)
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    total_steps = max(1, cfg.epochs * source.steps_per_epoch(cfg.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps, eta_min=0.0)
    ceiling = cfg.divergence_factor * math.log(cfg.batch_size)

    rng = np.random.default_rng(cfg.seed)
    step_losses: list[float] = []
    epoch_losses: list[float] = []
    t0 = time.perf_counter()
    step = 0
    for _ in range(cfg.epochs):
        epoch_sum, epoch_n = 0.0, 0
        for v1, v2 in source.batches(rng, cfg.batch_size):
            h1 = head1(encoder1(v1))
            h2 = head2(encoder2(v2))
            loss = 0.5 * (info_nce_loss(h1, h2, critic) + info_nce_loss(h2, h1, critic))
            val = float(loss.detach())
            if not math.isfinite(val) or val > ceiling:
                raise TrainingDiverged(
                    f"step {step}: loss {val} exceeds ceiling {ceiling:.3f}", trace=step_losses
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step_losses.append(val)
            epoch_sum += val
            epoch_n += 1
            if step_hook is not None:
                step_hook(step, val)
            step += 1
        epoch_losses.append(epoch_sum / max(epoch_n, 1))

    # evaluation pass: fixed stream, v1-anchored loss only, eval-mode modules
    # (batch-norm running stats must not shift while we measure)
    eval_rng = np.random.default_rng(cfg.seed + 1)
    total, count = 0.0, 0
    modules = (encoder1, encoder2, head1, head2)
    for m in modules:
        m.eval()
    with torch.no_grad():
        for v1, v2 in source.batches(eval_rng, cfg.batch_size):
            total += float(info_nce_loss(head1(encoder1(v1)), head2(encoder2(v2)), critic))
            count += 1
    for m in modules:
        m.train()
    mean_loss = total / max(count, 1)
    protocol_id = make_protocol_id(
        op="contrastive_pretrain",
        batch=cfg.batch_size,
        epochs=cfg.epochs,
        lr=cfg.lr,
        momentum=cfg.momentum,
        head=critic.head_kind,
        temperature=critic.temperature,
        embed=critic.embed_dim,
    )
    estimate = MIEstimate(
        value=math.log(cfg.batch_size) - mean_loss,
        loss=mean_loss,
        batch_size=cfg.batch_size,
        train_steps=step,
        protocol_id=protocol_id,
        below_zero=mean_loss > math.log(cfg.batch_size),
    )
    return PretrainResult(
        encoder1, encoder2, head1, head2, estimate, epoch_losses, step_losses,
        protocol_id, time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# probes


def encoder_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def embed_images(encoder: nn.Module, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Frozen forward pass; raises if the encoder's parameters move."""
    before = encoder_checksum(encoder)
    outs = []
    encoder.eval()
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            outs.append(encoder(torch.from_numpy(x[s : s + batch_size])).numpy())
    encoder.train()
    if encoder_checksum(encoder) != before:
        raise RuntimeError("encoder parameters changed during embedding")
    return np.concatenate(outs) if outs else np.empty((0,))


@dataclass
class ProbeResult:
    task: str
    metric_name: str
    metric_value: float
    n_train: int
    n_test: int


def linear_probe(
    z_train: np.ndarray,
    y_train: np.ndarray,
    z_test: np.ndarray,
    y_test: np.ndarray,
    task: str = "classification",
    canvas: int = 64,
    epochs: int = 100,
    lr: float = 0.1,
    batch_size: int = 256,
    seed: int = 0,
) -> ProbeResult:
    """Linear head on frozen features: SGD over shuffled batches, 100 epochs.

    classification: cross-entropy, metric = test accuracy in [0, 1].
    localization: L2 regression on canvas-normalized (x, y), metric = mean
    Euclidean test error in pixels.
    """
    if task not in ("classification", "localization"):
        raise ValueError(f"unknown probe task {task!r}")
    torch.manual_seed(seed)
    zt = torch.from_numpy(np.asarray(z_train, dtype=np.float32))
    ze = torch.from_numpy(np.asarray(z_test, dtype=np.float32))
    if task == "classification":
        classes = np.unique(y_train)
        if len(classes) < 2:
            raise ValueError("probe labels contain a single class")
        head = nn.Linear(zt.shape[1], int(y_train.max()) + 1)
        yt = torch.from_numpy(np.asarray(y_train, dtype=np.int64))
        loss_fn = nn.CrossEntropyLoss()
    else:
        # standardize features for the regression: squared error explodes under
        # this lr when trained-encoder activations run large, unlike the
        # bounded cross-entropy gradients on the classification branch
        mu, sd = zt.mean(0, keepdim=True), zt.std(0, keepdim=True).clamp_min(1e-6)
        zt = (zt - mu) / sd
        ze = (ze - mu) / sd
        head = nn.Linear(zt.shape[1], 2)
        yt = torch.from_numpy(np.asarray(y_train, dtype=np.float32) / canvas)
        loss_fn = nn.MSELoss()

    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=0.9)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(zt))
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            opt.zero_grad()
            loss = loss_fn(head(zt[idx]), yt[idx])
            loss.backward()
            opt.step()

    with torch.no_grad():
        pred = head(ze)
    if task == "classification":
        acc = float((pred.argmax(1).numpy() == np.asarray(y_test)).mean())
        return ProbeResult(task, "accuracy", acc, len(zt), len(ze))
    err = np.linalg.norm(pred.numpy() * canvas - np.asarray(y_test, dtype=np.float64), axis=1)
    return ProbeResult(task, "pixel_error", float(err.mean()), len(zt), len(ze))


def probe_encoder(
    encoder: nn.Module,
    train: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    task: str = "classification",
    **probe_kw,
) -> ProbeResult:
    """Embed with the frozen encoder, then fit the linear probe."""
    z_train = embed_images(encoder, train[0])
    z_test = embed_images(encoder, test[0])
    return linear_probe(z_train, train[1], z_test, test[1], task=task, **probe_kw)


def save_encoder(path, encoder: nn.Module) -> None:
    """Persist an encoder (spec + weights) in the package container format."""
    from .container import save_container

    spec = encoder.spec
    header = {
        "kind": "encoder",
        "in_channels": spec.in_channels,
        "conv_channels": list(spec.conv_channels),
        "embed_dim": spec.embed_dim,
        "aggregator": spec.aggregator,
        "pool_grid": spec.pool_grid,
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in encoder.state_dict().items()}
    save_container(path, header, arrays)


def load_encoder(path) -> nn.Module:
    from .container import load_container

    header, arrays = load_container(path)
    if header.get("kind") != "encoder":
        raise ValueError(f"{path}: container kind {header.get('kind')!r} is not an encoder")
    spec = EncoderSpec(
        in_channels=header["in_channels"],
        conv_channels=tuple(header["conv_channels"]),
        embed_dim=header["embed_dim"],
        aggregator=header["aggregator"],
        pool_grid=header.get("pool_grid", 1),
    )
    enc = build_encoder(spec)
    enc.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return enc


def supervised_baseline(
    spec: EncoderSpec,
    train: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    n_classes: int,
    epochs: int = 30,
    batch_size: int = 128,
    lr: float = 0.03,
    seed: int = 0,
) -> float:
    """End-to-end supervised reference: encoder + linear head, CE, test accuracy."""
    torch.manual_seed(seed)
    encoder = build_encoder(spec)
    head = nn.Linear(spec.embed_dim, n_classes)
    opt = torch.optim.SGD(
        _unique_params(encoder, head), lr=lr, momentum=0.9,
    )
    steps = max(1, epochs * (len(train[0]) // batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=0.0)
    x, y = train
    yt = torch.from_numpy(np.asarray(y, dtype=np.int64))
    rng = np.random.default_rng(seed)
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(order) - batch_size + 1, batch_size):
            idx = order[s : s + batch_size]
            opt.zero_grad()
            loss = loss_fn(head(encoder(torch.from_numpy(x[idx]))), yt[idx])
            loss.backward()
            opt.step()
            sched.step()
    encoder.eval()
    with torch.no_grad():
        preds = []
        for s in range(0, len(test[0]), 256):
            preds.append(head(encoder(torch.from_numpy(test[0][s : s + 256]))).argmax(1).numpy())
    return float((np.concatenate(preds) == np.asarray(test[1])).mean())
