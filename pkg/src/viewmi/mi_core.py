"""Exact mutual information on discrete joint tables and InfoNCE estimation.

Two routes to the same quantities live here on purpose: closed-form MI on
small probability tables (the oracle route) and the InfoNCE lower bound
computed from critic scores (the estimation route). Keeping both in one
module makes the cross-checks in the test suite and the theory-verification
harness cheap to express.

All information quantities are in nats.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "JointTable",
    "CriticConfig",
    "MIEstimate",
    "OptimalViewsReport",
    "critic_score",
    "score_matrix",
    "info_nce_loss",
    "i_nce_estimate",
    "exact_mi",
    "exact_conditional_mi",
    "exact_entropy",
    "verify_mi_identities",
    "verify_optimal_views",
    "random_joint_table",
    "independent_bits_world",
    "noisy_channel_table",
    "estimate_table_mi_nce",
    "make_protocol_id",
]

_PROB_TOL = 1e-12


# ---------------------------------------------------------------------------
# joint probability tables


@dataclass(frozen=True)
class JointTable:
    """Joint distribution over up to four discrete axes.

    probs is a dense float64 array, one axis per variable, entries
    nonnegative and summing to one within 1e-12.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim < 1 or p.ndim > 4:
            raise ValueError(f"joint table must have 1..4 axes, got {p.ndim}")
        if any(d < 1 for d in p.shape):
            raise ValueError(f"axis sizes must be >= 1, got shape {p.shape}")
        if np.any(p < 0):
            raise ValueError("joint table entries must be nonnegative")
        total = float(p.sum())
        if abs(total - 1.0) > _PROB_TOL:
            raise ValueError(f"joint table must sum to 1 within {_PROB_TOL}, got {total!r}")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.probs.shape)

    @property
    def n_axes(self) -> int:
        return self.probs.ndim

    def marginal(self, axes: tuple[int, ...]) -> np.ndarray:
        """Marginal over the given (disjoint) axes, in the given order."""
        axes = _check_axes(self, axes, "axes")
        drop = tuple(a for a in range(self.n_axes) if a not in axes)
        m = self.probs.sum(axis=drop) if drop else self.probs
        kept = [a for a in range(self.n_axes) if a in axes]
        order = [kept.index(a) for a in axes]
        return np.transpose(m, order) if order != list(range(len(axes))) else m

    def to_json(self) -> str:
        return json.dumps(
            {"dims": list(self.dims), "probs": self.probs.reshape(-1).tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "JointTable":
        obj = json.loads(text)
        dims = tuple(int(d) for d in obj["dims"])
        flat = np.asarray(obj["probs"], dtype=np.float64)
        if flat.size != int(np.prod(dims)):
            raise ValueError(
                f"flat probability list has {flat.size} entries, dims {dims} need {int(np.prod(dims))}"
            )
        return cls(flat.reshape(dims))


def _check_axes(t: JointTable, axes, name: str) -> tuple[int, ...]:
    axes = tuple(int(a) for a in axes)
    if not axes:
        raise ValueError(f"{name} must be nonempty")
    if len(set(axes)) != len(axes):
        raise ValueError(f"{name} contains repeated axes: {axes}")
    for a in axes:
        if not 0 <= a < t.n_axes:
            raise ValueError(f"{name} axis {a} out of range for {t.n_axes}-axis table")
    return axes


def _xlogx(p: np.ndarray) -> np.ndarray:
    # 0 * log 0 = 0 by convention; mask keeps log off the zero cells entirely.
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log(p[nz])
    return out


def _grouped_joint(t: JointTable, groups: list[tuple[int, ...]]) -> np.ndarray:
    """Dense joint over tuple-valued variables x_G for each axis group G.

    Groups may overlap (a view can contain the label axis and still be
    compared against it), which a plain marginalization cannot express, so
    this accumulates cell mass by the per-group value index.
    """
    dims = t.dims
    sizes = [int(np.prod([dims[a] for a in g])) for g in groups]
    out = np.zeros(sizes, dtype=np.float64)
    flat = out.reshape(-1)
    strides = []
    for g in groups:
        s = []
        acc = 1
        for a in reversed(g):
            s.append(acc)
            acc *= dims[a]
        strides.append(list(reversed(s)))
    idx_grids = np.indices(dims).reshape(t.n_axes, -1)
    codes = np.zeros(idx_grids.shape[1], dtype=np.int64)
    mult = 1
    for gi in reversed(range(len(groups))):
        g, st = groups[gi], strides[gi]
        local = np.zeros(idx_grids.shape[1], dtype=np.int64)
        for a, stride in zip(g, st):
            local += idx_grids[a] * stride
        codes += local * mult
        mult *= sizes[gi]
    np.add.at(flat, codes, t.probs.reshape(-1))
    return out


def _pair_mi(joint2: np.ndarray) -> float:
    """MI of a 2-axis joint array (rows = first variable)."""
    pa = joint2.sum(axis=1, keepdims=True)
    pb = joint2.sum(axis=0, keepdims=True)
    nz = joint2 > 0
    ratio = np.ones_like(joint2)
    ratio[nz] = joint2[nz] / (pa @ pb)[nz]
    return float(np.sum(joint2[nz] * np.log(ratio[nz])))


def _group_mi(t: JointTable, ga: tuple[int, ...], gb: tuple[int, ...]) -> float:
    return _pair_mi(_grouped_joint(t, [ga, gb]))


def _group_cmi(
    t: JointTable, ga: tuple[int, ...], gb: tuple[int, ...], gc: tuple[int, ...]
) -> float:
    j3 = _grouped_joint(t, [ga, gb, gc])
    total = 0.0
    for c in range(j3.shape[2]):
        pc = float(j3[:, :, c].sum())
        if pc <= 0:
            continue
        total += pc * _pair_mi(j3[:, :, c] / pc)
    return total


def exact_mi(t: JointTable, axes_a: tuple[int, ...], axes_b: tuple[int, ...]) -> float:
    """I(x_A; x_B) in nats for disjoint axis groups A and B."""
    a = _check_axes(t, axes_a, "axes_a")
    b = _check_axes(t, axes_b, "axes_b")
    if set(a) & set(b):
        raise ValueError(f"axes_a {a} and axes_b {b} must be disjoint")
    return _group_mi(t, a, b)


def exact_conditional_mi(
    t: JointTable,
    axes_a: tuple[int, ...],
    axes_b: tuple[int, ...],
    axes_c: tuple[int, ...],
) -> float:
    """I(x_A; x_B | x_C) in nats for mutually disjoint axis groups."""
    a = _check_axes(t, axes_a, "axes_a")
    b = _check_axes(t, axes_b, "axes_b")
    c = _check_axes(t, axes_c, "axes_c")
    if set(a) & set(b) or set(a) & set(c) or set(b) & set(c):
        raise ValueError("axis groups must be mutually disjoint")
    return _group_cmi(t, a, b, c)


def exact_entropy(t: JointTable, axes: tuple[int, ...]) -> float:
    """H(x_A) in nats; axes may be any nonempty subset."""
    a = _check_axes(t, axes, "axes")
    m = _grouped_joint(t, [a]) if len(a) > 1 else t.marginal(a)
    return float(-_xlogx(m).sum())


def verify_mi_identities(t: JointTable) -> dict[str, float]:
    """Numerically check the standard MI identities on a >=3-axis table.

    Each identity is evaluated through two independent computational routes
    so a shared bug cannot cancel out:

    * nonnegativity of I and conditional I,
    * chain rule  I(x; y,z) = I(x; y) + I(x; z|y),
    * multivariate MI  I(x;y;z) = I(x;y) - I(x;y|z), with the left side
      computed from inclusion-exclusion over entropies,
    * symmetry  I(x;y) = I(y;x).

    Returns per-identity worst-case residuals over all ordered axis triples
    plus their overall max under key "max_residual".
    """
    if t.n_axes < 3:
        raise ValueError("identity verification needs at least 3 axes")
    res = {"nonneg": 0.0, "chain": 0.0, "triple": 0.0, "symmetry": 0.0}
    for x, y, z in itertools.permutations(range(t.n_axes), 3):
        gx, gy, gz = (x,), (y,), (z,)
        i_xy = exact_mi(t, gx, gy)
        i_xy_z = exact_conditional_mi(t, gx, gy, gz)
        i_xz_y = exact_conditional_mi(t, gx, gz, gy)
        i_x_yz = exact_mi(t, gx, (y, z))
        res["nonneg"] = max(res["nonneg"], -min(i_xy, i_xy_z, 0.0))
        res["chain"] = max(res["chain"], abs(i_x_yz - i_xy - i_xz_y))
        # inclusion-exclusion route for the 3-way interaction
        h = exact_entropy
        i3_entropies = (
            h(t, gx) + h(t, gy) + h(t, gz)
            - h(t, (x, y)) - h(t, (x, z)) - h(t, (y, z))
            + h(t, (x, y, z))
        )
        res["triple"] = max(res["triple"], abs(i3_entropies - (i_xy - i_xy_z)))
        res["symmetry"] = max(res["symmetry"], abs(i_xy - exact_mi(t, gy, gx)))
    res["max_residual"] = max(res.values())
    return res


def random_joint_table(
    rng: np.random.Generator,
    dims: tuple[int, ...],
    zero_fraction: float = 0.2,
) -> JointTable:
    """Random table with a controllable fraction of structural zeros."""
    p = rng.gamma(shape=1.0, scale=1.0, size=dims)
    if zero_fraction > 0:
        mask = rng.random(dims) < zero_fraction
        # never zero out everything
        if mask.all():
            mask.reshape(-1)[rng.integers(0, p.size)] = False
        p = np.where(mask, 0.0, p)
    p /= p.sum()
    return JointTable(p)


# ---------------------------------------------------------------------------
# optimal views over coordinate subsets


def independent_bits_world(n_noise: int = 2) -> JointTable:
    """Uniform world of one label bit plus n_noise independent noise bits.

    Axis 0 is the label; x is the tuple of all axes.
    """
    k = 1 + n_noise
    return JointTable(np.full((2,) * k, 1.0 / 2**k))


@dataclass(frozen=True)
class OptimalViewsReport:
    v1_axes: tuple[int, ...]
    v2_axes: tuple[int, ...]
    mi: float
    mi_given_label: float
    label_mi: float
    feasible_count: int
    mi_tie_count: int
    entropy_tie_count: int
    unique: bool


def verify_optimal_views(
    world: JointTable, label_axis: int = 0, tol: float = 1e-9
) -> OptimalViewsReport:
    """Enumerate coordinate-subset view pairs and return the optimal pair.

    x is the tuple of all axes; candidate views are nonempty axis subsets.
    A pair (v1, v2) is feasible when each view keeps all label information:
    I(v1; y) = I(v2; y) = I(x; y). Among feasible pairs the objective is
    min I(v1; v2); ties are broken by minimal H(v1) + H(v2), then
    lexicographic axis order, so the selection is deterministic. The label
    axis and the noise axes must be mutually independent in the supplied
    world or the enumeration premise does not hold and a ValueError is
    raised.
    """
    n = world.n_axes
    if not 0 <= label_axis < n:
        raise ValueError(f"label axis {label_axis} out of range")
    # independence premise: joint factorizes into per-axis marginals
    prod = np.ones(world.dims)
    for a in range(n):
        shape = [1] * n
        shape[a] = world.dims[a]
        prod = prod * world.marginal((a,)).reshape(shape)
    if np.max(np.abs(prod - world.probs)) > 1e-9:
        raise ValueError("world axes must be mutually independent")

    full = tuple(range(n))
    i_xy = _group_mi(world, full, (label_axis,))
    subsets = [
        tuple(s)
        for r in range(1, n + 1)
        for s in itertools.combinations(range(n), r)
    ]
    feasible: list[tuple[tuple[int, ...], tuple[int, ...], float]] = []
    for v1 in subsets:
        if abs(_group_mi(world, v1, (label_axis,)) - i_xy) > tol:
            continue
        for v2 in subsets:
            if abs(_group_mi(world, v2, (label_axis,)) - i_xy) > tol:
                continue
            feasible.append((v1, v2, _group_mi(world, v1, v2)))
    if not feasible:
        raise ValueError("no feasible view pair keeps all label information")

    best_mi = min(f[2] for f in feasible)
    mi_ties = [f for f in feasible if f[2] <= best_mi + tol]
    ent = {s: exact_entropy(world, s) for s in subsets}
    best_ent = min(ent[v1] + ent[v2] for v1, v2, _ in mi_ties)
    ent_ties = [f for f in mi_ties if ent[f[0]] + ent[f[1]] <= best_ent + tol]
    v1, v2, mi = sorted(ent_ties, key=lambda f: (f[0], f[1]))[0]
    return OptimalViewsReport(
        v1_axes=v1,
        v2_axes=v2,
        mi=mi,
        mi_given_label=_group_cmi(world, v1, v2, (label_axis,)),
        label_mi=i_xy,
        feasible_count=len(feasible),
        mi_tie_count=len(mi_ties),
        entropy_tie_count=len(ent_ties),
        unique=len(ent_ties) == 1,
    )


# ---------------------------------------------------------------------------
# InfoNCE


@dataclass(frozen=True)
class CriticConfig:
    """Scoring rule for contrastive critics.

    head_kind selects the projection placed on top of encoder outputs by the
    training code ("linear" or "mlp"); scoring itself is always normalized
    dot product over temperature when normalize is set, plain scaled dot
    otherwise.
    """

    head_kind: str = "linear"
    embed_dim: int = 64
    temperature: float = 0.07
    normalize: bool = True
    mlp_hidden: int = 128

    def __post_init__(self):
        if self.head_kind not in ("linear", "mlp"):
            raise ValueError(f"unknown head_kind {self.head_kind!r}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be positive")


def _as_2d(z, cfg: CriticConfig, name: str) -> torch.Tensor:
    t = torch.as_tensor(z, dtype=torch.get_default_dtype() if not torch.is_tensor(z) else z.dtype)
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {tuple(t.shape)}")
    if t.shape[1] != cfg.embed_dim:
        raise ValueError(
            f"{name} has embedding dim {t.shape[1]}, critic config expects {cfg.embed_dim}"
        )
    return t


def score_matrix(z1, z2, cfg: CriticConfig) -> torch.Tensor:
    """All-pairs critic scores: rows index z1 entries, columns z2 entries."""
    a = _as_2d(z1, cfg, "z1")
    b = _as_2d(z2, cfg, "z2")
    if cfg.normalize:
        a = F.normalize(a, dim=1)
        b = F.normalize(b, dim=1)
    return (a @ b.T) / cfg.temperature


def critic_score(z1, z2, cfg: CriticConfig) -> float:
    """Score a single embedding pair."""
    s = score_matrix(z1, z2, cfg)
    if s.shape != (1, 1):
        raise ValueError("critic_score takes single embeddings; use score_matrix for batches")
    return float(s[0, 0])


def info_nce_loss(z1, z2, cfg: CriticConfig) -> torch.Tensor:
    """InfoNCE loss in nats with intra-batch negatives.

    Row i of the score matrix is the anchor z1[i]; its positive is z2[i] and
    the denominator runs over all K = batch entries of z2, positive
    included. Returns a scalar tensor (differentiable when inputs are).
    """
    s = score_matrix(z1, z2, cfg)
    n = s.shape[0]
    if s.shape[1] != n:
        raise ValueError(f"need matched batches, got {n} anchors and {s.shape[1]} candidates")
    if n < 2:
        raise ValueError("InfoNCE needs batch size >= 2")
    return F.cross_entropy(s, torch.arange(n, device=s.device))


@dataclass(frozen=True)
class MIEstimate:
    """InfoNCE mutual-information lower-bound estimate: value = log K - loss."""

    value: float
    loss: float
    batch_size: int
    train_steps: int
    protocol_id: str
    below_zero: bool = field(default=False)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.loss < 0:
            raise ValueError("InfoNCE loss cannot be negative")
        bound = math.log(self.batch_size)
        if self.value > bound + 1e-12:
            raise ValueError(f"estimate {self.value} exceeds log K = {bound}")


def i_nce_estimate(
    loss: float, batch_size: int, train_steps: int = 0, protocol_id: str = ""
) -> MIEstimate:
    """Turn a terminal InfoNCE loss into an MI estimate, flagging negatives.

    Negative values are kept (they are informative about critic quality)
    and flagged rather than clamped.
    """
    loss = float(loss)
    value = math.log(batch_size) - loss
    return MIEstimate(
        value=value,
        loss=loss,
        batch_size=batch_size,
        train_steps=train_steps,
        protocol_id=protocol_id,
        below_zero=value < 0,
    )


def make_protocol_id(**kv) -> str:
    """Stable short id for an estimation protocol (critic arch, tau, steps...).

    Seeds are deliberately not part of the protocol: records that differ only
    by seed must compare under one id.
    """
    blob = json.dumps(kv, sort_keys=True, default=str)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# InfoNCE on a discrete joint table (estimation-vs-oracle route)


def noisy_channel_table(n_symbols: int = 8, stay_prob: float = 0.8) -> JointTable:
    """Uniform input, symmetric noisy channel: exact MI known in closed form."""
    if not 0 < stay_prob < 1:
        raise ValueError("stay_prob must be in (0, 1)")
    off = (1.0 - stay_prob) / (n_symbols - 1)
    p = np.full((n_symbols, n_symbols), off / n_symbols)
    np.fill_diagonal(p, stay_prob / n_symbols)
    return JointTable(p)


class _TableCritic(torch.nn.Module):
    """Per-symbol embedding tables scored with the shared critic rule."""

    def __init__(self, n_a: int, n_b: int, cfg: CriticConfig, generator: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.emb_a = torch.nn.Parameter(
            torch.randn(n_a, cfg.embed_dim, generator=generator) * 0.1
        )
        self.emb_b = torch.nn.Parameter(
            torch.randn(n_b, cfg.embed_dim, generator=generator) * 0.1
        )

    def loss(self, a_idx: torch.Tensor, b_idx: torch.Tensor) -> torch.Tensor:
        return info_nce_loss(self.emb_a[a_idx], self.emb_b[b_idx], self.cfg)


def estimate_table_mi_nce(
    table: JointTable,
    batch_size: int = 64,
    train_steps: int = 1500,
    eval_batches: int = 256,
    lr: float = 5e-3,
    cfg: CriticConfig | None = None,
    seed: int = 0,
) -> MIEstimate:
    """Train a critic on iid pairs from a 2-axis table, return the I_NCE estimate.

    The terminal loss is averaged over a held-out stream of eval batches so
    the estimate variance comes from the protocol, not from one lucky batch.
    """
    if table.n_axes != 2:
        raise ValueError("table must have exactly 2 axes")
    if cfg is None:
        cfg = CriticConfig(head_kind="linear", embed_dim=16, temperature=0.07)
    n_a, n_b = table.dims
    flat = table.probs.reshape(-1)
    gen = torch.Generator().manual_seed(seed)
    critic = _TableCritic(n_a, n_b, cfg, gen)
    opt = torch.optim.Adam(critic.parameters(), lr=lr)
    rng = np.random.default_rng(seed)

    def sample(r: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        cells = r.choice(flat.size, size=batch_size, p=flat)
        return torch.as_tensor(cells // n_b), torch.as_tensor(cells % n_b)

    for _ in range(train_steps):
        a, b = sample(rng)
        opt.zero_grad()
        loss = critic.loss(a, b)
        loss.backward()
        opt.step()

    eval_rng = np.random.default_rng(seed + 1)
    with torch.no_grad():
        terminal = float(
            np.mean([critic.loss(*sample(eval_rng)).item() for _ in range(eval_batches)])
        )
    pid = make_protocol_id(
        kind="table_nce",
        head=cfg.head_kind,
        dim=cfg.embed_dim,
        tau=cfg.temperature,
        steps=train_steps,
        batch=batch_size,
        lr=lr,
        eval_batches=eval_batches,
    )
    return i_nce_estimate(terminal, batch_size, train_steps, pid)
