"""Sweep orchestration, curve-shape verdicts, theory checks, and report emission.

A sweep runs one experiment per (param value, seed) under a frozen protocol
and collects SweepRecords. detect_curve classifies the seed-averaged curve
(the reverse-U test for sweet spots). emit_report turns records into a
deterministic CSV, per-sweep verdicts, and plots. Grid points run serially:
the target box has one core and serial order keeps reruns bit-reproducible.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .mi_core import (
    independent_bits_world,
    random_joint_table,
    verify_mi_identities,
    verify_optimal_views,
)

__all__ = [
    "SweepRecord",
    "PointResult",
    "CurveVerdict",
    "run_sweep",
    "curve_series",
    "detect_curve",
    "verify_theory",
    "emit_report",
    "read_records",
    "strip_timing",
]

CSV_HEADER = "sweep_id,param_name,param_value,i_nce_nats,metric_name,metric_value,seed,protocol_id,wall_time_s"


@dataclass
class PointResult:
    """What one grid point's experiment hands back to the sweep driver."""

    i_nce_nats: float
    metrics: dict[str, float]
    protocol_id: str


@dataclass
class SweepRecord:
    sweep_id: str
    param_name: str
    param_value: float
    i_nce_nats: float
    metrics: dict[str, float]
    seed: int
    protocol_id: str
    wall_time_s: float
    error: str | None = None


def run_sweep(
    sweep_id: str,
    param_name: str,
    values: Sequence[float],
    seeds: Sequence[int],
    run_point: Callable[[float, int], PointResult],
    progress: Callable[[str], None] | None = None,
) -> list[SweepRecord]:
    """Run the grid serially; a point that raises becomes a failed record.

    Protocol immutability is enforced: all successful points must report the
    same protocol_id or the sweep aborts. Failed records carry empty metrics
    (and are therefore omitted from CSV emission, with a warning count).
    """
    pairs = [(v, s) for v in values for s in seeds]
    if len({(float(v), int(s)) for v, s in pairs}) != len(pairs):
        raise ValueError("duplicate (param_value, seed) grid points")
    records: list[SweepRecord] = []
    protocol: str | None = None
    for value, seed in pairs:
        t0 = time.perf_counter()
        try:
            out = run_point(value, seed)
        except Exception as exc:  # divergence or any point failure: record, continue
            records.append(
                SweepRecord(
                    sweep_id, param_name, float(value), math.nan, {}, int(seed),
                    protocol or "", time.perf_counter() - t0, error=repr(exc),
                )
            )
            if progress is not None:
                progress(f"{sweep_id} {param_name}={value} seed={seed}: FAILED {exc!r}")
            continue
        if protocol is None:
            protocol = out.protocol_id
        elif out.protocol_id != protocol:
            raise ValueError(
                f"protocol changed mid-sweep: {protocol} -> {out.protocol_id} "
                f"at {param_name}={value}, seed={seed}"
            )
        records.append(
            SweepRecord(
                sweep_id, param_name, float(value), float(out.i_nce_nats),
                dict(out.metrics), int(seed), protocol, time.perf_counter() - t0,
            )
        )
        if progress is not None:
            progress(
                f"{sweep_id} {param_name}={value} seed={seed}: "
                f"i_nce={out.i_nce_nats:.4f} {out.metrics} ({records[-1].wall_time_s:.1f}s)"
            )
    # failures observed before the first success inherit the sweep protocol
    if protocol:
        for i, r in enumerate(records):
            if r.error is not None and not r.protocol_id:
                records[i] = replace(r, protocol_id=protocol)
    return records


# ---------------------------------------------------------------------------
# curve classification


@dataclass(frozen=True)
class CurveVerdict:
    shape: str  # reverse_u | monotone_increasing | monotone_decreasing | flat | irregular
    argmax_param: float
    notes: str


def curve_series(
    records: Iterable[SweepRecord], metric: str | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Seed-averaged (param, value) series; metric=None selects i_nce_nats."""
    buckets: dict[float, list[float]] = {}
    for r in records:
        if r.error is not None:
            continue
        v = r.i_nce_nats if metric is None else r.metrics.get(metric)
        if v is None or not math.isfinite(v):
            continue
        buckets.setdefault(r.param_value, []).append(v)
    params = np.array(sorted(buckets))
    means = np.array([float(np.mean(buckets[p])) for p in params])
    return params, means


def detect_curve(params, values, margin: float = 1.0) -> CurveVerdict:
    """Classify a seed-mean curve ordered by param value.

    reverse_u iff some interior point exceeds BOTH endpoints by >= margin;
    flat iff the whole curve fits inside one margin; strict monotone runs get
    the monotone verdicts; anything else is irregular. Input order and
    duplicated params are immaterial: duplicates are averaged first.
    """
    params = np.asarray(params, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if params.shape != values.shape or params.ndim != 1:
        raise ValueError("params and values must be matched 1-D arrays")
    uniq = np.unique(params)
    if len(uniq) < 3:
        raise ValueError(f"need at least 3 distinct param values, got {len(uniq)}")
    means = np.array([values[params == p].mean() for p in uniq])

    arg = float(uniq[int(np.argmax(means))])
    spread = float(means.max() - means.min())
    if spread <= margin:
        return CurveVerdict("flat", arg, f"spread {spread:.4g} within margin {margin:g}")
    interior = means[1:-1].max()
    lead = min(interior - means[0], interior - means[-1])
    if lead >= margin:
        return CurveVerdict(
            "reverse_u", arg,
            f"interior max {interior:.4g} exceeds endpoints by >= {lead:.4g}",
        )
    d = np.diff(means)
    if np.all(d > 0):
        return CurveVerdict("monotone_increasing", arg, f"rise {spread:.4g}")
    if np.all(d < 0):
        return CurveVerdict("monotone_decreasing", float(uniq[0]), f"fall {spread:.4g}")
    return CurveVerdict("irregular", arg, f"interior lead {lead:.4g} under margin {margin:g}")


# ---------------------------------------------------------------------------
# theory verification


def verify_theory(n_tables: int = 1000, seed: int = 0, tol: float = 1e-10) -> dict:
    """Exhaustive MI-identity checks on random tables plus the 3-bit-world optimum."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_tables):
        dims = tuple(int(d) for d in rng.integers(2, 5, size=3))
        # every third table gets hard zeros to exercise the 0*log 0 convention
        t = random_joint_table(rng, dims, zero_fraction=0.35 if i % 3 == 0 else 0.0)
        worst = max(worst, verify_mi_identities(t)["max_residual"])
    identities = {
        "tables": n_tables,
        "max_residual": worst,
        "pass": bool(math.isfinite(worst) and worst < tol),
    }

    world = independent_bits_world()
    views = verify_optimal_views(world, label_axis=0)
    optimal = {
        "v1_axes": list(views.v1_axes),
        "v2_axes": list(views.v2_axes),
        "mi_nats": views.mi,
        "mi_given_label": views.mi_given_label,
        "label_mi": views.label_mi,
        "unique": views.unique,
        "pass": bool(
            views.unique
            and views.v1_axes == (0,)
            and views.v2_axes == (0,)
            and abs(views.mi - math.log(2)) < 1e-9
            and views.mi_given_label < 1e-9
        ),
    }
    return {
        "identities": identities,
        "optimal_views": optimal,
        "pass": bool(identities["pass"] and optimal["pass"]),
    }


# ---------------------------------------------------------------------------
# report emission


def _g17(x: float) -> str:
    return f"{float(x):.17g}"


def strip_timing(records: Iterable[SweepRecord]) -> list[SweepRecord]:
    """Replace measured wall times with nan.

    Reproducible artifacts cannot contain timing jitter; the CLI strips it
    before emission and reports real timings in the log instead.
    """
    return [replace(r, wall_time_s=math.nan) for r in records]


def emit_report(records: Sequence[SweepRecord], out_dir) -> dict:
    """Write records.csv, verdicts.json, and one plot per sweep; return a summary.

    The CSV is a pure function of the records: rows sorted by (sweep_id,
    param_value, seed, metric_name), floats at 17 significant digits, one row
    per metric entry. Records with an empty metric map contribute no rows and
    are counted as omitted.
    """
    if not records:
        raise ValueError("records must be nonempty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows: list[tuple] = []
    omitted = 0
    for r in records:
        if not r.metrics:
            omitted += 1
            continue
        for name in sorted(r.metrics):
            rows.append(
                (r.sweep_id, r.param_name, r.param_value, r.i_nce_nats,
                 name, r.metrics[name], r.seed, r.protocol_id, r.wall_time_s)
            )
    rows.sort(key=lambda t: (t[0], t[2], t[6], t[4]))
    lines = [CSV_HEADER]
    for sweep_id, pname, pval, ince, mname, mval, seed, proto, wall in rows:
        lines.append(
            f"{sweep_id},{pname},{_g17(pval)},{_g17(ince)},{mname},{_g17(mval)},"
            f"{seed},{proto},{_g17(wall)}"
        )
    (out / "records.csv").write_text("\n".join(lines) + "\n")

    # verdicts: one per sweep per series with enough grid support
    by_sweep: dict[str, list[SweepRecord]] = {}
    for r in records:
        by_sweep.setdefault(r.sweep_id, []).append(r)
    verdicts: dict[str, dict] = {}
    for sweep_id in sorted(by_sweep):
        sub = by_sweep[sweep_id]
        metric_names = sorted({m for r in sub for m in r.metrics})
        verdicts[sweep_id] = {}
        for series in ["i_nce_nats"] + metric_names:
            params, means = curve_series(sub, None if series == "i_nce_nats" else series)
            if len(params) < 3:
                continue
            v = detect_curve(params, means)
            verdicts[sweep_id][series] = {
                "shape": v.shape, "argmax_param": v.argmax_param, "notes": v.notes,
            }
    (out / "verdicts.json").write_text(json.dumps(verdicts, indent=1, sort_keys=True) + "\n")

    plots = [_plot_sweep(by_sweep[s], out / f"{s}.png") for s in sorted(by_sweep)]
    return {
        "csv_rows": len(rows),
        "omitted_records": omitted,
        "plots": [str(p) for p in plots],
        "sweeps": sorted(by_sweep),
    }


def _plot_sweep(records: list[SweepRecord], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metric_names = sorted({m for r in records for m in r.metrics})
    series = ["i_nce_nats"] + metric_names
    fig, axes = plt.subplots(1, len(series), figsize=(4.5 * len(series), 3.4), squeeze=False)
    for ax, name in zip(axes[0], series):
        ok = [r for r in records if r.error is None]
        xs = [r.param_value for r in ok]
        ys = [r.i_nce_nats if name == "i_nce_nats" else r.metrics.get(name, math.nan) for r in ok]
        ax.scatter(xs, ys, s=14, alpha=0.55, label="seeds")
        params, means = curve_series(records, None if name == "i_nce_nats" else name)
        if len(params):
            ax.plot(params, means, "-o", color="crimson", ms=4, label="seed mean")
        ax.set_xlabel(records[0].param_name)
        ax.set_ylabel(name)
        ax.legend(fontsize=8)
    fig.suptitle(records[0].sweep_id)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def read_records(csv_path) -> list[SweepRecord]:
    """Rebuild records from records.csv (rows regroup by sweep/param/seed)."""
    text = Path(csv_path).read_text().splitlines()
    if not text or text[0] != CSV_HEADER:
        raise ValueError(f"{csv_path}: unexpected header")
    grouped: dict[tuple, SweepRecord] = {}
    for line in text[1:]:
        if not line:
            continue
        sweep_id, pname, pval, ince, mname, mval, seed, proto, wall = line.split(",")
        key = (sweep_id, pval, seed)
        if key not in grouped:
            grouped[key] = SweepRecord(
                sweep_id, pname, float(pval), float(ince), {}, int(seed), proto, float(wall)
            )
        grouped[key].metrics[mname] = float(mval)
    return list(grouped.values())
