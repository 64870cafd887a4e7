"""Command-line entry points.

Subcommands cover the full pipeline: `synth` renders datasets, `sweep` runs a
parameter study end to end, `pretrain`/`probe` split one grid point into a
train stage and an evaluation stage, `train-views` fits a flow generator,
`verify-theory` checks the exact-MI machinery, and `report` rebuilds artifacts
from an existing records.csv.

Exit codes: 0 success, 1 invalid configuration or inputs, 2 training diverged.
Wall times never enter emitted CSVs (reruns must be byte-identical); they go
to the log instead.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, load_config
from .datasets import MovingDigitWorld, save_sequence_dataset
from .experiments import (
    EXPERIMENT_SWEEPS,
    FrequencySweepSettings,
    PatchSweepSettings,
    _frequency_views,
    _patch_probe_sets,
    frequency_point,
    patch_point,
)
from .flow_gen import load_generator, save_generator
from .harness import emit_report, read_records, strip_timing, verify_theory
from .trainer import TrainingDiverged, embed_images, linear_probe, load_encoder, save_encoder
from .view_learning import make_view_critics, train_semisupervised, train_unsupervised

log = logging.getLogger("viewmi")


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors (exit 1); 2 is reserved for divergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="YAML config file; omitted = defaults")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", required=out_required, help="output directory")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args, cfg: Config) -> int:
    out = _out_dir(args)
    dataset = cfg.dataset
    if args.seed is not None:
        dataset = dataclasses.replace(dataset, seed=args.seed)
    world = MovingDigitWorld(dataset)
    rng = np.random.default_rng(dataset.seed)
    n, t, c = cfg.synth.samples, dataset.t, dataset.canvas
    frames = np.empty((n, t, 3, c, c), dtype=np.float32)
    digit = np.empty(n, dtype=np.int64)
    bkgd = np.empty(n, dtype=np.int64)
    pos = np.empty((n, 2), dtype=np.float64)
    t0 = time.perf_counter()
    for i in range(n):
        seq, labels = world.synth_sequence(rng)
        frames[i] = seq.frames
        digit[i] = labels.digit_class
        bkgd[i] = labels.background_class
        pos[i] = labels.position
    labels_dict = {"digit": digit, "background": bkgd, "position": pos}
    save_sequence_dataset(
        out, frames, labels_dict, config=dataset, chunk_bytes=cfg.synth.chunk_mb * 1024 * 1024
    )
    log.info("wrote %d sequences (%s) to %s in %.1fs",
             n, "x".join(map(str, frames.shape[1:])), out, time.perf_counter() - t0)

    if cfg.synth.singles > 0:
        from PIL import Image as PILImage

        singles_dir = out / "singles"
        singles_dir.mkdir(exist_ok=True)
        rows = []
        for i in range(cfg.synth.singles):
            img, labels = world.render_single(rng)
            u8 = np.round(np.transpose(img, (1, 2, 0)) * 255.0).astype(np.uint8)
            name = f"single_{i:05d}.png"
            PILImage.fromarray(u8).save(singles_dir / name)
            rows.append(f"singles/{name},{labels.digit_class}")
        (out / "manifest.csv").write_text("\n".join(rows) + "\n")
        log.info("wrote %d labeled singles and manifest.csv", cfg.synth.singles)
    return 0


def _cmd_sweep(args, cfg: Config) -> int:
    out = _out_dir(args)
    settings = cfg.sweep_settings(seed_override=args.seed)
    runner = EXPERIMENT_SWEEPS[cfg.sweep_experiment]
    log.info("sweep %s: %s", cfg.sweep_experiment, settings)
    records = runner(settings, progress=log.info)
    for r in records:
        log.info("point %s=%s seed=%d: %.1fs%s", r.param_name, r.param_value, r.seed,
                 r.wall_time_s, f" FAILED: {r.error}" if r.error else "")
    summary = emit_report(strip_timing(records), out)
    log.info("report: %s", summary)
    return 0


def _point_settings(cfg: Config, experiment: str):
    """Experiment settings for a single-point run; sweep overrides apply when
    the sweep section configures the same experiment."""
    if experiment == "frequency":
        base: object = FrequencySweepSettings()
    elif experiment == "patch_distance":
        base = PatchSweepSettings()
    else:
        raise ConfigError(f"single-point runs support frequency | patch_distance, got {experiment!r}")
    if cfg.sweep_experiment == experiment and cfg.sweep_overrides:
        base = cfg.sweep_settings()
    return base


def _cmd_pretrain(args, cfg: Config) -> int:
    out = _out_dir(args)
    experiment = cfg.point.experiment
    settings = _point_settings(cfg, experiment)
    seed = args.seed if args.seed is not None else settings.seeds[0]
    capture: dict = {}
    t0 = time.perf_counter()
    if experiment == "frequency":
        point = frequency_point(settings, float(cfg.point.param), seed, capture=capture)
    else:
        point = patch_point(settings, int(cfg.point.param), seed, capture=capture)
    log.info("pretrain %s param=%s seed=%d: %.1fs", experiment, cfg.point.param, seed,
             time.perf_counter() - t0)

    enc1, enc2 = capture["encoders"]
    save_encoder(out / "encoder1.vmc", enc1)
    save_encoder(out / "encoder2.vmc", enc2)
    result = capture["pretrain"]
    with open(out / "losses.csv", "w") as f:
        f.write("step,loss\n")
        for i, v in enumerate(result.step_losses):
            f.write(f"{i},{v:.17g}\n")
    _write_json(out / "estimate.json", {
        "experiment": experiment,
        "param": cfg.point.param,
        "seed": seed,
        "i_nce_nats": point.i_nce_nats,
        "terminal_loss": result.terminal_loss,
        "batch_size": result.estimate.batch_size,
        "metrics": point.metrics,
        "protocol_id": point.protocol_id,
    })
    log.info("saved encoders, losses.csv, estimate.json to %s", out)
    return 0


def _cmd_probe(args, cfg: Config) -> int:
    out = _out_dir(args)
    enc_dir = Path(args.encoder_dir or cfg.probe.encoder_dir or "")
    if not enc_dir.name:
        raise ConfigError("probe needs --encoder-dir (or probe.encoder_dir in the config)")
    if cfg.probe.task != "classification":
        raise ConfigError("probe CLI supports classification tasks only")
    enc1 = load_encoder(enc_dir / "encoder1.vmc")
    enc2 = load_encoder(enc_dir / "encoder2.vmc")
    experiment = cfg.probe.experiment
    settings = _point_settings(cfg, experiment)
    seed = args.seed if args.seed is not None else settings.seeds[0]

    if experiment == "frequency":
        v1, v2, y = _frequency_views(settings, float(cfg.probe.param))
        n = settings.n_pairs
        tr = slice(n, n + settings.probe_train)
        te = slice(n + settings.probe_train, None)
        z_tr = np.concatenate([embed_images(enc1, v1[tr]), embed_images(enc2, v2[tr])], axis=1)
        z_te = np.concatenate([embed_images(enc1, v1[te]), embed_images(enc2, v2[te])], axis=1)
        probe = linear_probe(z_tr, y[tr], z_te, y[te], task="classification", seed=seed)
    else:
        train, test = _patch_probe_sets(settings)
        z_tr = embed_images(enc1, train[0])
        z_te = embed_images(enc1, test[0])
        probe = linear_probe(z_tr, train[1], z_te, test[1], task="classification", seed=seed)

    _write_json(out / "metrics.json", {
        "experiment": experiment,
        "param": cfg.probe.param,
        "seed": seed,
        "task": probe.task,
        "metric_name": probe.metric_name,
        "metric_value": probe.metric_value,
        "encoder_dir": str(enc_dir),
    })
    log.info("probe %s: %s = %.4f", experiment, probe.metric_name, probe.metric_value)
    return 0


def _cmd_train_views(args, cfg: Config) -> int:
    from .experiments import _planted_pools, _pool_batch_fn

    out = _out_dir(args)
    study = cfg.view_study
    vl = cfg.view_learning
    if args.mode is not None:
        vl = dataclasses.replace(vl, mode=args.mode,
                                 label_count=study.label_count if args.mode == "semi" else 0)
    if args.seed is not None:
        vl = dataclasses.replace(vl, seed=args.seed)
    unlabeled, labeled, _, _ = _planted_pools(study)
    batch_fn = _pool_batch_fn(unlabeled)
    generator = dataclasses.replace(cfg.flow, seed=vl.seed).build()
    c1, c2, score_cfg = make_view_critics(study.image_size, study.image_size, seed=vl.seed + 1000)

    log.info("train-views mode=%s steps=%d seed=%d", vl.mode, vl.total_steps, vl.seed)
    try:
        if vl.mode == "unsupervised":
            result = train_unsupervised(generator, c1, c2, score_cfg, batch_fn, vl)
        else:
            def labeled_fn(rng: np.random.Generator, b: int):
                idx = rng.integers(len(labeled[0]), size=b)
                return labeled[0][idx], labeled[1][idx]

            result = train_semisupervised(
                generator, c1, c2, score_cfg, batch_fn, labeled_fn, study.n_classes, vl
            )
    except TrainingDiverged as exc:
        if exc.trace is not None and getattr(exc.trace, "records", None):
            exc.trace.to_csv(out / "trace.csv")
            log.error("diverged after %d recorded steps: %s", len(exc.trace.records), exc)
        raise

    result.trace.to_csv(out / "trace.csv")
    save_generator(result.generator, out / "generator.vmc")
    _write_json(out / "report.json", {
        "mode": vl.mode,
        "total_steps": vl.total_steps,
        "seed": vl.seed,
        "final_i_nce_nats": result.final_i_nce,
        "protocol_id": result.protocol_id,
    })
    log.info("final i_nce=%.4f nats in %.1fs; artifacts in %s",
             result.final_i_nce, result.wall_time_s, out)
    return 0


def _cmd_verify_theory(args, cfg: Config) -> int:
    seed = args.seed if args.seed is not None else 0
    report = verify_theory(n_tables=cfg.theory_tables, seed=seed)
    if args.out:
        _write_json(_out_dir(args) / "report.json", report)
    status = "PASS" if report["pass"] else "FAIL"
    print(f"{status}: identities max residual {report['identities']['max_residual']:.3g} "
          f"over {report['identities']['tables']} tables; "
          f"optimal views {tuple(report['optimal_views']['v1_axes'])}/"
          f"{tuple(report['optimal_views']['v2_axes'])} "
          f"mi={report['optimal_views']['mi_nats']:.6f} nats")
    return 0 if report["pass"] else 1


def _cmd_report(args, cfg: Config) -> int:
    out = _out_dir(args)
    records = read_records(args.records)
    summary = emit_report(records, out)
    log.info("rebuilt report from %s: %s", args.records, summary)
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viewmi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a moving-digit sequence dataset")
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("sweep", help="run the configured parameter sweep end to end")
    _add_common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("pretrain", help="train one grid point and save the encoders")
    _add_common(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("probe", help="evaluate saved encoders with a linear probe")
    _add_common(p)
    p.add_argument("--encoder-dir", help="directory holding encoder1.vmc/encoder2.vmc")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("train-views", help="fit a flow generator that splits views")
    _add_common(p)
    p.add_argument("--mode", choices=["unsupervised", "semi"], default=None)
    p.set_defaults(func=_cmd_train_views)

    p = sub.add_parser("verify-theory", help="check exact-MI identities and the optimal-views oracle")
    _add_common(p, out_required=False)
    p.set_defaults(func=_cmd_verify_theory)

    p = sub.add_parser("report", help="rebuild plots and verdicts from a records.csv")
    _add_common(p)
    p.add_argument("--records", required=True, help="path to an existing records.csv")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return 2
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
