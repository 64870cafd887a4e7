import json
import math

import numpy as np
import pytest

from viewmi.harness import (
    CSV_HEADER,
    PointResult,
    SweepRecord,
    curve_series,
    detect_curve,
    emit_report,
    read_records,
    run_sweep,
    strip_timing,
    verify_theory,
)


def _record(sweep="s", pname="p", pval=0.0, ince=1.0, metrics=None, seed=0,
            proto="abc123", wall=0.5, error=None):
    return SweepRecord(sweep, pname, pval, ince,
                       {"acc": 50.0} if metrics is None else metrics,
                       seed, proto, wall, error)


# ---------------------------------------------------------------------------
# run_sweep


def test_run_sweep_visits_grid_in_order_with_timing():
    calls = []

    def point(v, seed):
        calls.append((v, seed))
        return PointResult(float(v) / 10, {"acc": 10.0 * v + seed}, "proto-A")

    recs = run_sweep("demo", "alpha", [1, 2], [0, 1], point)
    assert calls == [(1, 0), (1, 1), (2, 0), (2, 1)]
    assert [r.param_value for r in recs] == [1.0, 1.0, 2.0, 2.0]
    assert [r.seed for r in recs] == [0, 1, 0, 1]
    assert all(r.protocol_id == "proto-A" for r in recs)
    assert all(r.wall_time_s >= 0 for r in recs)
    assert recs[2].metrics == {"acc": 20.0}
    assert recs[2].i_nce_nats == pytest.approx(0.2)


def test_run_sweep_turns_point_failures_into_error_records():
    def point(v, seed):
        if v == 2:
            raise RuntimeError("boom")
        return PointResult(1.0, {"acc": 1.0}, "proto-A")

    recs = run_sweep("demo", "alpha", [1, 2, 3], [0], point)
    assert [r.error is None for r in recs] == [True, False, True]
    bad = recs[1]
    assert "boom" in bad.error
    assert math.isnan(bad.i_nce_nats) and bad.metrics == {}
    assert bad.protocol_id == "proto-A"  # inherited from the sweep


def test_run_sweep_backfills_protocol_when_first_point_fails():
    def point(v, seed):
        if v == 1:
            raise RuntimeError("early")
        return PointResult(1.0, {"acc": 1.0}, "proto-B")

    recs = run_sweep("demo", "alpha", [1, 2], [0], point)
    assert recs[0].error is not None and recs[0].protocol_id == "proto-B"


def test_run_sweep_rejects_protocol_drift():
    def point(v, seed):
        return PointResult(1.0, {"acc": 1.0}, f"proto-{v}")

    with pytest.raises(ValueError, match="protocol changed"):
        run_sweep("demo", "alpha", [1, 2], [0], point)


def test_run_sweep_rejects_duplicate_grid_points():
    with pytest.raises(ValueError, match="duplicate"):
        run_sweep("demo", "alpha", [1, 1], [0], lambda v, s: None)


def test_run_sweep_progress_lines_mention_every_point():
    lines = []
    run_sweep("demo", "alpha", [1, 2], [0],
              lambda v, s: PointResult(1.0, {"a": 1.0}, "p"), progress=lines.append)
    assert len(lines) == 2 and all("alpha=" in ln for ln in lines)


# ---------------------------------------------------------------------------
# curve classification


def test_detect_curve_reverse_u_from_interior_peak():
    v = detect_curve([0, 1, 2], [60.0, 75.0, 62.0], margin=2.0)
    assert v.shape == "reverse_u"
    assert v.argmax_param == 1.0


def test_detect_curve_monotone_both_directions():
    up = detect_curve([1, 2, 3, 4], [1.0, 4.0, 9.0, 16.0], margin=1.0)
    assert up.shape == "monotone_increasing" and up.argmax_param == 4.0
    down = detect_curve([1, 2, 3, 4], [16.0, 9.0, 4.0, 1.0], margin=1.0)
    assert down.shape == "monotone_decreasing" and down.argmax_param == 1.0


def test_detect_curve_flat_takes_precedence_over_peaks():
    v = detect_curve([0, 1, 2], [60.2, 60.9, 60.4], margin=1.0)
    assert v.shape == "flat"


def test_detect_curve_interior_peak_must_clear_margin():
    # interior maximum exceeds one endpoint by a lot but the other by < margin
    v = detect_curve([0, 1, 2], [0.0, 10.0, 9.5], margin=1.0)
    assert v.shape == "irregular"
    v2 = detect_curve([0, 1, 2], [0.0, 10.0, 9.0], margin=1.0)
    assert v2.shape == "reverse_u"


def test_detect_curve_irregular_when_nothing_fits():
    v = detect_curve([0, 1, 2, 3], [0.0, 3.0, 1.0, 10.0], margin=2.0)
    assert v.shape == "irregular"


def test_detect_curve_is_order_and_duplicate_invariant():
    params = [3, 1, 2, 2]
    values = [1.0, 0.0, 10.0, 0.0]  # param 2 averages to 5
    v = detect_curve(params, values, margin=2.0)
    assert v.shape == "reverse_u" and v.argmax_param == 2.0
    rng = np.random.default_rng(0)
    for _ in range(5):
        idx = rng.permutation(len(params))
        w = detect_curve(np.asarray(params)[idx], np.asarray(values)[idx], margin=2.0)
        assert w == v


def test_detect_curve_input_validation():
    with pytest.raises(ValueError, match="3 distinct"):
        detect_curve([1, 2], [0.0, 1.0])
    with pytest.raises(ValueError, match="3 distinct"):
        detect_curve([1, 1, 1], [0.0, 1.0, 2.0])
    with pytest.raises(ValueError, match="matched"):
        detect_curve([1, 2, 3], [0.0, 1.0])


def test_curve_series_averages_seeds_and_skips_failures():
    recs = [
        _record(pval=1.0, ince=2.0, metrics={"acc": 10.0}, seed=0),
        _record(pval=1.0, ince=4.0, metrics={"acc": 30.0}, seed=1),
        _record(pval=2.0, ince=1.0, metrics={"acc": 50.0}, seed=0),
        _record(pval=3.0, ince=math.nan, metrics={}, seed=0, error="RuntimeError('x')"),
    ]
    params, means = curve_series(recs)
    assert params.tolist() == [1.0, 2.0]
    assert means.tolist() == [3.0, 1.0]
    params, means = curve_series(recs, metric="acc")
    assert means.tolist() == [20.0, 50.0]


# ---------------------------------------------------------------------------
# theory verification


def test_verify_theory_passes_on_a_small_budget():
    rep = verify_theory(n_tables=25, seed=1)
    assert rep["pass"] is True
    assert rep["identities"]["max_residual"] < 1e-10
    assert rep["optimal_views"]["v1_axes"] == [0]
    assert rep["optimal_views"]["v2_axes"] == [0]
    assert rep["optimal_views"]["mi_nats"] == pytest.approx(math.log(2), abs=1e-12)


# ---------------------------------------------------------------------------
# report emission


@pytest.fixture()
def mixed_records():
    return [
        _record(sweep="b_sweep", pval=2.0, ince=1.5, metrics={"acc": 70.0, "err": 3.0}, seed=1),
        _record(sweep="a_sweep", pval=0.3, ince=0.9, metrics={"acc": 55.0}, seed=0),
        _record(sweep="a_sweep", pval=0.3, ince=1.1, metrics={"acc": 65.0}, seed=1),
        _record(sweep="a_sweep", pval=1.0, ince=1.4, metrics={"acc": 80.0}, seed=0),
        _record(sweep="a_sweep", pval=1.0, ince=1.2, metrics={"acc": 78.0}, seed=1),
        _record(sweep="a_sweep", pval=3.0, ince=0.2, metrics={"acc": 60.0}, seed=0),
        _record(sweep="a_sweep", pval=3.0, ince=0.4, metrics={"acc": 62.0}, seed=1),
        _record(sweep="a_sweep", pval=9.0, ince=math.nan, metrics={}, seed=0,
                error="RuntimeError('died')"),
    ]


def test_emit_report_writes_sorted_csv_with_exact_header(tmp_path, mixed_records):
    summary = emit_report(mixed_records, tmp_path)
    lines = (tmp_path / "records.csv").read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert lines[0] == ("sweep_id,param_name,param_value,i_nce_nats,metric_name,"
                        "metric_value,seed,protocol_id,wall_time_s")
    # 6 a_sweep rows, 2 b_sweep rows (two metrics), failed record omitted
    assert summary["csv_rows"] == 8 and summary["omitted_records"] == 1
    keys = []
    for ln in lines[1:]:
        parts = ln.split(",")
        keys.append((parts[0], float(parts[2]), int(parts[6]), parts[4]))
    assert keys == sorted(keys)
    assert (tmp_path / "a_sweep.png").exists() and (tmp_path / "b_sweep.png").exists()


def test_emit_report_is_byte_identical_across_calls(tmp_path, mixed_records):
    emit_report(mixed_records, tmp_path / "one")
    emit_report(list(mixed_records), tmp_path / "two")
    for name in ("records.csv", "verdicts.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_emit_report_floats_survive_a_read_round_trip(tmp_path):
    recs = [
        _record(pval=0.1 * k, ince=math.pi * k, metrics={"acc": 1.0 / (k + 3)}, seed=0)
        for k in range(4)
    ]
    emit_report(recs, tmp_path / "one")
    back = read_records(tmp_path / "one" / "records.csv")
    emit_report(back, tmp_path / "two")
    assert (tmp_path / "one" / "records.csv").read_bytes() == \
        (tmp_path / "two" / "records.csv").read_bytes()
    by_param = {r.param_value: r for r in back}
    assert by_param[0.2].i_nce_nats == 2 * math.pi  # exact, not approximate
    assert by_param[0.30000000000000004].metrics["acc"] == 1.0 / 6


def test_emit_report_verdicts_cover_each_series(tmp_path, mixed_records):
    emit_report(mixed_records, tmp_path)
    verdicts = json.loads((tmp_path / "verdicts.json").read_text())
    assert set(verdicts) == {"a_sweep", "b_sweep"}
    a = verdicts["a_sweep"]
    assert a["acc"]["shape"] == "reverse_u" and a["acc"]["argmax_param"] == 1.0
    assert set(a) == {"i_nce_nats", "acc"}
    assert verdicts["b_sweep"] == {}  # single param value: no curve to judge


def test_emit_report_rejects_empty_input(tmp_path):
    with pytest.raises(ValueError, match="nonempty"):
        emit_report([], tmp_path)


def test_read_records_rejects_foreign_headers(tmp_path):
    p = tmp_path / "records.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError, match="header"):
        read_records(p)


def test_read_records_regroups_metric_rows():
    rec = _record(metrics={"acc": 70.0, "err": 3.0}, wall=math.nan)
    import tempfile, pathlib
    with tempfile.TemporaryDirectory() as d:
        emit_report([rec], d)
        back = read_records(pathlib.Path(d) / "records.csv")
    assert len(back) == 1
    assert back[0].metrics == {"acc": 70.0, "err": 3.0}
    assert back[0].sweep_id == rec.sweep_id and back[0].seed == rec.seed


def test_strip_timing_blanks_wall_time_only():
    recs = [_record(wall=1.25, seed=s) for s in range(3)]
    stripped = strip_timing(recs)
    assert all(math.isnan(r.wall_time_s) for r in stripped)
    assert all(r.wall_time_s == 1.25 for r in recs)  # originals untouched
    assert [r.seed for r in stripped] == [0, 1, 2]
    assert stripped[0].metrics == recs[0].metrics
