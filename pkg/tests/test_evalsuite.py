import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mae_loop, margins_loop, mse_loop, variance_loop
from steerclone.datasetio import FrameArrays
from steerclone.evalsuite import (
    REFERENCE_MARGINS,
    ClosedLoopResult,
    MetricsReport,
    closed_loop_eval,
    emit_report,
    error_variance,
    load_summary,
    mae,
    margin_percentages,
    mse,
    offline_eval,
    read_predictions,
    rmse,
    write_predictions,
)
from steerclone.expert import drive_and_record
from steerclone.models import ModelBundle
from steerclone.trainer import EpochRecord, TrainingLog

angles = st.floats(-1.0, 1.0, allow_nan=False)
pairs = st.integers(1, 40).flatmap(lambda n: st.tuples(st.lists(angles, min_size=n, max_size=n),
                                                      st.lists(angles, min_size=n, max_size=n)))


# ---- metrics


def test_metric_examples():
    assert mae([0.1, 0.3], [0.2, 0.1]) == pytest.approx(0.15, abs=1e-15)
    assert mse([0.0], [0.2]) == pytest.approx(0.04, abs=1e-15)
    assert rmse([0.0], [0.2]) == pytest.approx(0.2, abs=1e-15)
    assert error_variance([0.0, 0.0], [-0.1, 0.1]) == pytest.approx(0.01, abs=1e-15)
    assert error_variance([0.1, 0.2, 0.3], [0.2, 0.3, 0.4]) == pytest.approx(0.0, abs=1e-15)
    y = [0.3, -0.2, 0.0]
    assert (mae(y, y), mse(y, y), rmse(y, y), error_variance(y, y)) == (0.0, 0.0, 0.0, 0.0)


def test_margin_examples():
    y = np.zeros(4)
    assert margin_percentages(y, [0.05, 0.15, 0.25, 0.35], [0.1, 0.2, 0.3]) == [25.0, 50.0, 75.0]
    assert margin_percentages(y, y) == [100.0, 100.0, 100.0]
    with pytest.raises(ValueError):
        margin_percentages(y, y, [0.3, 0.1])


@pytest.mark.parametrize("fn", [mae, mse, rmse, error_variance, margin_percentages])
def test_metric_argument_errors(fn):
    with pytest.raises(ValueError):
        fn([], [])
    with pytest.raises(ValueError):
        fn([0.1, 0.2], [0.1])


def test_metrics_match_loop_oracles_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 1000))
        y, p = rng.uniform(-0.5, 0.5, n), rng.uniform(-0.7, 0.7, n)
        yl, pl = y.tolist(), p.tolist()
        assert abs(mae(y, p) - mae_loop(yl, pl)) <= 1e-12
        assert abs(mse(y, p) - mse_loop(yl, pl)) <= 1e-12
        assert abs(rmse(y, p) - math.sqrt(mse_loop(yl, pl))) <= 1e-12
        assert abs(error_variance(y, p) - variance_loop(yl, pl)) <= 1e-12
        assert margin_percentages(y, p) == margins_loop(yl, pl, [0.1, 0.2, 0.3])


@settings(max_examples=300, deadline=None)
@given(pairs, st.randoms(use_true_random=False))
def test_metric_identities(yp, rnd):
    y, p = np.array(yp[0]), np.array(yp[1])
    m, v = mse(y, p), error_variance(y, p)
    e = p - y
    assert rmse(y, p) == pytest.approx(math.sqrt(m), abs=1e-12)
    assert abs(rmse(y, p) ** 2 - m) <= 1e-12
    assert mae(y, p) <= rmse(y, p) + 1e-12
    assert m == pytest.approx(v + e.mean() ** 2, abs=1e-12)
    assert v <= m + 1e-12
    pct = margin_percentages(y, p, [0.05, 0.1, 0.2, 0.3, 1.0])
    assert all(0.0 <= a <= b <= 100.0 for a, b in zip(pct, pct[1:]))
    idx = list(range(len(y)))
    rnd.shuffle(idx)
    assert margin_percentages(y[idx], p[idx], [0.05, 0.1, 0.2, 0.3, 1.0]) == pct


def test_report_compute_and_roundtrip():
    r = MetricsReport.compute([0.0, 0.1], [0.05, 0.4], method="m", map_kind="o")
    assert r.n_samples == 2 and r.margins == {0.1: 50.0, 0.2: 50.0, 0.3: 50.0}
    assert MetricsReport.from_dict(json.loads(json.dumps(r.to_dict()))) == r


# ---- predictions and offline evaluation


def test_predictions_file_roundtrip(tmp_path):
    p = write_predictions(tmp_path / "p.csv", ["a.png", "b.png"], [0.1, -0.2], [0.123456789, 0.5])
    assert p.read_text().splitlines() == [
        "Frame,GroundTruth,Predicted", "a.png,0.100000000,0.123456789", "b.png,-0.200000000,0.500000000",
    ]
    ids, y, y_hat = read_predictions(p)
    assert ids == ["a.png", "b.png"] and y.tolist() == [0.1, -0.2] and y_hat.tolist() == [0.123456789, 0.5]
    (tmp_path / "bad.csv").write_text("a,b,c\n")
    with pytest.raises(ValueError):
        read_predictions(tmp_path / "bad.csv")


def test_oracle_predictor_is_perfect(small_dataset, tmp_path):
    labels = {r.frame_id: r.steering for r in small_dataset.records}
    frames = small_dataset.load_arrays()
    lookup = {img.tobytes(): labels[f] for img, f in zip(frames.images, frames.frame_ids)}

    def oracle(images):
        return [lookup[img.tobytes()] for img in images]

    report, path = offline_eval(oracle, small_dataset, tmp_path, method="oracle")
    assert report.mae == report.mse == report.rmse == 0.0
    assert list(report.margins.values()) == [100.0, 100.0, 100.0]
    assert report.map_kind == "ellipse" and path.name == "predictions.csv"
    ids, _, _ = read_predictions(path)
    assert ids == [r.frame_id for r in small_dataset.records]


def test_constant_zero_on_o_map(tmp_path, tracks):
    m = drive_and_record(tracks["o"], 60, 0.3, 0.0, 7, tmp_path / "o", record_masks=False)
    report, _ = offline_eval(lambda imgs: np.zeros(len(imgs)), m, method="zero")
    assert report.mae >= 0.35


def test_bundle_eval_is_idempotent(small_dataset, tmp_path):
    b = ModelBundle.create("autobc", {"widths": [2, 2, 2], "hidden": 4}, seed=0)
    r1, p1 = offline_eval(b, small_dataset, tmp_path / "a")
    r2, p2 = offline_eval(b, small_dataset, tmp_path / "b")
    assert p1.read_bytes() == p2.read_bytes()
    assert r1 == r2 and r1.method == "autobc"
    assert abs(r1.rmse ** 2 - r1.mse) <= 1e-12
    with pytest.raises(ValueError):
        offline_eval(b, FrameArrays(np.zeros((0, 224, 224, 3), np.uint8), np.zeros(0), []))


# ---- closed loop


def test_expert_completes_o_lap(tracks):
    t = tracks["o"]
    res = closed_loop_eval("expert", t, 3000, 0.02)
    assert res.completed_lap and res.max_abs_cte < 0.125
    assert res.steps_survived >= t.length / (0.3 * 0.02)
    assert res.lap_time == pytest.approx(res.steps_survived * 0.02)
    assert res.max_abs_cte >= res.mean_abs_cte >= 0.0
    assert res.trajectory.shape == (res.steps_survived + 1, 3)
    longer = closed_loop_eval("expert", t, 6000, 0.02)
    assert longer.to_dict() == res.to_dict()
    assert np.array_equal(longer.trajectory, res.trajectory)


def test_zero_policy_leaves_the_o(tracks):
    res = closed_loop_eval(lambda s, t: 0.0, tracks["o"], 3000, 0.02)
    assert not res.completed_lap and res.lap_time is None
    assert res.max_abs_cte > tracks["o"].lane_width
    assert res.steps_survived < 3000


def test_max_steps_cap(tracks):
    res = closed_loop_eval("expert", tracks["ellipse"], 5, 0.02)
    assert res.steps_survived == 5 and not res.completed_lap
    with pytest.raises(ValueError):
        closed_loop_eval("expert", tracks["ellipse"], 0)
    with pytest.raises(ValueError):
        closed_loop_eval("human", tracks["ellipse"], 5)


def test_bundle_policy_is_deterministic(tracks):
    b = ModelBundle.create("autobc", {"widths": [2, 2, 2], "hidden": 4}, seed=1)
    a = closed_loop_eval(b, tracks["o"], 20, 0.02)
    c = closed_loop_eval(b, tracks["o"], 20, 0.02)
    assert np.array_equal(a.trajectory, c.trajectory)


# ---- reports


def test_emit_report(tmp_path):
    rng = np.random.default_rng(0)
    y = rng.uniform(-0.5, 0.5, 50)
    preds = {("autobc", "ellipse"): (y, y + rng.normal(0, 0.05, 50)),
             ("vit_mlp_sit", "ellipse"): (y, y + rng.normal(0, 0.1, 50)),
             ("autobc", "o"): (y, y + 0.2)}
    reports = [MetricsReport.compute(a, b, m, k) for (m, k), (a, b) in preds.items()]
    logs = {"autobc": TrainingLog([EpochRecord(1, 0.2, 0.3, 1.0), EpochRecord(2, 0.1, 0.2, 1.0)])}
    closed = {("expert", "o"): ClosedLoopResult(True, 600, 0.01, 0.02, 12.0)}
    out = emit_report(reports, tmp_path / "rep", logs, preds, closed)
    assert load_summary(out) == reports
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["reports"]) == 3
    assert all(set(r) >= {"mae", "mse", "rmse", "error_variance", "margins"} for r in summary["reports"])
    assert summary["closed_loop"][0]["completed_lap"] is True
    assert [p for _, p in summary["reference"]["margins"]] == [61.25, 95.0, 99.64]
    for m, k in preds:
        assert (out / "plots" / f"errors_{m}_{k}.png").stat().st_size > 0
    for k in ("ellipse", "o"):
        assert (out / "plots" / f"overlay_{k}.png").stat().st_size > 0
    assert (out / "plots" / "loss_autobc.png").stat().st_size > 0
    t3 = (out / "table3.md").read_text()
    assert "| Method | Map | MAE | MSE | RMSE | Variance | N |" in t3
    assert "0.0887" in t3 and "0.0069" in t3
    t4 = (out / "table4.md").read_text().splitlines()
    assert len(t4) == 2 + 3
    assert t4[2].startswith("| Within 0.1 radians (5.73 degrees)") and t4[2].endswith("61.25% |")
    with pytest.raises(ValueError):
        emit_report([], tmp_path / "empty")


def test_reference_margins_are_published_values():
    assert REFERENCE_MARGINS == {0.1: 61.25, 0.2: 95.0, 0.3: 99.64}
