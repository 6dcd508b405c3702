"""Offline steering metrics, prediction dumps, reports and closed-loop driving."""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .datasetio import DatasetManifest, as_frames
from .expert import DEFAULT_DT, pure_pursuit_steer
from .models import ModelBundle, predict_steering
from .simworld import (
    CameraConfig,
    TrackSpec,
    VehicleParams,
    VehicleState,
    clamp_steering,
    render_camera_u8,
    step_kinematics,
)

DEFAULT_MARGINS = (0.1, 0.2, 0.3)
PREDICTIONS_HEADER = ("Frame", "GroundTruth", "Predicted")

# Published figures from a physical car and human-driven data. Shown next to
# desk results for orientation only; nothing here is expected to match them.
REFERENCE_METRICS = [
    {"method": "AutoBC", "mae": 0.0887, "mse": 0.0119, "rmse": 0.1091, "error_variance": 0.0069},
    {"method": "ViT with MLP without SIT", "mae": 0.0828, "mse": 0.0136, "rmse": 0.1164, "error_variance": 0.0114},
    {"method": "ViT without MLP without SIT", "mae": 0.0795, "mse": 0.0117, "rmse": 0.1082, "error_variance": 0.0098},
    {"method": "AutoBC spatial attention", "mae": None, "mse": None, "rmse": None, "error_variance": 0.0108},
]
REFERENCE_MARGINS = {0.1: 61.25, 0.2: 95.00, 0.3: 99.64}


# --------------------------------------------------------------------------
# Metrics


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} targets vs {y_hat.size} predictions")
    if y.size == 0:
        raise ValueError("metrics need at least one sample")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def rmse(y, y_hat) -> float:
    return math.sqrt(mse(y, y_hat))


def error_variance(y, y_hat) -> float:
    """Population variance of the errors ``y_hat - y``."""
    y, y_hat = _pair(y, y_hat)
    e = y_hat - y
    return float(np.mean((e - e.mean()) ** 2))


def margin_percentages(y, y_hat, thresholds=DEFAULT_MARGINS) -> list[float]:
    y, y_hat = _pair(y, y_hat)
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("thresholds must be a non-empty list")
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be sorted ascending")
    err = np.abs(y - y_hat)
    return [100.0 * np.count_nonzero(err <= ti) / err.size for ti in t]


@dataclass
class MetricsReport:
    method: str
    mae: float
    mse: float
    rmse: float
    error_variance: float
    margins: dict[float, float]
    n_samples: int
    map_kind: str = ""

    @classmethod
    def compute(cls, y, y_hat, method: str = "", map_kind: str = "", thresholds=DEFAULT_MARGINS) -> MetricsReport:
        y, y_hat = _pair(y, y_hat)
        pct = margin_percentages(y, y_hat, thresholds)
        return cls(
            method,
            mae(y, y_hat),
            mse(y, y_hat),
            rmse(y, y_hat),
            error_variance(y, y_hat),
            {float(t): p for t, p in zip(thresholds, pct)},
            int(y.size),
            map_kind,
        )

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "map_kind": self.map_kind,
            "mae": self.mae,
            "mse": self.mse,
            "rmse": self.rmse,
            "error_variance": self.error_variance,
            "margins": [[t, p] for t, p in sorted(self.margins.items())],
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(
            d["method"], d["mae"], d["mse"], d["rmse"], d["error_variance"],
            {float(t): float(p) for t, p in d["margins"]}, int(d["n_samples"]), d.get("map_kind", ""),
        )


# --------------------------------------------------------------------------
# Offline evaluation


def _predict(model, images) -> np.ndarray:
    if isinstance(model, ModelBundle):
        return predict_steering(model, images)
    return np.asarray(model(images), dtype=np.float64).reshape(-1)


def write_predictions(path: str | Path, frame_ids, y, y_hat) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTIONS_HEADER)
        for f, a, b in zip(frame_ids, y, y_hat):
            w.writerow([f, f"{a:.9f}", f"{b:.9f}"])
    return path


def read_predictions(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != PREDICTIONS_HEADER:
        raise ValueError(f"{path}: expected header {','.join(PREDICTIONS_HEADER)}")
    body = rows[1:]
    return [r[0] for r in body], np.array([float(r[1]) for r in body]), np.array([float(r[2]) for r in body])


def offline_eval(
    model,
    manifest,
    out_dir: str | Path | None = None,
    *,
    method: str = "",
    map_kind: str | None = None,
    thresholds=DEFAULT_MARGINS,
) -> tuple[MetricsReport, Path | None]:
    """Eval-mode predictions over every frame, in manifest order.

    ``model`` is a ModelBundle or any callable mapping uint8 NHWC frames to
    steering values. With ``out_dir`` the predictions go to
    ``out_dir/predictions.csv``.
    """
    frames = as_frames(manifest)
    if len(frames) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if map_kind is None:
        map_kind = manifest.meta.get("track_kind", "") if isinstance(manifest, DatasetManifest) else ""
    y = frames.steering.astype(np.float64)
    # Round-trip through the CSV precision so file and report agree exactly.
    y_hat = np.round(_predict(model, frames.images), 9)
    report = MetricsReport.compute(y, y_hat, method or getattr(model, "arch", ""), map_kind, thresholds)
    path = None
    if out_dir is not None:
        ids = frames.frame_ids or [str(i) for i in range(len(y))]
        path = write_predictions(Path(out_dir) / "predictions.csv", ids, y, y_hat)
    return report, path


# --------------------------------------------------------------------------
# Closed loop


@dataclass
class ClosedLoopResult:
    completed_lap: bool
    steps_survived: int
    mean_abs_cte: float
    max_abs_cte: float
    lap_time: float | None = None
    trajectory: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "completed_lap": self.completed_lap,
            "steps_survived": self.steps_survived,
            "mean_abs_cte": self.mean_abs_cte,
            "max_abs_cte": self.max_abs_cte,
            "lap_time": self.lap_time,
        }


def _make_policy(policy, camera: CameraConfig, vehicle: VehicleParams) -> Callable[[VehicleState, TrackSpec], float]:
    if isinstance(policy, str):
        if policy != "expert":
            raise ValueError(f"unknown policy {policy!r}")
        return lambda s, t: pure_pursuit_steer(s, t, wheelbase=vehicle.wheelbase)
    if isinstance(policy, ModelBundle):
        return lambda s, t: float(predict_steering(policy, render_camera_u8(s, t, camera)[None])[0])
    if callable(policy):
        return policy
    raise TypeError("policy must be 'expert', a ModelBundle or a callable(state, track)")


def closed_loop_eval(
    policy,
    track: TrackSpec,
    max_steps: int,
    dt: float = DEFAULT_DT,
    *,
    throttle: float = 0.3,
    vehicle: VehicleParams = VehicleParams(),
    camera: CameraConfig = CameraConfig(),
) -> ClosedLoopResult:
    """Drive from the centreline at arc 0 until a lap, an off-track exit or ``max_steps``."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    steer_fn = _make_policy(policy, camera, vehicle)
    state = VehicleState(track.pose_at(0.0))
    s_prev, progress = 0.0, 0.0
    ctes, traj = [], [(state.pose.x, state.pose.y, state.pose.heading)]
    completed, steps = False, 0
    half = track.length / 2
    for step in range(max_steps):
        cmd = clamp_steering(steer_fn(state, track))
        state = step_kinematics(state, cmd, throttle, dt, vehicle)
        steps = step + 1
        traj.append((state.pose.x, state.pose.y, state.pose.heading))
        off, s, _ = track.project(np.array([[state.pose.x, state.pose.y]]))
        cte = abs(float(off[0]))
        ctes.append(cte)
        if cte > track.lane_width:
            break
        ds = float(s[0]) - s_prev
        ds = (ds + half) % track.length - half
        progress += ds
        s_prev = float(s[0])
        if progress >= track.length:
            completed = True
            break
    c = np.asarray(ctes)
    return ClosedLoopResult(
        completed,
        steps,
        float(c.mean()),
        float(c.max()),
        steps * dt if completed else None,
        np.asarray(traj),
    )


# --------------------------------------------------------------------------
# Reports


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_") or "x"


def _fmt(v, spec=".4f"):
    return "n/a" if v is None else format(v, spec)


def _table3(reports: list[MetricsReport]) -> str:
    lines = [
        "| Method | Map | MAE | MSE | RMSE | Variance | N |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in reports:
        lines.append(
            f"| {r.method} | {r.map_kind} | {r.mae:.4f} | {r.mse:.4f} | {r.rmse:.4f} | {r.error_variance:.4f} | {r.n_samples} |"
        )
    for ref in REFERENCE_METRICS:
        lines.append(
            f"| {ref['method']} (published, not reproduced) | ellipse | {_fmt(ref['mae'])} | {_fmt(ref['mse'])} | "
            f"{_fmt(ref['rmse'])} | {_fmt(ref['error_variance'])} | n/a |"
        )
    return "\n".join(lines) + "\n"


def _table4(reports: list[MetricsReport]) -> str:
    thresholds = sorted({t for r in reports for t in r.margins})
    cols = [f"{r.method} / {r.map_kind}" for r in reports] + ["published AutoBC (not reproduced)"]
    lines = ["| Margin | " + " | ".join(cols) + " |", "|---|" + "---|" * len(cols)]
    for t in thresholds:
        cells = [f"{r.margins[t]:.2f}%" if t in r.margins else "n/a" for r in reports]
        ref = REFERENCE_MARGINS.get(t)
        cells.append("n/a" if ref is None else f"{ref:.2f}%")
        lines.append(f"| Within {t:g} radians ({math.degrees(t):.2f} degrees) | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(
    reports: list[MetricsReport],
    out_dir: str | Path,
    logs: dict | None = None,
    predictions: dict | None = None,
    closed_loop: dict | None = None,
) -> Path:
    """Write tables, plots and ``summary.json`` under ``out_dir``.

    ``logs`` maps method -> TrainingLog, ``predictions`` maps
    (method, map_kind) -> (y, y_hat), ``closed_loop`` maps
    (method, map_kind) -> ClosedLoopResult.
    """
    if not reports:
        raise ValueError("emit_report needs at least one MetricsReport")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    (out / "table3.md").write_text(_table3(reports))
    (out / "table4.md").write_text(_table4(reports))

    predictions = predictions or {}
    for (method, map_kind), (y, y_hat) in sorted(predictions.items()):
        err = np.asarray(y_hat, dtype=np.float64) - np.asarray(y, dtype=np.float64)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        lo, hi = float(err.min()), float(err.max())
        if hi - lo < 1e-6:
            # near-constant errors collapse the automatic bin edges
            lo, hi = lo - 0.01, hi + 0.01
        ax.hist(err, bins=40, range=(lo, hi), color="tab:blue", alpha=0.8)
        ax.axvline(0.0, color="k", lw=0.8)
        ax.set_title(f"{method} on {map_kind}: error variance {np.var(err):.4f}")
        ax.set_xlabel("predicted - ground truth (rad)")
        ax.set_ylabel("frames")
        fig.tight_layout()
        fig.savefig(out / "plots" / f"errors_{_slug(method)}_{_slug(map_kind)}.png", dpi=80)
        plt.close(fig)

    for map_kind in sorted({m for _, m in predictions}):
        fig, ax = plt.subplots(figsize=(8, 3.5))
        drawn_truth = False
        for (method, mk), (y, y_hat) in sorted(predictions.items()):
            if mk != map_kind:
                continue
            if not drawn_truth:
                ax.plot(np.asarray(y), color="k", lw=1.2, label="ground truth")
                drawn_truth = True
            ax.plot(np.asarray(y_hat), lw=0.8, label=method)
        ax.set_title(f"predicted vs ground truth steering, {map_kind} map")
        ax.set_xlabel("frame")
        ax.set_ylabel("steering (rad)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "plots" / f"overlay_{_slug(map_kind)}.png", dpi=80)
        plt.close(fig)

    for method, log in sorted((logs or {}).items()):
        if not len(log):
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        epochs = [r.epoch for r in log.records]
        ax.plot(epochs, log.train_losses, label="train")
        ax.plot(epochs, log.val_losses, label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(method)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "plots" / f"loss_{_slug(method)}.png", dpi=80)
        plt.close(fig)

    summary = {
        "reports": [r.to_dict() for r in reports],
        "closed_loop": [
            {"method": m, "map_kind": k, **res.to_dict()} for (m, k), res in sorted((closed_loop or {}).items())
        ],
        "reference": {
            "note": "published physical-car figures, not reproduced at desk scale",
            "metrics": REFERENCE_METRICS,
            "margins": [[t, p] for t, p in sorted(REFERENCE_MARGINS.items())],
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


def load_summary(path: str | Path) -> list[MetricsReport]:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    data = json.loads(path.read_text())
    return [MetricsReport.from_dict(d) for d in data["reports"]]
