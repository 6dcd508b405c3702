"""Scripted pure-pursuit driver and demonstration recorder."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .datasetio import DatasetManifest, FrameRecord, frame_name, make_meta, write_dataset
from .simworld import (
    CameraConfig,
    TrackSpec,
    VehicleParams,
    VehicleState,
    clamp_steering,
    cross_track_error,
    render_camera_u8,
    render_lane_mask,
    save_png,
    step_kinematics,
)

DEFAULT_LOOKAHEAD = 0.3
DEFAULT_DT = 0.02


class GenerationError(RuntimeError):
    """The expert left the track while recording."""

    def __init__(self, frame_index: int, cte: float):
        super().__init__(f"vehicle left the track at frame {frame_index} (cross-track error {cte:+.3f} m)")
        self.frame_index = frame_index
        self.cte = cte


def pure_pursuit_steer(
    state: VehicleState,
    track: TrackSpec,
    lookahead: float = DEFAULT_LOOKAHEAD,
    wheelbase: float = VehicleParams.wheelbase,
) -> float:
    if not lookahead > 0:
        raise ValueError(f"lookahead must be > 0, got {lookahead}")
    p = state.pose
    _, s, _ = track.project(np.array([[p.x, p.y]]))
    target, _ = track.point_at(float(s[0]) + lookahead)
    alpha = math.atan2(target[1] - p.y, target[0] - p.x) - p.heading
    return clamp_steering(math.atan2(2.0 * wheelbase * math.sin(alpha), lookahead))


def drive_and_record(
    track: TrackSpec,
    n_frames: int,
    throttle: float,
    steer_noise_std: float,
    seed: int,
    out_dir: str | Path,
    *,
    lookahead: float = DEFAULT_LOOKAHEAD,
    dt: float = DEFAULT_DT,
    vehicle: VehicleParams = VehicleParams(),
    camera: CameraConfig = CameraConfig(),
    record_masks: bool = True,
) -> DatasetManifest:
    """Drive the expert from a seeded centreline pose and record every frame.

    Labels are the noise-free expert commands; the executed command carries
    Gaussian exploration noise. Writes ``frames/``, optional ``masks/`` and
    ``labels.csv`` under ``out_dir``.
    """
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    if not 0.0 < throttle <= 1.0:
        raise ValueError("throttle must be in (0, 1]")
    root = Path(out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    if record_masks:
        (root / "masks").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    state = VehicleState(track.pose_at(rng.uniform(0.0, track.length)))
    records = []
    for i in range(n_frames):
        cte = cross_track_error(state, track)
        if abs(cte) >= track.lane_width:
            raise GenerationError(i, cte)
        name = frame_name(i + 1)
        save_png(root / "frames" / name, render_camera_u8(state, track, camera))
        if record_masks:
            save_png(root / "masks" / name, render_lane_mask(state, track, camera))
        label = pure_pursuit_steer(state, track, lookahead, vehicle.wheelbase)
        noise = rng.normal(0.0, steer_noise_std) if steer_noise_std > 0 else 0.0
        records.append(FrameRecord(name, throttle, label))
        state = step_kinematics(state, clamp_steering(label + noise), throttle, dt, vehicle)
    manifest = DatasetManifest(root, records, make_meta(track.kind, seed))
    write_dataset(manifest)
    return manifest
