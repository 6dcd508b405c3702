"""On-disk demonstration datasets.

Layout of a dataset directory::

    labels.csv        Frame,Throttle,Steering  (9 decimal digits)
    frames/<Frame>    224x224 RGB PNG per row
    masks/<Frame>     optional 224x224 grayscale lane-boundary mask
    meta.json         {"track_kind", "seed", "created_at"}
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

HEADER = ["Frame", "Throttle", "Steering"]
ZERO_THROTTLE_EPS = 1e-6
STEER_LIMIT = 0.5
IMAGE_SIZE = 224


class DatasetParseError(ValueError):
    pass


class DatasetValidationError(ValueError):
    pass


def frame_name(index: int) -> str:
    return f"Frame_{index:06d}.png"


def make_meta(track_kind: str, seed: int, created_at: datetime | None = None) -> dict:
    when = created_at or datetime.now(timezone.utc)
    return {"track_kind": track_kind, "seed": seed, "created_at": when.isoformat(timespec="seconds")}


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    throttle: float
    steering: float

    def __post_init__(self):
        object.__setattr__(self, "throttle", round(float(self.throttle), 9))
        object.__setattr__(self, "steering", round(float(self.steering), 9))
        if not -STEER_LIMIT <= self.steering <= STEER_LIMIT:
            raise DatasetValidationError(f"{self.frame_id}: steering {self.steering} outside [-0.5, 0.5]")
        if not 0.0 <= self.throttle <= 1.0:
            raise DatasetValidationError(f"{self.frame_id}: throttle {self.throttle} outside [0, 1]")


@dataclass(frozen=True)
class FrameArrays:
    """Dataset held in memory: uint8 NHWC images, float steering, optional masks."""

    images: np.ndarray
    steering: np.ndarray
    frame_ids: list[str] = field(default_factory=list)
    masks: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> FrameArrays:
        idx = np.asarray(idx)
        return FrameArrays(
            self.images[idx],
            self.steering[idx],
            [self.frame_ids[i] for i in idx] if self.frame_ids else [],
            None if self.masks is None else self.masks[idx],
        )


@dataclass
class DatasetManifest:
    root_dir: Path
    records: list[FrameRecord]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root_dir = Path(self.root_dir)
        self._arrays: FrameArrays | None = None

    def __len__(self) -> int:
        return len(self.records)

    def frame_path(self, frame_id: str) -> Path:
        p = self.root_dir / "frames" / frame_id
        return p if p.exists() else self.root_dir / frame_id

    def mask_path(self, frame_id: str) -> Path:
        return self.root_dir / "masks" / frame_id

    @property
    def has_masks(self) -> bool:
        return bool(self.records) and all(self.mask_path(r.frame_id).exists() for r in self.records)

    def with_records(self, records: list[FrameRecord]) -> DatasetManifest:
        return DatasetManifest(self.root_dir, list(records), dict(self.meta))

    def load_arrays(self) -> FrameArrays:
        """Decode every frame (and mask, when present) into memory; cached."""
        if self._arrays is None:
            n = len(self.records)
            images = np.empty((n, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
            for i, r in enumerate(self.records):
                images[i] = _read_rgb(self.frame_path(r.frame_id))
            masks = None
            if self.has_masks:
                masks = np.empty((n, IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
                for i, r in enumerate(self.records):
                    masks[i] = np.asarray(Image.open(self.mask_path(r.frame_id)).convert("L"))
            steering = np.array([r.steering for r in self.records], dtype=np.float64)
            self._arrays = FrameArrays(images, steering, [r.frame_id for r in self.records], masks)
        return self._arrays


def as_frames(data) -> FrameArrays:
    if isinstance(data, FrameArrays):
        return data
    if isinstance(data, DatasetManifest):
        return data.load_arrays()
    raise TypeError(f"expected DatasetManifest or FrameArrays, got {type(data).__name__}")


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise OSError(f"cannot read frame {path.name}: {exc}") from exc
    if arr.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise DatasetValidationError(f"{path.name}: expected 224x224 RGB, got {arr.shape}")
    return arr


def write_dataset(manifest: DatasetManifest) -> Path:
    """Write ``labels.csv`` and ``meta.json``; frame PNGs must already exist."""
    root = manifest.root_dir
    for r in manifest.records:
        if not manifest.frame_path(r.frame_id).is_file():
            raise FileNotFoundError(f"missing image for frame {r.frame_id} under {root}")
    root.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for r in manifest.records:
        writer.writerow([r.frame_id, f"{r.throttle:.9f}", f"{r.steering:.9f}"])
    path = root / "labels.csv"
    path.write_text(buf.getvalue())
    if manifest.meta:
        (root / "meta.json").write_text(json.dumps(manifest.meta, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(path: str | Path, *, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    root, csv_path = (path.parent, path) if path.suffix == ".csv" else (path, path / "labels.csv")
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != HEADER:
        raise DatasetParseError(f"{csv_path}:1: expected header {','.join(HEADER)}")
    records, seen = [], set()
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != 3:
            raise DatasetParseError(f"{csv_path}:{lineno}: expected 3 fields, got {len(row)}")
        name = row[0].strip()
        try:
            throttle, steering = float(row[1]), float(row[2])
        except ValueError:
            raise DatasetParseError(f"{csv_path}:{lineno}: non-numeric throttle/steering") from None
        try:
            rec = FrameRecord(name, throttle, steering)
        except DatasetValidationError as exc:
            raise DatasetValidationError(f"{csv_path}:{lineno}: {exc}") from None
        if name in seen:
            raise DatasetValidationError(f"{csv_path}:{lineno}: duplicate frame {name}")
        seen.add(name)
        records.append(rec)
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    manifest = DatasetManifest(root, records, meta)
    if check_files:
        for r in records:
            if not manifest.frame_path(r.frame_id).is_file():
                raise DatasetValidationError(f"{csv_path}: frame {r.frame_id} has no image file")
    return manifest


def filter_zero_velocity(manifest: DatasetManifest, eps: float = ZERO_THROTTLE_EPS) -> DatasetManifest:
    return manifest.with_records([r for r in manifest.records if r.throttle > eps])


def split_train_val(manifest: DatasetManifest, val_fraction: float = 0.2, seed: int = 0):
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    n = len(manifest.records)
    if n < 2:
        raise ValueError("need at least 2 records to split")
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    pick = lambda idx: manifest.with_records([manifest.records[i] for i in idx])  # noqa: E731
    return pick(order[n_val:]), pick(order[:n_val])


def steering_histogram(data, n_bins: int) -> list[tuple[float, int]]:
    """Equal-width bins over [-0.5, 0.5]; the last bin is closed on the right."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if isinstance(data, DatasetManifest):
        values = np.array([r.steering for r in data.records])
    else:
        values = np.asarray(data, dtype=np.float64)
    # compare against explicit edges; np.histogram's scaled index rounds values
    # just below an edge into the next bin
    edges = -STEER_LIMIT + 2 * STEER_LIMIT * np.arange(n_bins + 1) / n_bins
    inside = (values >= edges[0]) & (values <= edges[-1])
    idx = np.searchsorted(edges, values[inside], side="right") - 1
    counts = np.bincount(np.minimum(idx, n_bins - 1), minlength=n_bins)
    centers = (edges[:-1] + edges[1:]) / 2
    return [(float(c), int(k)) for c, k in zip(centers, counts)]
