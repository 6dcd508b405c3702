"""Deterministic 2D track world.

Track geometry, kinematic bicycle stepping, a pinhole front-camera renderer
over the flat ground plane and the matching lane-boundary mask.

Conventions: world frame in meters centred on the map, heading measured
counterclockwise from +x, positive steering turns the car counterclockwise.
Tracks are stored in their travel direction, so the left side of a
counterclockwise loop is the inside of the loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

MAX_STEER = 0.5
TRACK_KINDS = ("ellipse", "o", "s")
MAP_EXTENT = (2.8, 1.8)
LANE_WIDTH = 0.25

# 8-bit palette, so float renders survive PNG quantisation exactly.
SKY = (200, 205, 215)
FLOOR = (96, 110, 80)
ROAD = (70, 70, 75)
YELLOW = (235, 200, 20)
RED = (200, 30, 30)
WHITE = (240, 240, 240)

# Pixel classes produced by the rasteriser.
_SKY, _FLOOR, _ROAD, _YELLOW, _RED, _WHITE = range(6)
_PALETTE_U8 = np.array([SKY, FLOOR, ROAD, YELLOW, RED, WHITE], dtype=np.uint8)
_PALETTE = _PALETTE_U8.astype(np.float32) / 255.0
BOUNDARY_COLORS = {"center": "yellow", "outer": "red", "inner": "white"}


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))


@dataclass(frozen=True)
class VehicleState:
    pose: Pose
    speed: float = 0.0
    steering: float = 0.0

    def __post_init__(self):
        if not self.speed >= 0.0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")
        object.__setattr__(self, "steering", clamp_steering(self.steering))


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 0.26
    v_max: float = 1.0


@dataclass(frozen=True)
class CameraConfig:
    """Pinhole camera rigidly mounted at the vehicle pose."""

    height_px: int = 224
    width_px: int = 224
    mount_height: float = 0.19
    pitch_deg: float = -15.0
    hfov_deg: float = 120.0
    draw_distance: float = 2.0
    forward_offset: float = 0.0


def clamp_steering(delta: float) -> float:
    return min(MAX_STEER, max(-MAX_STEER, float(delta)))


# --------------------------------------------------------------------------
# Tracks


@dataclass(frozen=True, eq=False)
class TrackSpec:
    """Closed centreline with boundary lines at +/- ``lane_width``.

    ``points`` is an (N, 2) polyline whose last point repeats the first.
    ``swapped`` flags the samples whose inner/outer boundary colours trade
    places. ``sections`` maps a name to an arc-length interval.
    """

    kind: str
    points: np.ndarray
    lane_width: float = LANE_WIDTH
    line_width: float = 0.03
    swapped: np.ndarray | None = None
    extent: tuple[float, float] = MAP_EXTENT
    tiles: int = 6
    sections: dict[str, tuple[float, float]] = field(default_factory=dict)
    boundary_colors: dict[str, str] = field(default_factory=lambda: dict(BOUNDARY_COLORS))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
            raise ValueError("centerline must be an (N, 2) array with N >= 4")
        if np.linalg.norm(pts[0] - pts[-1]) > 1e-9:
            raise ValueError("centerline is not closed")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        sw = np.zeros(len(pts), dtype=bool) if self.swapped is None else np.asarray(self.swapped, dtype=bool)
        if sw.shape != (len(pts),):
            raise ValueError("swapped flags must match the number of centerline points")
        sw.setflags(write=False)
        object.__setattr__(self, "swapped", sw)
        object.__setattr__(self, "extent", (float(self.extent[0]), float(self.extent[1])))

    @cached_property
    def seg_vec(self) -> np.ndarray:
        return np.diff(self.points, axis=0)

    @cached_property
    def seg_len(self) -> np.ndarray:
        return np.hypot(self.seg_vec[:, 0], self.seg_vec[:, 1])

    @cached_property
    def arc(self) -> np.ndarray:
        """Cumulative arc length at every sample, ``arc[0] == 0``."""
        return np.concatenate([[0.0], np.cumsum(self.seg_len)])

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    @cached_property
    def ccw(self) -> bool:
        x, y = self.points[:, 0], self.points[:, 1]
        return float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1])) > 0.0

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.points[:-1])

    def validate(self) -> None:
        """Raise ValueError unless the track invariants hold."""
        if self.seg_len.max() >= self.lane_width:
            raise ValueError("adjacent centerline samples must be closer than lane_width")
        half = np.array(self.extent) / 2.0
        if np.any(np.abs(self.points) > half + 1e-12):
            raise ValueError("centerline leaves the map extent")

    def point_at(self, s: float) -> tuple[np.ndarray, float]:
        """Position and tangent heading at arc length ``s`` (wrapped)."""
        s = float(s) % self.length
        j = int(np.searchsorted(self.arc, s, side="right")) - 1
        j = min(max(j, 0), len(self.seg_len) - 1)
        t = (s - self.arc[j]) / self.seg_len[j]
        p = self.points[j] + t * self.seg_vec[j]
        d = self.seg_vec[j]
        return p, math.atan2(d[1], d[0])

    def pose_at(self, s: float) -> Pose:
        p, h = self.point_at(s)
        return Pose(float(p[0]), float(p[1]), h)

    def project(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest-point projection onto the centreline polyline.

        Returns signed lateral offset (positive to the left of travel),
        arc length of the foot point and the segment index, for an (M, 2)
        array of query points.
        """
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        n_seg = len(self.seg_len)
        _, nearest = self._tree.query(xy)
        cand = (nearest[:, None] + np.arange(-2, 2)[None, :]) % n_seg
        q = xy[:, None, :]
        a, d, L = self.points[cand], self.seg_vec[cand], self.seg_len[cand]
        rel = q - a
        t = np.clip((rel[..., 0] * d[..., 0] + rel[..., 1] * d[..., 1]) / (L * L), 0.0, 1.0)
        diff = rel - t[..., None] * d
        d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2
        k = np.argmin(d2, axis=1)
        rows = np.arange(len(k))
        t, L, d2 = t[rows, k], L[rows, k], d2[rows, k]
        dk, rk, jk = d[rows, k], rel[rows, k], cand[rows, k]
        cross = dk[:, 0] * rk[:, 1] - dk[:, 1] * rk[:, 0]
        off = np.where((t > 0.0) & (t < 1.0), cross / L, np.copysign(np.sqrt(d2), cross))
        return off, self.arc[jk] + t * L, jk

    _GRID = 0.005
    _PAD = 0.6

    @cached_property
    def _offset_field(self):
        """Signed offset and nearest segment on a 5 mm raster around the track."""
        lo = self.points.min(axis=0) - self._PAD
        hi = self.points.max(axis=0) + self._PAD
        shape = tuple(np.ceil((hi - lo) / self._GRID).astype(int) + 1)
        gx, gy = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
        nodes = lo + np.column_stack([gx.ravel(), gy.ravel()]) * self._GRID
        off, _, seg = self.project(nodes)
        return lo, off.reshape(shape), seg.reshape(shape).astype(np.int32)

    def sample_offsets(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinearly interpolated signed offset and nearest segment index.

        Points outside the raster get an infinite offset.
        """
        lo, field_, seg = self._offset_field
        u = (xy - lo) / self._GRID
        i0 = np.floor(u).astype(np.intp)
        inside = np.all((i0 >= 0) & (i0 < np.array(field_.shape) - 1), axis=1)
        off = np.full(len(xy), np.inf)
        segs = np.zeros(len(xy), dtype=np.intp)
        i, k = i0[inside, 0], i0[inside, 1]
        fx, fy = u[inside, 0] - i, u[inside, 1] - k
        off[inside] = (
            field_[i, k] * (1 - fx) * (1 - fy)
            + field_[i + 1, k] * fx * (1 - fy)
            + field_[i, k + 1] * (1 - fx) * fy
            + field_[i + 1, k + 1] * fx * fy
        )
        segs[inside] = seg[i + np.rint(fx).astype(np.intp), k + np.rint(fy).astype(np.intp)]
        return off, segs

    def signed_curvature(self) -> np.ndarray:
        """Finite-difference signed curvature at each interior sample."""
        p = self.points[:-1]
        prev, nxt = np.roll(p, 1, axis=0), np.roll(p, -1, axis=0)
        a, b = p - prev, nxt - p
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        la, lb = np.hypot(*a.T), np.hypot(*b.T)
        lc = np.hypot(*(nxt - prev).T)
        return 2.0 * cross / (la * lb * lc)

    # -- serialisation -----------------------------------------------------

    def save(self, path: str | Path) -> Path:
        """Write the track as ``key = value`` lines followed by the point list."""
        path = Path(path)
        lines = [
            "# steerclone track v1",
            f"kind = {self.kind}",
            f"lane_width = {self.lane_width!r}",
            f"line_width = {self.line_width!r}",
            f"extent = {self.extent[0]!r} {self.extent[1]!r}",
            f"tiles = {self.tiles}",
        ]
        for name, (s0, s1) in self.sections.items():
            lines.append(f"section = {name} {s0!r} {s1!r}")
        lines.append(f"points = {len(self.points)}")
        lines.extend(f"{x!r} {y!r} {int(f)}" for (x, y), f in zip(self.points.tolist(), self.swapped))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> TrackSpec:
        text = Path(path).read_text().splitlines()
        kw: dict = {"sections": {}}
        pts, flags = [], []
        n_points = None
        for lineno, raw in enumerate(text, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if n_points is not None:
                parts = line.split()
                if len(parts) not in (2, 3):
                    raise ValueError(f"{path}:{lineno}: expected 'x y [swapped]'")
                pts.append((float(parts[0]), float(parts[1])))
                flags.append(bool(int(parts[2])) if len(parts) == 3 else False)
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            if key == "kind":
                kw["kind"] = value
            elif key in ("lane_width", "line_width"):
                kw[key] = float(value)
            elif key == "extent":
                w, h = value.split()
                kw["extent"] = (float(w), float(h))
            elif key == "tiles":
                kw["tiles"] = int(value)
            elif key == "section":
                name, s0, s1 = value.split()
                kw["sections"][name] = (float(s0), float(s1))
            elif key == "points":
                n_points = int(value)
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        if n_points is None or len(pts) != n_points:
            raise ValueError(f"{path}: expected {n_points} points, found {len(pts)}")
        return cls(points=np.array(pts), swapped=np.array(flags), **kw)


def _turtle(start, heading, segments, ds):
    """Sample a chain of ('line', length) / ('arc', radius, signed_angle) pieces.

    Returns points and, per point, the index of the piece it belongs to.
    """
    x, y = start
    th = heading
    pts, tags = [(x, y)], [0]
    for k, seg in enumerate(segments):
        if seg[0] == "line":
            length = seg[1]
            n = max(1, math.ceil(length / ds))
            for i in range(1, n + 1):
                u = length * i / n
                pts.append((x + u * math.cos(th), y + u * math.sin(th)))
                tags.append(k)
            x, y = pts[-1]
        else:
            _, r, ang = seg
            side = math.copysign(1.0, ang)
            cx, cy = x - side * r * math.sin(th), y + side * r * math.cos(th)
            n = max(2, math.ceil(r * abs(ang) / ds))
            phi0 = th - side * math.pi / 2
            for i in range(1, n + 1):
                phi = phi0 + ang * i / n
                pts.append((cx + r * math.cos(phi), cy + r * math.sin(phi)))
                tags.append(k)
            x, y = pts[-1]
            th += ang
    return np.array(pts), np.array(tags)


def build_track(kind: str, *, ds: float = 0.004) -> TrackSpec:
    """One of the three built-in maps, driven counterclockwise.

    ellipse: semi-axes 1.15 x 0.65 m, so the outer boundary touches the
    2.8 x 1.8 m extent. o: circle of radius 0.45 m, tighter than the
    pursuit expert can follow without saturating the steering. s: a loop whose top
    side carries an S-bend (left arc then right arc, radius 0.6 m); the
    boundary colours are swapped along the right-hand arc.
    """
    if kind == "ellipse":
        a, b = 1.15, 0.65
        n = max(256, math.ceil(2 * math.pi * a / ds))
        t = np.linspace(0.0, 2 * math.pi, n + 1)
        pts = np.column_stack([a * np.cos(t), b * np.sin(t)])
        pts[-1] = pts[0]
        track = TrackSpec("ellipse", pts)
    elif kind == "o":
        r = 0.45
        n = max(256, math.ceil(2 * math.pi * r / ds))
        t = np.linspace(0.0, 2 * math.pi, n + 1)
        pts = np.column_stack([r * np.cos(t), r * np.sin(t)])
        pts[-1] = pts[0]
        track = TrackSpec("o", pts)
    elif kind == "s":
        track = _build_s(ds)
    else:
        raise ValueError(f"unknown track kind {kind!r}; expected one of {TRACK_KINDS}")
    track.validate()
    return track


def _build_s(ds: float) -> TrackSpec:
    half_w, half_h = MAP_EXTENT[0] / 2 - LANE_WIDTH, MAP_EXTENT[1] / 2 - LANE_WIDTH
    r_right = half_h                         # right end semicircle
    r_s, beta = 0.6, math.radians(40.0)      # S-bend arcs
    drop = 2 * r_s * (1 - math.cos(beta))
    r_left = r_right - drop / 2              # left end semicircle
    x_right = half_w - r_right
    x_left = -half_w + r_left
    top_straight = (x_right - 2 * r_s * math.sin(beta)) - x_left
    segments = [
        ("line", x_right - x_left),
        ("arc", r_right, math.pi),
        ("arc", r_s, beta),
        ("arc", r_s, -beta),
        ("line", top_straight),
        ("arc", r_left, math.pi),
    ]
    pts, tags = _turtle((x_left, -half_h), 0.0, segments, ds)
    pts[-1] = pts[0]
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    first = np.nonzero(tags == 2)[0][0] - 1
    s0, s1 = arc[first], arc[tags == 3][-1]
    swapped = tags == 3
    return TrackSpec("s", pts, swapped=swapped, sections={"s_bend": (float(s0), float(s1))})


# --------------------------------------------------------------------------
# Kinematics


def step_kinematics(
    state: VehicleState,
    steering_cmd: float,
    throttle_cmd: float,
    dt: float,
    params: VehicleParams = VehicleParams(),
) -> VehicleState:
    """One explicit-Euler step of the kinematic bicycle (rear-axle reference)."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if not 0.0 <= throttle_cmd <= 1.0:
        raise ValueError(f"throttle must be in [0, 1], got {throttle_cmd}")
    delta = clamp_steering(steering_cmd)
    v = throttle_cmd * params.v_max
    p = state.pose
    x = p.x + v * math.cos(p.heading) * dt
    y = p.y + v * math.sin(p.heading) * dt
    th = p.heading + v * math.tan(delta) / params.wheelbase * dt
    return VehicleState(Pose(x, y, th), v, delta)


def cross_track_error(state: VehicleState, track: TrackSpec) -> float:
    off, _, _ = track.project(np.array([[state.pose.x, state.pose.y]]))
    return float(off[0])


# --------------------------------------------------------------------------
# Rendering


@lru_cache(maxsize=8)
def _ground_rays(cam: CameraConfig):
    """Vehicle-frame ground hit (forward, left) for every pixel that sees the floor
    within draw distance, plus the flat pixel indices of those hits and of the sky."""
    H, W = cam.height_px, cam.width_px
    f = (W / 2.0) / math.tan(math.radians(cam.hfov_deg) / 2.0)
    xc = (np.arange(W) - (W - 1) / 2.0) / f
    yc = (np.arange(H) - (H - 1) / 2.0) / f
    xc, yc = np.meshgrid(xc, yc)
    psi = math.radians(-cam.pitch_deg)
    down = math.sin(psi) + yc * math.cos(psi)
    ground = down > 1e-9
    t = np.where(ground, cam.mount_height / np.where(ground, down, 1.0), np.inf)
    fwd = t * (math.cos(psi) - yc * math.sin(psi))
    left = -t * xc
    dist = np.hypot(fwd, left)
    hit = ground & (dist <= cam.draw_distance)
    flat_hit = np.flatnonzero(hit)
    flat_sky = np.flatnonzero(~ground)
    out = (fwd.ravel()[flat_hit] + cam.forward_offset, left.ravel()[flat_hit], flat_hit, flat_sky)
    for arr in out:
        arr.setflags(write=False)
    return out


def _classify(state: VehicleState, track: TrackSpec, cam: CameraConfig) -> np.ndarray:
    fwd, left, flat_hit, flat_sky = _ground_rays(cam)
    p = state.pose
    c, s = math.cos(p.heading), math.sin(p.heading)
    xy = np.empty((len(fwd), 2))
    xy[:, 0] = p.x + fwd * c - left * s
    xy[:, 1] = p.y + fwd * s + left * c
    lw, hw = track.lane_width, track.line_width / 2.0
    off, seg = track.sample_offsets(xy)
    cls = np.where(np.abs(off) <= lw + hw, _ROAD, _FLOOR)
    left_outer = track.swapped[seg] ^ (not track.ccw)
    left_color = np.where(left_outer, _RED, _WHITE)
    right_color = np.where(left_outer, _WHITE, _RED)
    cls = np.where(np.abs(off - lw) <= hw, left_color, cls)
    cls = np.where(np.abs(off + lw) <= hw, right_color, cls)
    cls = np.where(np.abs(off) <= hw, _YELLOW, cls)
    labels = np.full(cam.height_px * cam.width_px, _FLOOR, dtype=np.uint8)
    labels[flat_sky] = _SKY
    labels[flat_hit] = cls
    return labels.reshape(cam.height_px, cam.width_px)


def render_camera_u8(state: VehicleState, track: TrackSpec, cam: CameraConfig = CameraConfig()) -> np.ndarray:
    """Camera frame as an (H, W, 3) uint8 array."""
    return _PALETTE_U8[_classify(state, track, cam)]


def render_camera(state: VehicleState, track: TrackSpec, cam: CameraConfig = CameraConfig()) -> np.ndarray:
    """Camera frame as a (3, H, W) float32 array in [0, 1]."""
    return np.ascontiguousarray(_PALETTE[_classify(state, track, cam)].transpose(2, 0, 1))


def render_lane_mask(
    state: VehicleState,
    track: TrackSpec,
    cam: CameraConfig = CameraConfig(),
    blur: int = 0,
) -> np.ndarray:
    """(1, H, W) float32 mask, 1 on any painted line and 0 elsewhere.

    ``blur`` > 1 applies a ``blur x blur`` box filter; the default keeps the
    mask exactly on the painted pixels.
    """
    labels = _classify(state, track, cam)
    mask = (labels >= _YELLOW).astype(np.float32)
    if blur > 1:
        from scipy.ndimage import uniform_filter

        mask = np.clip(uniform_filter(mask, size=blur, mode="constant"), 0.0, 1.0).astype(np.float32)
    return mask[None]


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8; HWC uint8 passes through."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    if image.ndim == 3 and image.shape[0] in (1, 3):
        image = image.transpose(1, 2, 0)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray) -> Path:
    path = Path(path)
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")
    return path
