"""Synthetic road world: track generation, rendering, vehicle, episodes.

Roads are piecewise straight/arc centerlines with C1 tangent continuity.
The renderer casts one ray per pixel from a pitched pinhole camera onto the
flat ground plane and colors each hit by its road-frame coordinates (s along,
d left of center), so frames are a pure function of pose and road: no
clutter, no randomness, byte-deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import datapipe as dp
from . import images

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return a - TWO_PI * np.floor((a + math.pi) / TWO_PI)


# ---------------------------------------------------------------------------
# road geometry

@dataclass(frozen=True)
class Segment:
    x0: float
    y0: float
    heading0: float
    length: float
    curvature: float  # 1/m, 0 for straight, positive bends left

    def point_at(self, s):
        """Pose (x, y, heading) at arclength s into the segment."""
        k = self.curvature
        if k == 0.0:
            return (self.x0 + s * math.cos(self.heading0),
                    self.y0 + s * math.sin(self.heading0),
                    self.heading0)
        h = self.heading0 + k * s
        return (self.x0 + (math.sin(h) - math.sin(self.heading0)) / k,
                self.y0 - (math.cos(h) - math.cos(self.heading0)) / k,
                h)

    def end_pose(self):
        return self.point_at(self.length)


class Road:
    """A segment chain plus lane geometry and nearest-point queries."""

    def __init__(self, segments, lane_half_width_m=1.75):
        if not segments:
            raise ValueError("a road needs at least one segment")
        self.segments = list(segments)
        self.lane_half_width_m = float(lane_half_width_m)
        bounds = [0.0]
        for seg in self.segments:
            bounds.append(bounds[-1] + seg.length)
        self.cum_s = np.asarray(bounds)
        self.length_m = float(bounds[-1])

    def pose_at(self, s):
        s = min(max(float(s), 0.0), self.length_m)
        i = min(int(np.searchsorted(self.cum_s, s, side="right")) - 1,
                len(self.segments) - 1)
        return self.segments[i].point_at(s - self.cum_s[i])

    def curvature_at(self, s):
        s = min(max(float(s), 0.0), self.length_m)
        i = min(int(np.searchsorted(self.cum_s, s, side="right")) - 1,
                len(self.segments) - 1)
        return self.segments[i].curvature

    def locate(self, points):
        """Nearest-centerline coordinates for world points [M, 2] (or [2]).

        Returns (s, d, tangent_heading) arrays: s is clamped to [0, length],
        d is the signed offset (positive left of the tangent direction).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        m = pts.shape[0]
        best_dist = np.full(m, np.inf)
        best_s = np.zeros(m)
        best_d = np.zeros(m)
        best_h = np.zeros(m)
        for seg, s_base in zip(self.segments, self.cum_s[:-1]):
            if seg.curvature == 0.0:
                tx, ty = math.cos(seg.heading0), math.sin(seg.heading0)
                rx = pts[:, 0] - seg.x0
                ry = pts[:, 1] - seg.y0
                s_loc = np.clip(rx * tx + ry * ty, 0.0, seg.length)
                nx = seg.x0 + s_loc * tx
                ny = seg.y0 + s_loc * ty
                heading = np.full(m, seg.heading0)
            else:
                k = seg.curvature
                cx = seg.x0 - math.sin(seg.heading0) / k
                cy = seg.y0 + math.cos(seg.heading0) / k
                theta0 = math.atan2(seg.y0 - cy, seg.x0 - cx)
                phi = np.arctan2(pts[:, 1] - cy, pts[:, 0] - cx)
                sweep = np.mod(np.sign(k) * (phi - theta0), TWO_PI) / abs(k)
                # angularly past the segment: snap to the closer endpoint
                over = sweep > seg.length
                wraparound = (TWO_PI / abs(k) - sweep) < (sweep - seg.length)
                s_loc = np.where(over, np.where(wraparound, 0.0, seg.length), sweep)
                heading = seg.heading0 + k * s_loc
                nx = seg.x0 + (np.sin(heading) - math.sin(seg.heading0)) / k
                ny = seg.y0 - (np.cos(heading) - math.cos(seg.heading0)) / k
            dx = pts[:, 0] - nx
            dy = pts[:, 1] - ny
            dist = np.hypot(dx, dy)
            cross = np.cos(heading) * dy - np.sin(heading) * dx
            d_signed = np.where(cross >= 0.0, dist, -dist)
            win = dist < best_dist
            best_dist = np.where(win, dist, best_dist)
            best_s = np.where(win, s_base + s_loc, best_s)
            best_d = np.where(win, d_signed, best_d)
            best_h = np.where(win, heading, best_h)
        if np.asarray(points).ndim == 1:
            return float(best_s[0]), float(best_d[0]), float(best_h[0])
        return best_s, best_d, best_h


def gen_road(seed, length_m, *, lane_half_width_m=1.75, straight_only=False,
             straight_range=(20.0, 80.0), radius_range=(30.0, 200.0),
             arc_angle_range=(0.3, 1.2)) -> Road:
    """Random alternating straight/arc chain, tangent-continuous throughout.

    Consecutive arcs alternate turn direction so the track wanders instead
    of spiraling.  The chain starts with a straight at the origin heading +x
    and stops once the total length covers length_m.
    """
    rng = np.random.default_rng([int(seed), 0x726F6164])
    segments = []
    x, y, heading = 0.0, 0.0, 0.0
    total = 0.0
    next_arc_sign = 1.0 if rng.random() < 0.5 else -1.0
    make_straight = True
    while total < length_m:
        if make_straight or straight_only:
            length = rng.uniform(*straight_range)
            seg = Segment(x, y, heading, length, 0.0)
        else:
            radius = rng.uniform(*radius_range)
            angle = rng.uniform(*arc_angle_range)
            seg = Segment(x, y, heading, radius * angle, next_arc_sign / radius)
            next_arc_sign = -next_arc_sign
        segments.append(seg)
        x, y, heading = seg.end_pose()
        total += seg.length
        make_straight = not make_straight
    return Road(segments, lane_half_width_m)


# ---------------------------------------------------------------------------
# rendering

_SKY = np.array([0.55, 0.70, 0.92])
_GRASS = np.array([0.33, 0.50, 0.27])
_ROAD = np.array([0.28, 0.28, 0.30])
_EDGE = np.array([0.90, 0.90, 0.86])
_DASH = np.array([0.85, 0.75, 0.30])

_EDGE_HALF_M = 0.10
_DASH_HALF_M = 0.08
_DASH_PERIOD_M = 4.0
_DASH_ON_M = 2.0
_MAX_GROUND_M = 250.0


class CameraModel:
    """Pinhole camera fixed to the vehicle; precomputes ground-ray offsets.

    For every pixel the LUT stores where its ray meets the ground plane in
    vehicle-frame coordinates (forward, left), or marks it sky.
    """

    def __init__(self, side=64, fov_deg=60.0, pitch_deg=12.0, height_m=1.6):
        self.side = int(side)
        self.fov_deg = float(fov_deg)
        self.pitch_deg = float(pitch_deg)
        self.height_m = float(height_m)
        half_tan = math.tan(math.radians(fov_deg) / 2.0)
        idx = (np.arange(self.side) + 0.5) / self.side * 2.0 - 1.0
        u = idx[None, :]   # +1 right edge
        v = idx[:, None]   # +1 bottom edge
        dx_c = np.ones((self.side, self.side))
        dy_c = np.broadcast_to(-u * half_tan, (self.side, self.side))
        dz_c = np.broadcast_to(-v * half_tan, (self.side, self.side))
        phi = math.radians(pitch_deg)
        dx = math.cos(phi) * dx_c + math.sin(phi) * dz_c
        dz = -math.sin(phi) * dx_c + math.cos(phi) * dz_c
        dy = dy_c
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dz < -1e-9, self.height_m / -dz, np.inf)
        gx = t * dx
        gy = t * dy
        self.sky = ~np.isfinite(t) | (np.hypot(gx, gy) > _MAX_GROUND_M)
        self.ground_fwd = np.where(self.sky, 0.0, gx)
        self.ground_left = np.where(self.sky, 0.0, gy)


def render_frame(road, x, y, heading, cam: CameraModel,
                 lateral_offset_m=0.0) -> np.ndarray:
    """RGB float frame [side, side, 3] from a camera at the given pose.

    lateral_offset_m displaces the camera along the vehicle's left axis,
    which is exactly how the side cameras are mounted.
    """
    sin_h, cos_h = math.sin(heading), math.cos(heading)
    cam_x = x + lateral_offset_m * -sin_h
    cam_y = y + lateral_offset_m * cos_h
    wx = cam_x + cam.ground_fwd * cos_h - cam.ground_left * sin_h
    wy = cam_y + cam.ground_fwd * sin_h + cam.ground_left * cos_h
    pts = np.stack([wx.reshape(-1), wy.reshape(-1)], axis=1)
    s, d, _ = road.locate(pts)
    s = s.reshape(cam.side, cam.side)
    d = d.reshape(cam.side, cam.side)
    half = road.lane_half_width_m
    abs_d = np.abs(d)
    img = np.empty((cam.side, cam.side, 3))
    img[:] = _GRASS
    on_road = abs_d <= half
    img[on_road] = _ROAD
    dash = (abs_d <= _DASH_HALF_M) & (np.mod(s, _DASH_PERIOD_M) < _DASH_ON_M)
    img[dash & on_road] = _DASH
    edge = np.abs(abs_d - half) <= _EDGE_HALF_M
    img[edge] = _EDGE
    img[cam.sky] = _SKY
    return img


# ---------------------------------------------------------------------------
# vehicle

@dataclass(frozen=True)
class VehicleParams:
    wheelbase_m: float = 2.7
    steer_ratio: float = 16.0
    a_max_mps2: float = 2.0


@dataclass
class SimState:
    x: float
    y: float
    heading_rad: float
    speed_mps: float
    t_s: float = 0.0


def step_vehicle(state, steering_wheel_deg, target_speed_mps, dt_s,
                 vp: VehicleParams) -> SimState:
    """Kinematic bicycle, explicit Euler, speed slewed toward the target.

    Position advances with the current speed and heading before either is
    updated, so path length is exactly the sum of v * dt.
    """
    if target_speed_mps < 0:
        raise ValueError("target speed must be >= 0")
    delta = math.radians(steering_wheel_deg / vp.steer_ratio)
    x = state.x + state.speed_mps * math.cos(state.heading_rad) * dt_s
    y = state.y + state.speed_mps * math.sin(state.heading_rad) * dt_s
    heading = state.heading_rad + state.speed_mps / vp.wheelbase_m \
        * math.tan(delta) * dt_s
    dv = target_speed_mps - state.speed_mps
    dv = max(-vp.a_max_mps2 * dt_s, min(vp.a_max_mps2 * dt_s, dv))
    speed = max(state.speed_mps + dv, 0.0)
    return SimState(x, y, heading, speed, state.t_s + dt_s)


def cross_track_error(road, state) -> float:
    """Signed lateral offset from the centerline, positive left."""
    _, d, _ = road.locate(np.array([state.x, state.y]))
    return d


def heading_error(road, state) -> float:
    _, _, h = road.locate(np.array([state.x, state.y]))
    return float(wrap_angle(state.heading_rad - h))


# ---------------------------------------------------------------------------
# drivers

class PurePursuitDriver:
    """Ground-truth chase of a lookahead point with a curve speed law.

    Serves as the data-collection expert and the closed-loop baseline; it
    reads the road directly, never the camera.
    """

    needs_frame = False

    def __init__(self, road, vp: VehicleParams, *, lookahead_m=10.0,
                 a_lat_max_mps2=1.2, cruise_mps=16.0, preview_m=30.0,
                 preview_step_m=2.0):
        self.road = road
        self.vp = vp
        self.lookahead_m = float(lookahead_m)
        self.a_lat_max = float(a_lat_max_mps2)
        self.cruise_mps = float(cruise_mps)
        self.preview_m = float(preview_m)
        self.preview_step_m = float(preview_step_m)

    def reset(self, initial_speed_mps) -> None:
        pass

    def act(self, frame, state) -> tuple[float, float]:
        s0, _, _ = self.road.locate(np.array([state.x, state.y]))
        gx, gy, _ = self.road.pose_at(s0 + self.lookahead_m)
        alpha = wrap_angle(math.atan2(gy - state.y, gx - state.x)
                           - state.heading_rad)
        kappa = 2.0 * math.sin(alpha) / self.lookahead_m
        delta = math.atan(kappa * self.vp.wheelbase_m)
        steering = math.degrees(delta) * self.vp.steer_ratio
        v_target = self.cruise_mps
        s = s0
        while s <= s0 + self.preview_m:
            k = abs(self.road.curvature_at(s))
            if k > 1e-9:
                v_target = min(v_target, math.sqrt(self.a_lat_max / k))
            s += self.preview_step_m
        return steering, v_target


# ---------------------------------------------------------------------------
# episodes

@dataclass(frozen=True)
class Perturbation:
    t_s: float
    lateral_m: float  # positive shoves the vehicle left


@dataclass
class EpisodeTrace:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    cte: np.ndarray
    heading_err: np.ndarray
    steering_deg: np.ndarray
    target_mps: np.ndarray
    lane_half_width_m: float

    @property
    def max_abs_cte(self) -> float:
        return float(np.abs(self.cte).max())

    @property
    def off_road(self) -> bool:
        return self.max_abs_cte > self.lane_half_width_m

    def summary_line(self) -> str:
        return (f"frames {len(self.t)} max|cte| {self.max_abs_cte:.3f} m "
                f"mean|cte| {float(np.abs(self.cte).mean()):.3f} m "
                f"off_road {'yes' if self.off_road else 'no'}")

    def write_csv(self, path) -> None:
        header = "t_s,x_m,y_m,heading_rad,speed_mps,cte_m,heading_err_rad,steering_deg,target_mps"
        cols = [self.t, self.x, self.y, self.heading, self.speed, self.cte,
                self.heading_err, self.steering_deg, self.target_mps]
        lines = [header]
        for i in range(len(self.t)):
            lines.append(",".join(f"{c[i]:.6f}" for c in cols))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_episode(road, controller, *, duration_s, dt_s, vp: VehicleParams,
                cam: CameraModel = None, init_speed_mps=8.0,
                perturbations=(), start_s=0.0) -> EpisodeTrace:
    """Drive the controller around the road and trace everything.

    The episode always runs to full duration: leaving the lane shows up in
    the trace (and the off_road flag) instead of aborting, so traces from
    different seeds stay comparable.  Perturbations displace the vehicle
    sideways at their scheduled tick, simulating an impulse.
    """
    if controller.needs_frame and cam is None:
        raise ValueError("this controller consumes frames: pass a CameraModel")
    x, y, heading = road.pose_at(start_s)
    state = SimState(x, y, heading, float(init_speed_mps))
    if hasattr(controller, "reset"):
        controller.reset(state.speed_mps)
    n = int(round(duration_s / dt_s))
    pend = sorted(perturbations, key=lambda p: p.t_s)
    cols = {k: np.zeros(n) for k in
            ("t", "x", "y", "heading", "speed", "cte", "heading_err",
             "steering_deg", "target_mps")}
    for i in range(n):
        while pend and pend[0].t_s <= state.t_s + 1e-9:
            shove = pend.pop(0)
            state.x += shove.lateral_m * -math.sin(state.heading_rad)
            state.y += shove.lateral_m * math.cos(state.heading_rad)
        frame = None
        if controller.needs_frame:
            frame = render_frame(road, state.x, state.y, state.heading_rad, cam)
        steer, target = controller.act(frame, state)
        s, d, h = road.locate(np.array([state.x, state.y]))
        cols["t"][i] = state.t_s
        cols["x"][i] = state.x
        cols["y"][i] = state.y
        cols["heading"][i] = state.heading_rad
        cols["speed"][i] = state.speed_mps
        cols["cte"][i] = d
        cols["heading_err"][i] = wrap_angle(state.heading_rad - h)
        cols["steering_deg"][i] = steer
        cols["target_mps"][i] = target
        state = step_vehicle(state, steer, target, dt_s, vp)
    return EpisodeTrace(cols["t"], cols["x"], cols["y"], cols["heading"],
                        cols["speed"], cols["cte"], cols["heading_err"],
                        cols["steering_deg"], cols["target_mps"],
                        road.lane_half_width_m)


# ---------------------------------------------------------------------------
# dataset generation

_CAMERA_OFFSETS = ((dp.CENTER, 0.0), (dp.LEFT, 1.0), (dp.RIGHT, -1.0))


def gen_dataset(out_dir, cfg) -> Path:
    """Drive the expert over fresh roads and dump frames plus a manifest.

    Three cameras per tick (center and +-camera_offset_m), one trip per
    road.  Returns the manifest path.  A README.txt records the config and
    its hash; nothing written here contains a timestamp.
    """
    out_dir = Path(out_dir)
    img_root = out_dir / "images"
    vp = VehicleParams(cfg.wheelbase_m, cfg.steer_ratio, cfg.a_max_mps2)
    cam = CameraModel(cfg.render_side, cfg.fov_deg, cfg.cam_pitch_deg,
                      cfg.cam_height_m)
    dt = 1.0 / cfg.sim_fps
    rows = []
    for k in range(cfg.n_roads):
        trip = f"trip{k:02d}"
        trip_dir = img_root / trip
        trip_dir.mkdir(parents=True, exist_ok=True)
        road = gen_road(cfg.road_seed + k, cfg.road_length_m,
                        lane_half_width_m=cfg.lane_half_width_m)
        driver = PurePursuitDriver(road, vp, lookahead_m=cfg.lookahead_m,
                                   a_lat_max_mps2=cfg.a_lat_max_mps2,
                                   cruise_mps=cfg.cruise_speed_mps)
        x, y, heading = road.pose_at(0.0)
        state = SimState(x, y, heading, cfg.init_speed_mps)
        for i in range(cfg.frames_per_road):
            steer, target = driver.act(None, state)
            for camera, sign in _CAMERA_OFFSETS:
                offset = sign * cfg.camera_offset_m
                frame = render_frame(road, state.x, state.y,
                                     state.heading_rad, cam, offset)
                rel = f"images/{trip}/{camera}_{i:06d}.ppm"
                images.write_ppm(out_dir / rel, frame)
                rows.append(dp.DrivingSample(i * dt, trip, camera, rel,
                                             steer, state.speed_mps))
            state = step_vehicle(state, steer, target, dt, vp)
    manifest = out_dir / "manifest.csv"
    dp.write_manifest(manifest, rows)
    (out_dir / "README.txt").write_text(
        "synthetic driving dataset\n"
        f"config sha256 {cfg.hash()}\n\n{cfg.text()}", encoding="utf-8")
    return manifest
