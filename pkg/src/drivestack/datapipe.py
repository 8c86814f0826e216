"""Dataset plumbing: manifests, labeling, failure-case synthesis, shards.

A manifest is a CSV of camera frames with vehicle state; prep turns manifests
into binary training shards holding preprocessed image tensors plus labels,
speed-feedback windows, command labels, and sample weights.  Everything is
single-threaded and draws from one explicit RNG so identical inputs give
byte-identical shards.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import images

CENTER, LEFT, RIGHT = "center", "left", "right"
CAMERAS = (CENTER, LEFT, RIGHT)
_CAMERA_CODE = {CENTER: 0, LEFT: 1, RIGHT: 2}
_CAMERA_NAME = {v: k for k, v in _CAMERA_CODE.items()}

ACCELERATE, DECELERATE, MAINTAIN = 0, 1, 2
COMMAND_NAMES = ("accelerate", "decelerate", "maintain")

MANIFEST_HEADER = ["timestamp_s", "trip_id", "camera", "image_path",
                   "steering_deg", "speed_mps"]


class ManifestError(ValueError):
    pass


@dataclass
class DrivingSample:
    timestamp_s: float
    trip_id: str
    camera: str
    image_path: str
    steering_deg: float
    speed_mps: float


def load_manifest(path) -> list[DrivingSample]:
    """Parse and validate a manifest CSV.

    Checks the exact header, camera names, non-negative speeds, and strictly
    increasing timestamps within each (trip, camera) stream.
    """
    path = Path(path)
    samples = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise ManifestError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            ts, trip, camera, img, steer, speed = row
            if camera not in CAMERAS:
                raise ManifestError(f"{path}:{lineno}: unknown camera {camera!r}")
            try:
                sample = DrivingSample(float(ts), trip, camera, img,
                                       float(steer), float(speed))
            except ValueError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from e
            if sample.speed_mps < 0:
                raise ManifestError(f"{path}:{lineno}: negative speed")
            if not sample.image_path:
                raise ManifestError(f"{path}:{lineno}: empty image path")
            samples.append(sample)
    last_t = {}
    for s in samples:
        key = (s.trip_id, s.camera)
        if key in last_t and s.timestamp_s <= last_t[key]:
            raise ManifestError(
                f"{path}: non-monotone timestamps in trip {s.trip_id!r} "
                f"camera {s.camera}")
        last_t[key] = s.timestamp_s
    return samples


def write_manifest(path, samples) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            writer.writerow([f"{s.timestamp_s:.6f}", s.trip_id, s.camera,
                             s.image_path, f"{s.steering_deg:.6f}",
                             f"{s.speed_mps:.6f}"])


def group_streams(samples) -> dict:
    """(trip_id, camera) -> samples in timestamp order (validated earlier)."""
    streams = {}
    for s in samples:
        streams.setdefault((s.trip_id, s.camera), []).append(s)
    return streams


# ---------------------------------------------------------------------------
# labeling

def label_speed_command(speed_now, speed_next, interval_s, threshold_mps2=0.25):
    """Mean acceleration over the interval, thresholded into a command.

    Exactly hitting the threshold counts as maintain; only strictly greater
    accelerations flip the label.
    """
    if interval_s <= 0:
        raise ValueError("interval must be positive")
    accel = (speed_next - speed_now) / interval_s
    if accel > threshold_mps2:
        return ACCELERATE
    if accel < -threshold_mps2:
        return DECELERATE
    return MAINTAIN


def label_stream_commands(stream, *, interval_s=1.0, max_gap_s=0.1,
                          threshold_mps2=0.25):
    """Per-frame command labels for one stream; None where no valid successor.

    The successor is the frame nearest in time to t + interval_s; if even the
    nearest one is more than max_gap_s away the frame is skipped, which also
    drops the trailing interval of every stream.
    """
    ts = [s.timestamp_s for s in stream]
    out = []
    for i, s in enumerate(stream):
        target = s.timestamp_s + interval_s
        j = bisect_left(ts, target)
        best = None
        for cand in (j - 1, j):
            if 0 <= cand < len(ts) and cand != i:
                if best is None or abs(ts[cand] - target) < abs(ts[best] - target):
                    best = cand
        if best is None or abs(ts[best] - target) > max_gap_s:
            out.append(None)
        else:
            out.append(label_speed_command(s.speed_mps, stream[best].speed_mps,
                                           ts[best] - s.timestamp_s,
                                           threshold_mps2))
    return out


def build_feedback_window(speeds, index, n=10) -> np.ndarray:
    """The n speeds strictly before ``index``, oldest first.

    Left-pads by replicating the earliest available speed; at index 0 that is
    speeds[0] itself, the only defensible stand-in for an empty history.
    """
    if not 0 <= index < len(speeds):
        raise IndexError(f"index {index} out of range for {len(speeds)} speeds")
    prior = list(speeds[max(0, index - n):index])
    if not prior:
        prior = [speeds[0]]
    while len(prior) < n:
        prior.insert(0, prior[0])
    return np.asarray(prior, dtype=np.float64)


def filter_low_speed(samples, cutoff_mps=4.0):
    """Drop samples slower than the cutoff; the boundary itself is retained."""
    return [s for s in samples if s.speed_mps >= cutoff_mps]


# ---------------------------------------------------------------------------
# failure-case synthesis

def recovery_angle_deg(speed_mps, d_y_m=0.508, t_r_s=1.0) -> float:
    """Steering offset that returns a laterally displaced camera to center.

    arctan of (lateral offset / distance covered in the recovery time),
    in degrees.  Speed must be positive: the geometry degenerates at rest.
    """
    if speed_mps <= 0:
        raise ValueError("recovery angle needs a positive speed")
    return float(np.degrees(np.arctan(d_y_m / (speed_mps * t_r_s))))


def synthesize_side_label(steering_center_deg, speed_mps, camera, *,
                          d_y_m=0.508, t_r_s=1.0) -> float:
    """Steering label for a side camera frame (positive steering = left turn).

    The right camera rides right of the lane center, so its recovery steers
    left: center label plus the recovery angle.  The left camera mirrors it.
    """
    delta = recovery_angle_deg(speed_mps, d_y_m, t_r_s)
    if camera == RIGHT:
        return steering_center_deg + delta
    if camera == LEFT:
        return steering_center_deg - delta
    raise ValueError(f"side synthesis is for left/right cameras, got {camera!r}")


def synthesize_speed_noise(window, rng, sigma=0.2) -> np.ndarray:
    """Gaussian jitter on a feedback window, clamped at zero.

    Train-time only: teaches the speed head to tolerate its own prediction
    error instead of trusting the window verbatim.
    """
    win = np.asarray(window, dtype=np.float64)
    noisy = win + rng.normal(0.0, sigma, size=win.shape)
    return np.maximum(noisy, 0.0)


def augment_sample(image, steering_deg, rng, *, flip_prob=0.5,
                   rotation_jitter_deg=2.0):
    """Random horizontal flip (negating steering) plus small rotation.

    Draws exactly two values from ``rng`` per call regardless of outcome,
    keeping downstream RNG consumption independent of the coin flips.
    """
    do_flip = rng.random() < flip_prob
    angle = rng.uniform(-rotation_jitter_deg, rotation_jitter_deg)
    if do_flip:
        image = images.flip_horizontal(image)
        steering_deg = -steering_deg
    if rotation_jitter_deg > 0:
        image = images.rotate_about_center(image, angle)
    return image, steering_deg


# ---------------------------------------------------------------------------
# trip-atomic splitting

def split_by_trip(trip_ids, ratios=(0.8, 0.1, 0.1), seed=0):
    """Partition unique trips into train/val/test, whole trips only.

    Counts follow the largest-remainder rule on the shuffled trip list, then
    any positive-ratio split left empty steals one trip from the largest
    split while that split can spare one.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    trips = sorted(set(trip_ids))
    rng = np.random.default_rng(seed)
    order = [trips[i] for i in rng.permutation(len(trips))]
    n = len(order)
    base = [int(np.floor(n * r)) for r in ratios]
    frac = [n * r - b for r, b in zip(ratios, base)]
    for _ in range(n - sum(base)):
        k = max(range(3), key=lambda i: (frac[i], -i))
        base[k] += 1
        frac[k] = -1.0
    for k in range(3):
        if ratios[k] > 0 and base[k] == 0:
            donor = max(range(3), key=lambda i: (base[i], -i))
            if base[donor] >= 2:
                base[donor] -= 1
                base[k] += 1
    a, b = base[0], base[0] + base[1]
    return order[:a], order[a:b], order[b:]


# ---------------------------------------------------------------------------
# shard format

_SHARD_MAGIC = b"EMVS"
_SHARD_VERSION = 1


@dataclass
class ShardRecord:
    trip_id: str
    camera: str
    timestamp_s: float
    steering_deg: float
    speed_mps: float
    target_speed_mps: float
    command: int
    weight: float
    window: np.ndarray      # float32 [window_n]
    image_u8: np.ndarray    # uint8 [side, side, 3], preprocessed HSV

    def image_float(self) -> np.ndarray:
        return self.image_u8.astype(np.float32) / np.float32(255.0)


@dataclass
class Shard:
    config_text: str
    input_side: int
    window_n: int
    records: list

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.config_text.encode("utf-8")).hexdigest()


def write_shard(path, records, config_text, input_side, window_n) -> None:
    """Length-prefixed little-endian shard with a config-hash header."""
    digest = hashlib.sha256(config_text.encode("utf-8")).digest()
    cfg_bytes = config_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_SHARD_MAGIC)
        f.write(struct.pack("<I", _SHARD_VERSION))
        f.write(digest)
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<HBI", input_side, window_n, len(records)))
        for r in records:
            if r.image_u8.shape != (input_side, input_side, 3):
                raise ValueError(f"record image shape {r.image_u8.shape} != side {input_side}")
            if r.window.shape != (window_n,):
                raise ValueError(f"record window shape {r.window.shape} != {window_n}")
            trip = r.trip_id.encode("utf-8")
            payload = struct.pack("<BBdH", _CAMERA_CODE[r.camera],
                                  int(r.command), r.timestamp_s, len(trip))
            payload += trip
            payload += struct.pack("<ffff", r.steering_deg, r.speed_mps,
                                   r.target_speed_mps, r.weight)
            payload += np.asarray(r.window, dtype="<f4").tobytes()
            payload += r.image_u8.tobytes()
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)


def read_shard(path) -> Shard:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _SHARD_MAGIC:
        raise ValueError(f"{path}: not a shard file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _SHARD_VERSION:
        raise ValueError(f"{path}: unsupported shard version {version}")
    digest = data[8:40]
    (cfg_len,) = struct.unpack_from("<I", data, 40)
    pos = 44
    config_text = data[pos:pos + cfg_len].decode("utf-8")
    pos += cfg_len
    if hashlib.sha256(config_text.encode("utf-8")).digest() != digest:
        raise ValueError(f"{path}: config hash mismatch")
    input_side, window_n, count = struct.unpack_from("<HBI", data, pos)
    pos += struct.calcsize("<HBI")
    records = []
    img_bytes = input_side * input_side * 3
    for _ in range(count):
        (plen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        payload = data[pos:pos + plen]
        if len(payload) != plen:
            raise ValueError(f"{path}: truncated record")
        pos += plen
        cam, command, ts, trip_len = struct.unpack_from("<BBdH", payload, 0)
        off = struct.calcsize("<BBdH")
        trip = payload[off:off + trip_len].decode("utf-8")
        off += trip_len
        steer, speed, target, weight = struct.unpack_from("<ffff", payload, off)
        off += 16
        window = np.frombuffer(payload, dtype="<f4", count=window_n, offset=off).copy()
        off += 4 * window_n
        image = np.frombuffer(payload, dtype=np.uint8, count=img_bytes,
                              offset=off).reshape(input_side, input_side, 3).copy()
        records.append(ShardRecord(trip, _CAMERA_NAME[cam], ts, steer, speed,
                                   target, command, weight, window, image))
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after last record")
    return Shard(config_text, input_side, window_n, records)


def records_by_stream(records) -> dict:
    """(trip, camera) -> records sorted by timestamp, for sequence assembly."""
    streams = {}
    for r in records:
        streams.setdefault((r.trip_id, r.camera), []).append(r)
    for key in streams:
        streams[key].sort(key=lambda r: r.timestamp_s)
    return streams


def sequence_anchors(stream, seq_len, spacing_s, tol_s=1e-6):
    """Indices [i_0..i_{seq_len-1}] per anchor whose frames sit spacing_s apart.

    An anchor is the newest frame; all seq_len - 1 predecessors must exist in
    the stream at exact multiples of spacing_s (within tol_s), so gaps from
    filtering simply disqualify nearby anchors.
    """
    ts = [r.timestamp_s for r in stream]
    index_at = {}
    anchors = []
    for i, t in enumerate(ts):
        index_at[round(t / tol_s)] = i  # quantized lookup key
    for i, t in enumerate(ts):
        chain = []
        ok = True
        for k in range(seq_len - 1, -1, -1):
            want = t - k * spacing_s
            j = index_at.get(round(want / tol_s))
            if j is None:
                ok = False
                break
            chain.append(j)
        if ok:
            anchors.append(chain)
    return anchors


# ---------------------------------------------------------------------------
# prep: manifest -> per-split shards

def preprocess_image(path, side) -> np.ndarray:
    """Load, resize square in RGB, convert to HSV, quantize to u8."""
    rgb = images.to_float(images.read_image(path))
    hsv = images.rgb_to_hsv(images.squeeze_resize(rgb, side))
    return images.quantize_u8(hsv)


@dataclass
class PrepReport:
    n_center: int
    n_synth: int
    n_dropped_command: int
    n_dropped_speed: int
    split_counts: dict
    command_histogram: dict

    def lines(self):
        yield (f"  center rows kept {self.n_center}  synthesized {self.n_synth}  "
               f"dropped: no-command {self.n_dropped_command}, "
               f"slow {self.n_dropped_speed}")
        hist = "  ".join(f"{COMMAND_NAMES[k]} {v}" for k, v in
                         sorted(self.command_histogram.items()))
        yield f"  commands: {hist}"
        for name, count in self.split_counts.items():
            yield f"  {name}: {count} records"


def prep_dataset(manifest_path, out_dir, cfg, *, image_root=None) -> PrepReport:
    """Label, filter, synthesize, split, and write train/val/test shards."""
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = Path(image_root) if image_root else manifest_path.parent

    samples = load_manifest(manifest_path)
    streams = group_streams(samples)
    rows = []  # ShardRecord
    n_center = n_synth = n_no_cmd = n_slow = 0
    for (trip, camera), stream in sorted(streams.items()):
        if camera != CENTER:
            continue
        commands = label_stream_commands(
            stream, interval_s=cfg.command_interval_s,
            max_gap_s=cfg.command_max_gap_s,
            threshold_mps2=cfg.accel_threshold_mps2)
        speeds = [s.speed_mps for s in stream]
        sides = {c: {s.timestamp_s: s for s in streams.get((trip, c), [])}
                 for c in (LEFT, RIGHT)}
        for i, s in enumerate(stream):
            if commands[i] is None or i + 1 >= len(stream):
                n_no_cmd += 1
                continue
            if s.speed_mps < cfg.low_speed_cutoff_mps:
                n_slow += 1
                continue
            window = build_feedback_window(speeds, i, cfg.speed_window)
            target_speed = stream[i + 1].speed_mps
            weight = sample_weight(s.steering_deg, cfg.angle_weight_step_deg,
                                   cfg.angle_weight_cap)
            rows.append(ShardRecord(
                trip, CENTER, s.timestamp_s, s.steering_deg, s.speed_mps,
                target_speed, commands[i], weight,
                window.astype(np.float32),
                preprocess_image(root / s.image_path, cfg.input_side)))
            n_center += 1
            if not cfg.synthesis or s.speed_mps < cfg.min_synthesis_speed_mps:
                continue
            for camera_side in (LEFT, RIGHT):
                side_sample = sides[camera_side].get(s.timestamp_s)
                if side_sample is None:
                    continue
                steer = synthesize_side_label(
                    s.steering_deg, s.speed_mps, camera_side,
                    d_y_m=cfg.camera_offset_m, t_r_s=cfg.recovery_time_s)
                rows.append(ShardRecord(
                    trip, camera_side, s.timestamp_s, steer, s.speed_mps,
                    target_speed, commands[i],
                    sample_weight(steer, cfg.angle_weight_step_deg,
                                  cfg.angle_weight_cap),
                    window.astype(np.float32),
                    preprocess_image(root / side_sample.image_path,
                                     cfg.input_side)))
                n_synth += 1

    train_trips, val_trips, test_trips = split_by_trip(
        [r.trip_id for r in rows], cfg.split_ratios, cfg.seed)
    config_text = cfg.text()
    split_counts = {}
    hist = {ACCELERATE: 0, DECELERATE: 0, MAINTAIN: 0}
    for r in rows:
        hist[r.command] += 1
    for name, trips in (("train", set(train_trips)), ("val", set(val_trips)),
                        ("test", set(test_trips))):
        part = [r for r in rows if r.trip_id in trips]
        write_shard(out_dir / f"{name}.shard", part, config_text,
                    cfg.input_side, cfg.speed_window)
        split_counts[name] = len(part)
    return PrepReport(n_center, n_synth, n_no_cmd, n_slow, split_counts, hist)


def sample_weight(steering_deg, step_deg=5.0, cap=4.0) -> float:
    """Emphasis weight 1 + |angle|/step, saturating at the cap."""
    return float(min(1.0 + abs(steering_deg) / step_deg, cap))
