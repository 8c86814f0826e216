"""Flat ``key = value`` run configuration with a closed key registry.

Every artifact the pipeline writes embeds the sha256 hash of the canonical
config text, so two artifacts are comparable iff their hashes match.  Unknown
keys are rejected, never ignored: a typo must fail loudly instead of
silently training with a default.
"""

from __future__ import annotations

import hashlib


class ConfigError(ValueError):
    """Bad key, unparsable value, or malformed config text."""


def _parse_bool(s):
    s = s.strip().lower()
    if s in ("on", "true", "1", "yes"):
        return True
    if s in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off, got {s!r}")


def _parse_floats(s):
    return tuple(float(tok) for tok in s.split(",") if tok.strip())


def _parse_ints(s):
    return tuple(int(tok) for tok in s.split(",") if tok.strip())


def _parse_conv(s):
    """Conv stack spec: comma list of KxSxC (kernel x stride x channels)."""
    layers = []
    for tok in s.split(","):
        tok = tok.strip()
        if not tok:
            continue
        parts = tok.split("x")
        if len(parts) != 3:
            raise ConfigError(f"conv layer {tok!r} is not KxSxC")
        k, stride, ch = (int(p) for p in parts)
        if k < 1 or stride < 1 or ch < 1:
            raise ConfigError(f"conv layer {tok!r} has non-positive fields")
        layers.append((k, stride, ch))
    if not layers:
        raise ConfigError("conv_spec must list at least one layer")
    return tuple(layers)


def _fmt(value):
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{k}x{s}x{c}" for k, s, c in value)
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ConfigError(f"expected one of {options}, got {s!r}")
        return s
    return parse


# name -> (parser, default)
_SCHEMA = {
    # model
    "model": (_parse_choice("base", "command", "mmmt"), "mmmt"),
    "seed": (int, 0),
    "input_side": (int, 64),
    "conv_spec": (_parse_conv, ((7, 2, 16), (5, 2, 24), (3, 2, 32), (3, 1, 48), (3, 1, 48))),
    "fc_widths": (_parse_ints, (128, 64, 32)),
    "lstm_hidden": (int, 64),
    "seq_len": (int, 5),
    "seq_stride_frames": (int, 3),
    "speed_window": (int, 10),
    # negative means the per-model default (1.0 mmmt, 0.5 command)
    "task_weight": (float, -1.0),
    "angle_weight_step_deg": (float, 5.0),
    "angle_weight_cap": (float, 4.0),
    "speed_encoder_widths": (_parse_ints, (32, 32)),
    "speed_norm_mps": (float, 30.0),
    # training
    "optimizer": (_parse_choice("adam", "sgd"), "adam"),
    "lr": (float, 1e-4),
    "lr_schedule": (_parse_choice("constant", "cosine"), "constant"),
    "batch": (int, 32),
    "epochs": (int, 15),  # val angle MAE plateaus around here at default scale
    "augment": (_parse_bool, True),
    "rotation_jitter_deg": (float, 2.0),
    "flip_prob": (float, 0.5),
    "speed_noise_sigma": (float, 0.2),
    # labeling / synthesis / split
    "accel_threshold_mps2": (float, 0.25),
    "command_interval_s": (float, 1.0),
    "command_max_gap_s": (float, 0.1),
    "low_speed_cutoff_mps": (float, 4.0),
    "synthesis": (_parse_bool, True),
    "camera_offset_m": (float, 0.508),
    "recovery_time_s": (float, 1.0),
    "min_synthesis_speed_mps": (float, 1.0),
    "split_ratios": (_parse_floats, (0.8, 0.1, 0.1)),
    # control
    "smoothing_alpha": (float, 0.2),
    "deadband_deg": (float, 0.1),
    "command_speed_delta_mps": (float, 1.0),
    "target_speed_max_mps": (float, 30.0),
    # simulator / renderer / datagen
    "sim_fps": (int, 30),
    # must outlast frames_per_road / sim_fps seconds at cruise speed
    "road_length_m": (float, 1200.0),
    "lane_half_width_m": (float, 1.75),
    # more, shorter trips: the trip-atomic split needs enough units to deal
    "n_roads": (int, 6),
    "frames_per_road": (int, 1200),
    "road_seed": (int, 100),
    "render_side": (int, 64),
    "cam_height_m": (float, 1.6),
    "cam_pitch_deg": (float, 12.0),
    "fov_deg": (float, 60.0),
    "wheelbase_m": (float, 2.7),
    "steer_ratio": (float, 16.0),
    "a_max_mps2": (float, 2.0),
    # expert speed law; tuned so labeled commands cover every class well
    "a_lat_max_mps2": (float, 1.2),
    "lookahead_m": (float, 10.0),
    "cruise_speed_mps": (float, 16.0),
    "init_speed_mps": (float, 8.0),
    "duration_s": (float, 60.0),
}


class RunConfig:
    """Immutable-ish bag of typed settings; attribute access by key name."""

    def __init__(self, values=None):
        self._values = {k: default for k, (_, default) in _SCHEMA.items()}
        if values:
            for k, v in values.items():
                if k not in _SCHEMA:
                    raise ConfigError(f"unknown config key {k!r}")
                self._values[k] = v

    def __getattr__(self, name):
        values = object.__getattribute__(self, "_values")
        if name in values:
            return values[name]
        raise AttributeError(name)

    def set_text(self, key, raw):
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser, _ = _SCHEMA[key]
        try:
            self._values[key] = parser(raw)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from e

    @classmethod
    def from_text(cls, text):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            cfg.set_text(key.strip(), raw.strip())
        return cfg

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_text(f.read())

    def apply_overrides(self, pairs):
        """Apply CLI 'key=value' strings on top of the current values."""
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, _, raw = pair.partition("=")
            self.set_text(key.strip(), raw.strip())
        return self

    def text(self) -> str:
        """Canonical form: sorted keys, one 'key = value' per line."""
        return "".join(f"{k} = {_fmt(self._values[k])}\n" for k in sorted(self._values))

    def hash(self) -> str:
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()

    def copy(self) -> "RunConfig":
        return RunConfig(dict(self._values))

    def with_values(self, **kwargs) -> "RunConfig":
        out = self.copy()
        for k, v in kwargs.items():
            if k not in _SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            out._values[k] = v
        return out
