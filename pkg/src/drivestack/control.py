"""Output shaping between the networks and the vehicle.

The steering smoother is a deadband plus exponential moving average, which
can only remove total variation from a signal, never add it: inside the
deadband the output repeats (zero increment), outside it moves alpha times
the gap, and |u_t - u_{t-1}| = alpha * |raw_t - u_{t-1}| <= |raw_t - u_{t-1}|
telescopes into TV(smoothed) <= TV(raw) for any input stream.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from . import datapipe as dp
from . import images
from . import models


class SteeringSmoother:
    """Deadband + EMA filter over successive steering commands.

    First call passes its input through untouched; afterwards a change
    smaller than the deadband holds the previous output, anything larger
    moves the output alpha of the way toward the raw command.
    """

    def __init__(self, alpha=0.2, deadband_deg=0.1):
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        if deadband_deg < 0.0:
            raise ValueError(f"deadband must be >= 0, got {deadband_deg}")
        self.alpha = float(alpha)
        self.deadband_deg = float(deadband_deg)
        self._last = None

    def reset(self) -> None:
        self._last = None

    def smooth(self, raw_deg) -> float:
        raw_deg = float(raw_deg)
        if not math.isfinite(raw_deg):
            raise ValueError(f"steering command must be finite, got {raw_deg}")
        if self._last is None:
            self._last = raw_deg
        elif abs(raw_deg - self._last) >= self.deadband_deg:
            self._last = self._last + self.alpha * (raw_deg - self._last)
        return self._last


def total_variation(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.abs(np.diff(v)).sum())


def command_to_setpoint(command, current_setpoint_mps, *, delta_mps=1.0) -> float:
    """Nudge the target speed by the command's step, floored at zero."""
    if command == dp.ACCELERATE:
        return current_setpoint_mps + delta_mps
    if command == dp.DECELERATE:
        return max(current_setpoint_mps - delta_mps, 0.0)
    if command == dp.MAINTAIN:
        return float(current_setpoint_mps)
    raise ValueError(f"unknown speed command {command!r}")


class ModelController:
    """Closed-loop driver around a multi-task checkpoint.

    Per frame: preprocess the camera image exactly like training, run the
    net, smooth the steering, clamp the speed target into [0, v_max], and
    append the clamped prediction to the rolling feedback window.  The
    window never sees ground truth, so prediction errors feed back into the
    next frame's input, which is the failure loop the window-noise training
    is meant to survive.
    """

    needs_frame = True

    def __init__(self, model, cfg=None):
        if model.kind != "mmmt":
            raise ValueError(
                f"the controller drives multi-task checkpoints, got {model.kind!r}")
        self.model = model
        self.cfg = cfg if cfg is not None else model.cfg
        self.smoother = SteeringSmoother(self.cfg.smoothing_alpha,
                                         self.cfg.deadband_deg)
        self.v_max = float(self.cfg.target_speed_max_mps)
        self._window = deque(maxlen=self.cfg.speed_window)

    def reset(self, initial_speed_mps) -> None:
        self.smoother.reset()
        self._window.clear()
        for _ in range(self.cfg.speed_window):
            self._window.append(float(initial_speed_mps))

    def window(self) -> np.ndarray:
        return np.asarray(self._window, dtype=np.float32)

    def act(self, frame_rgb, state) -> tuple[float, float]:
        """frame_rgb: float [H,W,3] in [0,1] straight from the renderer."""
        if not self._window:
            self.reset(state.speed_mps)
        hsv = images.rgb_to_hsv(
            images.squeeze_resize(frame_rgb, self.cfg.input_side))
        raw_steer, raw_speed = self.model.predict(
            hsv.astype(np.float32), self.window())
        steer = self.smoother.smooth(raw_steer)
        target = min(max(raw_speed, 0.0), self.v_max)
        self._window.append(target)
        return steer, target


def load_controller(checkpoint_path, cfg=None) -> ModelController:
    model = models.load_checkpoint(checkpoint_path)
    return ModelController(model, cfg)
