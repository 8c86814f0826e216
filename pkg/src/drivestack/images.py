"""Image primitives: PPM I/O, color conversion, bilinear warps.

Everything here is deliberately hand-rolled with fixed conventions (half-pixel
sample centers, edge replication) because downstream tests pin exact values.
Float images are HWC in [0, 1]; files are 8-bit binary PPM (P6).
"""

from __future__ import annotations

import numpy as np


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into a uint8 [H,W,3] array."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # header tokens may be separated by any whitespace or comment lines
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    if len(data) - pos < h * w * 3:
        raise ValueError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def write_ppm(path, img) -> None:
    """Write [H,W,3] (uint8, or float in [0,1] quantized by round) as P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm needs [H,W,3], got {img.shape}")
    if img.dtype != np.uint8:
        img = quantize_u8(img)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def quantize_u8(img_float) -> np.ndarray:
    out = np.clip(np.asarray(img_float, dtype=np.float64), 0.0, 1.0)
    return np.round(out * 255.0).astype(np.uint8)


def to_float(img_u8) -> np.ndarray:
    return np.asarray(img_u8, dtype=np.float64) / 255.0


def read_image(path) -> np.ndarray:
    """Dispatch on extension; PPM is native, PNG needs an installed decoder."""
    p = str(path)
    if p.lower().endswith(".ppm"):
        return read_ppm(p)
    if p.lower().endswith(".png"):
        try:
            from PIL import Image
        except ImportError as e:
            raise RuntimeError(
                "PNG input needs the Pillow package; install it or use PPM") from e
        with Image.open(p) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    raise ValueError(f"unsupported image extension: {p}")


def rgb_to_hsv(img) -> np.ndarray:
    """Hexcone RGB -> HSV with every channel in [0, 1].

    Vectorized over [..., 3]; input must already be normalized to [0, 1].
    Hue of grays is 0 by convention.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] != 3:
        raise ValueError(f"rgb_to_hsv needs [...,3], got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("rgb_to_hsv expects values in [0, 1]")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    v = img.max(axis=-1)
    c = v - img.min(axis=-1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    safe_c = np.where(c > 0, c, 1.0)
    hr = np.mod((g - b) / safe_c, 6.0)
    hg = (b - r) / safe_c + 2.0
    hb = (r - g) / safe_c + 4.0
    h6 = np.where(v == r, hr, np.where(v == g, hg, hb))
    h = np.where(c > 0, h6 / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def resize_bilinear(img, out_h, out_w) -> np.ndarray:
    """Bilinear resample with half-pixel-aligned sample centers.

    Output pixel (i, j) samples the source at
    ((i + 0.5) * H/out_h - 0.5, (j + 0.5) * W/out_w - 0.5), clamped to the
    valid range (edge replication outside).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
        squeeze = True
    else:
        squeeze = False
    h, w = img.shape[:2]
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    out = _sample_bilinear(img, sy[:, None] * np.ones((1, out_w)),
                           sx[None, :] * np.ones((out_h, 1)))
    return out[..., 0] if squeeze else out


def _sample_bilinear(img, yy, xx):
    """Sample img (H,W,C) at float coords (yy, xx), edge-replicated."""
    h, w = img.shape[:2]
    y0 = np.floor(yy).astype(np.int64)
    x0 = np.floor(xx).astype(np.int64)
    fy = yy - y0
    fx = xx - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(np.where(y0 < 0, 0.0, np.where(y0 >= h - 1, 1.0, fy)), 0.0, 1.0)[..., None]
    fx = np.clip(np.where(x0 < 0, 0.0, np.where(x0 >= w - 1, 1.0, fx)), 0.0, 1.0)[..., None]
    top = img[y0c, x0c] * (1 - fx) + img[y0c, x1c] * fx
    bot = img[y1c, x0c] * (1 - fx) + img[y1c, x1c] * fx
    return top * (1 - fy) + bot * fy


def squeeze_resize(img, side) -> np.ndarray:
    """Resample to a square side x side regardless of input aspect ratio."""
    return resize_bilinear(img, side, side)


def flip_horizontal(img) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img)[:, ::-1, :])


def rotate_about_center(img, angle_deg) -> np.ndarray:
    """Rotate by angle_deg (counterclockwise positive) about the image center.

    Inverse-mapped bilinear sampling with edge replication, so the output
    shape equals the input shape and no fill color is introduced.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    a = np.deg2rad(float(angle_deg))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    dy = ii - cy
    dx = jj - cx
    # inverse rotation of output coords back into the source image
    sy = cy + np.cos(a) * dy + np.sin(a) * dx
    sx = cx - np.sin(a) * dy + np.cos(a) * dx
    return _sample_bilinear(img, sy, sx)
