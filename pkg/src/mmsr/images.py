"""Image containers, file codecs, degradations and the synthetic pair generator.

Supported files:

* ``P5`` binary PGM, maxval 255 or 65535 (16-bit samples big-endian), 1 channel
* ``P6`` binary PPM, maxval 255, 3 channels
* ``F32R`` raw raster: b"F32R", u32 LE height, width, channels, then
  little-endian f32 samples, row-major with channels interleaved.  Values are
  the normalized [0, 1] samples; the format has no range field, so F32R images
  load with ``maxval = 1``.

In memory an :class:`Image` is channel-first float32 in [0, 1] plus the
container maximum used to restore native units.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

from .autodiff import pool_mean
from .errors import ArgumentError, FormatError

F32R_MAGIC = b"F32R"


@dataclass
class Image:
    data: np.ndarray  # C x H x W, float32 in [0, 1]
    maxval: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3 or self.data.shape[0] not in (1, 3):
            raise ArgumentError(f"image must be 1 or 3 channels x H x W, got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def native(self) -> np.ndarray:
        """Samples in container units (float64)."""
        return self.data.astype(np.float64) * self.maxval


# --------------------------------------------------------------------------
# codecs


class _Header:
    """Tokenizer for the whitespace/comment separated PNM header."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 2

    def token(self, what: str) -> tuple[int, int]:
        raw, pos = self.raw, self.pos
        while True:
            while pos < len(raw) and raw[pos:pos + 1].isspace():
                pos += 1
            if pos < len(raw) and raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
                continue
            break
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError(f"expected {what}", offset=start)
        if pos >= len(raw) or not raw[pos:pos + 1].isspace():
            raise FormatError(f"malformed {what}", offset=pos)
        self.pos = pos
        value = int(raw[start:pos])
        return value, start


def _load_pnm(raw: bytes) -> Image:
    magic = raw[:2]
    channels = 1 if magic == b"P5" else 3
    hdr = _Header(raw)
    width, at_w = hdr.token("width")
    height, at_h = hdr.token("height")
    maxval, at_m = hdr.token("maxval")
    if width < 1:
        raise FormatError("width must be positive", offset=at_w)
    if height < 1:
        raise FormatError("height must be positive", offset=at_h)
    allowed = (255, 65535) if channels == 1 else (255,)
    if maxval not in allowed:
        raise FormatError(f"unsupported maxval {maxval}", offset=at_m)
    start = hdr.pos + 1  # exactly one whitespace byte before the raster
    sample = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    need = count * sample.itemsize
    if len(raw) - start < need:
        raise FormatError(f"truncated raster: need {need} bytes, have {max(len(raw) - start, 0)}", offset=len(raw))
    vals = np.frombuffer(raw, dtype=sample, count=count, offset=start)
    if (vals > maxval).any():
        bad = int(np.argmax(vals > maxval))
        raise FormatError(f"sample exceeds maxval {maxval}", offset=start + bad * sample.itemsize)
    arr = vals.reshape(height, width, channels).transpose(2, 0, 1)
    return Image(arr.astype(np.float32) / np.float32(maxval), float(maxval))


def _load_f32r(raw: bytes) -> Image:
    if len(raw) < 16:
        raise FormatError("truncated F32R header", offset=len(raw))
    h, w, c = struct.unpack_from("<3I", raw, 4)
    if c not in (1, 3):
        raise FormatError(f"unsupported channel count {c}", offset=12)
    if h < 1 or w < 1:
        raise FormatError("empty raster", offset=4 if h < 1 else 8)
    need = h * w * c * 4
    if len(raw) - 16 != need:
        raise FormatError(f"raster size mismatch: need {need} bytes, have {len(raw) - 16}", offset=16)
    arr = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=16).reshape(h, w, c)
    ok = ((arr >= 0) & (arr <= 1)).reshape(-1)  # NaN fails both
    if not ok.all():
        raise FormatError("sample outside [0, 1]", offset=16 + 4 * int(np.argmin(ok)))
    return Image(arr.transpose(2, 0, 1).astype(np.float32), 1.0)


def load(path) -> Image:
    raw = Path(path).read_bytes()
    if raw[:4] == F32R_MAGIC:
        return _load_f32r(raw)
    if raw[:2] in (b"P5", b"P6"):
        return _load_pnm(raw)
    raise FormatError("unrecognized magic (expected P5, P6 or F32R)", offset=0)


def encode(img: Image, fmt: str) -> bytes:
    fmt = fmt.lower()
    if fmt == "f32r":
        hwc = np.ascontiguousarray(img.data.transpose(1, 2, 0), dtype="<f4")
        return F32R_MAGIC + struct.pack("<3I", img.height, img.width, img.channels) + hwc.tobytes()
    if fmt not in ("pgm", "ppm"):
        raise ArgumentError(f"unknown image format {fmt!r}")
    if fmt == "pgm" and img.channels != 1:
        raise ArgumentError("PGM needs a 1-channel image")
    if fmt == "ppm" and img.channels != 3:
        raise ArgumentError("PPM needs a 3-channel image")
    maxval = 65535 if (fmt == "pgm" and img.maxval > 255) else 255
    q = np.rint(np.clip(img.data, 0.0, 1.0).astype(np.float64) * maxval).transpose(1, 2, 0)
    body = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    magic = "P5" if fmt == "pgm" else "P6"
    return f"{magic}\n{img.width} {img.height}\n{maxval}\n".encode("ascii") + body


def format_for(path) -> str:
    ext = Path(path).suffix.lower()
    return {".pgm": "pgm", ".ppm": "ppm", ".f32": "f32r", ".f32r": "f32r"}.get(ext, "f32r")


def save(path, img: Image, fmt: str | None = None) -> None:
    Path(path).write_bytes(encode(img, fmt or format_for(path)))


# --------------------------------------------------------------------------
# degradations


def degrade_pool(hr: Image, scale: int) -> Image:
    if not isinstance(scale, (int, np.integer)) or scale < 1:
        raise ArgumentError(f"scale must be a positive integer, got {scale!r}")
    if hr.height % scale or hr.width % scale:
        raise ArgumentError(f"{hr.height}x{hr.width} not divisible by scale {scale}")
    return Image(pool_mean(hr.data.astype(np.float64), scale).astype(np.float32), hr.maxval)


def upsample_replicate(img: Image, scale: int) -> Image:
    return Image(np.repeat(np.repeat(img.data, scale, axis=1), scale, axis=2), img.maxval)


def add_gaussian_noise(guide: Image, sigma255: float, seed: int) -> Image:
    """i.i.d. Gaussian noise with std ``sigma255 / 255``, clipped back into [0, 1]."""
    if sigma255 < 0:
        raise ArgumentError(f"sigma255 must be >= 0, got {sigma255}")
    if sigma255 == 0:
        return Image(guide.data.copy(), guide.maxval)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(guide.data.shape) * (sigma255 / 255.0)
    return Image(np.clip(guide.data + noise, 0.0, 1.0), guide.maxval)


# --------------------------------------------------------------------------
# synthetic cross-modal pairs


def _random_polygon_mask(rng, yy, xx, size: int, min_r: float, max_r: float) -> np.ndarray:
    cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
    radius = rng.uniform(min_r, max_r) * size
    pts = np.stack([cy, cx]) + rng.uniform(-radius, radius, size=(7, 2))
    hull = ConvexHull(pts)
    eq = hull.equations  # a*y + b*x + c <= 0 inside
    inside = np.ones(yy.shape, dtype=bool)
    for a, b, c in eq:
        inside &= a * yy + b * xx + c <= 0
    return inside


def _plane(rng, yy, xx, size: int, amp: float) -> np.ndarray:
    gy, gx = rng.uniform(-amp, amp, size=2) / size
    return gy * (yy - size / 2) + gx * (xx - size / 2)


def synth_pair(seed: int, size: int = 64, scale: int = 4, n_shapes: int = 4, n_distractors: int = 3,
               texture: float = 0.0):
    """Generate (hr_source, guide, lr_source) sharing polygon edges.

    The source is piecewise smooth: a gentle background ramp with convex
    polygons painted on top, each carrying its own planar gradient.  The
    guide recolors every source region with a random RGB color (so intensity
    order is not preserved) and adds guide-only content: extra polygons and
    a striped texture patch that have no counterpart in the source.
    """
    if size % scale:
        raise ArgumentError(f"size {size} not divisible by scale {scale}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    labels = np.zeros((size, size), dtype=np.int64)
    source = 0.35 + _plane(rng, yy, xx, size, 0.2)
    for k in range(1, n_shapes + 1):
        mask = _random_polygon_mask(rng, yy, xx, size, 0.12, 0.3)
        level = rng.uniform(0.1, 0.9)
        source = np.where(mask, level + _plane(rng, yy, xx, size, 0.15), source)
        labels[mask] = k
    source = np.clip(source, 0.0, 1.0)

    palette = rng.uniform(0.05, 0.95, size=(n_shapes + 1, 3))
    guide = palette[labels].transpose(2, 0, 1)
    shade = 0.85 + 0.15 * np.cos(2.5 * source)  # mild, nonlinear in the source value
    guide = guide * shade[None]
    if texture:
        # smooth per-region color texture: a few random plane waves per channel
        tex = np.zeros((3, size, size))
        for ch in range(3):
            for _ in range(3):
                ky, kx = rng.normal(0.0, 2 * np.pi / 12, size=2)
                tex[ch] += np.cos(ky * yy + kx * xx + rng.uniform(0, 2 * np.pi))
        guide = guide + texture * tex / 3.0

    for _ in range(n_distractors):
        mask = _random_polygon_mask(rng, yy, xx, size, 0.06, 0.15)
        color = rng.uniform(0.05, 0.95, size=3)
        guide = np.where(mask[None], color[:, None, None], guide)
    # striped texture patch
    y0, x0 = rng.integers(0, size - size // 3, size=2)
    period = rng.uniform(3.0, 6.0)
    theta = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period))
    patch = np.zeros((size, size), dtype=bool)
    patch[y0:y0 + size // 3, x0:x0 + size // 3] = True
    guide = np.where(patch[None], guide * (0.6 + 0.4 * stripes)[None], guide)
    guide = np.clip(guide, 0.0, 1.0)

    gt = Image(source.astype(np.float32)[None], 1.0)
    guide_img = Image(guide.astype(np.float32), 1.0)
    return gt, guide_img, degrade_pool(gt, scale)


def edge_map(img: Image, thresh: float = 0.05) -> np.ndarray:
    """Pixels whose max-over-channels forward-difference magnitude exceeds ``thresh``."""
    d = img.data.astype(np.float64)
    gy = np.zeros_like(d)
    gx = np.zeros_like(d)
    gy[:, :-1] = np.abs(np.diff(d, axis=1))
    gx[:, :, :-1] = np.abs(np.diff(d, axis=2))
    return (np.maximum(gy, gx).max(axis=0)) > thresh
