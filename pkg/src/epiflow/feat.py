"""Per-pixel descriptors, average-pool pyramids and sub-pixel sampling.

The learned encoder of a trained model is replaced by a descriptor
*provider*: any deterministic callable mapping a grayscale raster at stage
resolution to an ``(H, W, C)`` array.  Whatever the provider returns is
made zero-mean and unit-norm per pixel, so dot-product similarities stay in
``[-1, 1]``.  Exported activations of a real encoder can be brought in with
:func:`read_feature_file`.

Descriptor file layout (little-endian)::

    offset  size  field
    0       4     magic  b"EFM1"
    4       4     width     uint32
    8       4     height    uint32
    12      2     channels  uint16
    14      2     scale     uint16
    16      ...   float32 data, row-major [y][x][c]

An all-zero channel vector marks a pixel without descriptor.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, InvalidInputError, ParseError

STAGE_SCALE = {"coarse": 16, "fine": 4}
PAD_MULTIPLE = 16
ZERO_EPS = 1e-6

FEATURE_MAGIC = b"EFM1"
_HEADER = struct.Struct("<4sIIHH")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # (H, W, C) float32, unit norm where valid, zeros elsewhere
    valid: np.ndarray  # (H, W) bool; False is the zero-descriptor flag
    scale: int

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    levels: list[FeatureMap]
    pooled: list[np.ndarray] = field(repr=False)  # pre-normalisation sums per level

    def __len__(self):
        return len(self.levels)


def to_gray(image) -> np.ndarray:
    img = np.asarray(image)
    if img.size == 0 or img.ndim not in (2, 3):
        raise InvalidInputError("empty or malformed image")
    img = img.astype(np.float64)
    if np.issubdtype(np.asarray(image).dtype, np.integer):
        img /= 255.0
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[..., 0]
        elif img.shape[2] >= 3:
            img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
        else:
            raise InvalidInputError("expected 1 or 3 channels")
    return img


def pad_to_multiple(img: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    h, w = img.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pad, mode="reflect" if min(h, w) > 1 else "edge")


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise InvalidInputError("image size must be a multiple of the factor")
    shp = (h // factor, factor, w // factor, factor) + img.shape[2:]
    return img.reshape(shp).mean(axis=(1, 3))


def _pad_border(img, r):
    # Replicating the border row keeps windows near the edge from looking
    # alike in two views; mirror padding makes every border pixel locally
    # symmetric and pulls matches towards the frame edge.
    return np.pad(img, r, mode="edge")


def _sobel(img: np.ndarray):
    p = _pad_border(img, 1)
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return gx / 8.0, gy / 8.0


def _windows(img: np.ndarray, window: int) -> np.ndarray:
    r = window // 2
    p = _pad_border(img, r)
    win = np.lib.stride_tricks.sliding_window_view(p, (window, window))
    return win.reshape(img.shape + (window * window,))


class PatchSobelProvider:
    """Mean-removed patch intensities plus Sobel responses, randomly projected.

    The projection matrix is drawn once from a seeded generator so the
    descriptor is a fixed linear map of the local window (hence exactly
    shift-equivariant away from the borders).
    """

    def __init__(self, window: int = 7, channels: int = 32, seed: int = 20230101):
        if window < 3 or window % 2 == 0:
            raise ConfigError("window must be odd and >= 3")
        self.window = window
        self.channels = channels
        self.seed = seed
        raw_dim = 3 * window * window
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((raw_dim, channels)) / math.sqrt(raw_dim)

    def __call__(self, gray: np.ndarray) -> np.ndarray:
        gx, gy = _sobel(gray)
        patch = _windows(gray, self.window)
        patch = patch - patch.mean(axis=-1, keepdims=True)
        raw = np.concatenate([patch, _windows(gx, self.window), _windows(gy, self.window)], axis=-1)
        return raw @ self.projection


Provider = Callable[[np.ndarray], np.ndarray]


def normalize_descriptors(desc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean, unit-norm per pixel; returns ``(float32 data, valid)``."""
    desc = np.asarray(desc, dtype=np.float64)
    if not np.all(np.isfinite(desc)):
        raise InvalidInputError("descriptors must be finite")
    desc = desc - desc.mean(axis=-1, keepdims=True)
    norm = np.linalg.norm(desc, axis=-1)
    valid = norm > ZERO_EPS
    out = np.zeros_like(desc)
    out[valid] = desc[valid] / norm[valid, None]
    return out.astype(np.float32), valid


def extract_features(image, stage: str, provider: Provider | None = None) -> FeatureMap:
    """Descriptor map of ``image`` at the resolution of ``stage``.

    The image is reflect-padded to a multiple of 16, box-averaged down to
    1/16 (coarse) or 1/4 (fine) and handed to the provider.
    """
    if stage not in STAGE_SCALE:
        raise InvalidInputError(f"unknown stage {stage!r}")
    gray = pad_to_multiple(to_gray(image))
    factor = STAGE_SCALE[stage]
    small = box_downsample(gray, factor)
    provider = provider or PatchSobelProvider()
    desc = provider(small)
    if desc.shape[:2] != small.shape:
        raise ConfigError("provider changed the spatial size")
    data, valid = normalize_descriptors(desc)
    return FeatureMap(data, valid, factor)


def _pool2(a: np.ndarray) -> np.ndarray:
    """2x2 average pooling with ceil division; edge blocks average what exists."""
    h, w = a.shape[:2]
    H, W = -(-h // 2), -(-w // 2)
    pad = [(0, 2 * H - h), (0, 2 * W - w)] + [(0, 0)] * (a.ndim - 2)
    s = np.pad(a, pad).reshape((H, 2, W, 2) + a.shape[2:]).sum(axis=(1, 3))
    cnt = np.pad(np.ones((h, w)), pad[:2]).reshape(H, 2, W, 2).sum(axis=(1, 3))
    return s / cnt.reshape(cnt.shape + (1,) * (a.ndim - 2))


def build_pyramid(fmap: FeatureMap, m_s: int) -> FeaturePyramid:
    """``m_s`` levels; level ``k`` is ``k`` rounds of 2x2 average pooling.

    Level 0 is the input map itself.  Each pooled level is renormalised per
    pixel; the un-normalised pooled data is kept in ``pooled``.
    """
    if m_s < 1:
        raise ConfigError("m_s must be >= 1")
    max_rounds = int(math.floor(math.log2(min(fmap.height, fmap.width))))
    if m_s - 1 > max_rounds:
        raise ConfigError(
            f"m_s={m_s} needs {m_s - 1} pooling rounds; a {fmap.width}x{fmap.height} map allows {max_rounds}")
    levels = [fmap]
    pooled = [fmap.data.astype(np.float64)]
    for k in range(1, m_s):
        raw = _pool2(pooled[-1])
        pooled.append(raw)
        norm = np.linalg.norm(raw, axis=-1)
        valid = norm > ZERO_EPS
        data = np.zeros_like(raw)
        data[valid] = raw[valid] / norm[valid, None]
        levels.append(FeatureMap(data.astype(np.float32), valid, fmap.scale * 2 ** k))
    return FeaturePyramid(levels, pooled)


def level_coords(p, level: int) -> np.ndarray:
    """Map level-0 pixel coordinates to the coordinates of pooled ``level``."""
    f = 2.0 ** level
    return (np.asarray(p, dtype=np.float64) + 0.5) / f - 0.5


def sample_features(fmap: FeatureMap, p) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear, renormalised samples at ``p`` (``(..., 2)``).

    Returns ``(vectors, valid)``.  Samples outside the map, or touching a
    zero-descriptor pixel with non-zero weight, are invalid and zero-filled.
    """
    p = np.asarray(p, dtype=np.float64)
    x, y = p[..., 0], p[..., 1]
    W, H = fmap.width, fmap.height
    inside = (np.isfinite(x) & np.isfinite(y) & (x >= -0.5) & (x <= W - 0.5)
              & (y >= -0.5) & (y <= H - 0.5))
    # the outer half pixel belongs to the image; it takes the border value
    xs = np.clip(np.where(inside, x, 0.0), 0.0, W - 1)
    ys = np.clip(np.where(inside, y, 0.0), 0.0, H - 1)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = xs - x0
    wy = ys - y0
    acc = np.zeros(p.shape[:-1] + (fmap.channels,), dtype=np.float64)
    ok = inside.copy()
    for yy, xx, w in ((y0, x0, (1 - wx) * (1 - wy)), (y0, x1, wx * (1 - wy)),
                      (y1, x0, (1 - wx) * wy), (y1, x1, wx * wy)):
        used = w > 0
        ok &= ~used | fmap.valid[yy, xx]
        acc += w[..., None] * fmap.data[yy, xx]
    norm = np.linalg.norm(acc, axis=-1)
    ok &= norm > ZERO_EPS
    out = np.zeros_like(acc)
    out[ok] = acc[ok] / norm[ok, None]
    return out.astype(np.float32), ok


def sample_feature(fmap: FeatureMap, p):
    """Single-pixel sample; ``None`` is the out-of-frame / invalid sentinel."""
    vec, ok = sample_features(fmap, np.asarray(p, dtype=np.float64).reshape(2))
    return vec if bool(ok) else None


def write_feature_file(fmap: FeatureMap, path) -> None:
    data = np.where(fmap.valid[..., None], fmap.data, 0).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, fmap.width, fmap.height, fmap.channels, fmap.scale))
        fh.write(data.tobytes(order="C"))


def read_feature_file(path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, w, h, c, scale = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if w == 0 or h == 0 or c == 0 or scale == 0:
        raise ParseError(f"{path}: zero dimension in header")
    expected = _HEADER.size + 4 * w * h * c
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(raw)}")
    desc = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    data, valid = normalize_descriptors(desc)
    return FeatureMap(data, valid, scale)
