"""Epipolar cost slices and E-flow update rules.

For every reference pixel the current E-flow locates a candidate match on
the source epipolar line.  Around it ``m_p`` points are sampled, one pixel
apart, on each of ``m_s`` average-pooled source feature levels, and scored
against the reference descriptor by a plain dot product.  The resulting
``m_s * m_p`` scores per pixel are turned into an E-flow correction and a
fusion logit, either by a deterministic cost-peak rule or by a convolutional
GRU with weights loaded from file.

GRU weight file (little-endian), one record per stage, coarse first::

    offset  size  field
    0       4     magic  b"GRU1"
    4       4     hidden size H          uint32
    8       4     input size C           uint32
    12      4     reserved (0)           uint32
    16      ...   float32 blocks, row-major, in this order:
                  W_z (H, H+C, 3, 3), b_z (H),
                  W_r (H, H+C, 3, 3), b_r (H),
                  W_h (H, H+C, 3, 3), b_h (H),
                  W_out (2, H), b_out (2)

``C`` is ``m_s * m_p + 1``: the cost entries (masked entries as 0) followed
by the current E-flow.  The output head yields ``(delta_eflow, weight)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InvalidInputError, ParseError
from .feat import FeatureMap, FeaturePyramid, level_coords, sample_features
from .geom import EpipolarFrame


class EFlowField(NamedTuple):
    eflow: np.ndarray  # (H, W) pixels along the epipolar line
    frame: EpipolarFrame  # per-pixel arrays of shape (H, W, 2)
    valid: np.ndarray  # (H, W) bool
    source: int

    def match_positions(self) -> np.ndarray:
        return self.frame.anchor + self.frame.direction * self.eflow[..., None]


@dataclass(frozen=True, eq=False)
class CostSlice:
    scores: np.ndarray  # (H, W, m_s, m_p) float32, 0 where masked
    valid: np.ndarray  # (H, W, m_s, m_p) bool
    offsets: np.ndarray  # (m_p,) signed offsets in level pixels

    @property
    def m_s(self) -> int:
        return self.scores.shape[2]

    @property
    def m_p(self) -> int:
        return self.scores.shape[3]

    @property
    def entries_per_pixel(self) -> int:
        return self.m_s * self.m_p

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.scores.shape[:2]
        return (self.scores.reshape(h, w, -1), self.valid.reshape(h, w, -1))


class UpdateResult(NamedTuple):
    delta_eflow: np.ndarray
    weight: np.ndarray  # pre-softmax logit; -inf where invalid
    valid: np.ndarray


def similarity(a, b):
    """Dot product of two descriptors; ``None`` operands give ``None``."""
    if a is None or b is None:
        return None
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"descriptor size mismatch {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def window_offsets(m_p: int) -> np.ndarray:
    if m_p < 1 or m_p % 2 == 0:
        raise ConfigError("m_p must be odd")
    h = m_p // 2
    return np.arange(-h, h + 1, dtype=np.float64)


def build_cost_slice(ref: FeatureMap, pyramid_s: FeaturePyramid, eflow: EFlowField,
                     m_s: int, m_p: int) -> CostSlice:
    """Score ``m_s * m_p`` epipolar samples per reference pixel."""
    if m_s > len(pyramid_s):
        raise ConfigError(f"pyramid has {len(pyramid_s)} levels, m_s={m_s}")
    offsets = window_offsets(m_p)
    h, w = ref.height, ref.width
    if eflow.eflow.shape != (h, w):
        raise InvalidInputError("E-flow field and reference features differ in size")
    centre = eflow.match_positions()
    direction = eflow.frame.direction
    base_ok = eflow.valid & ref.valid & np.all(np.isfinite(centre), axis=-1)
    centre = np.where(base_ok[..., None], centre, -1e9)
    direction = np.where(base_ok[..., None], direction, 0.0)
    c_r = ref.data.astype(np.float32)
    scores = np.zeros((h, w, m_s, m_p), dtype=np.float32)
    valid = np.zeros((h, w, m_s, m_p), dtype=bool)
    for k in range(m_s):
        pts = level_coords(centre, k)[:, :, None, :] + offsets[None, None, :, None] * direction[:, :, None, :]
        vec, ok = sample_features(pyramid_s.levels[k], pts)
        ok &= base_ok[..., None]
        s = np.einsum("hwc,hwjc->hwj", c_r, vec)
        scores[:, :, k, :] = np.where(ok, s, 0.0)
        valid[:, :, k, :] = ok
    return CostSlice(scores, valid, offsets)


def combine_scales(cost: CostSlice) -> tuple[np.ndarray, np.ndarray]:
    """Average all levels on the finest offset grid.

    Level ``k`` sample ``j`` sits ``j * 2**k`` level-0 pixels from the
    centre; its scores are linearly interpolated onto the level-0 offsets.
    Returns ``(combined, valid)`` of shape ``(H, W, m_p)``.
    """
    offsets = cost.offsets
    half = cost.m_p // 2
    total = np.zeros(cost.scores.shape[:2] + (cost.m_p,), dtype=np.float64)
    count = np.zeros_like(total)
    for k in range(cost.m_s):
        u = offsets / 2.0 ** k
        j0 = np.floor(u).astype(int)
        t = u - j0
        j1 = np.minimum(j0 + 1, half)
        i0, i1 = j0 + half, j1 + half
        s, v = cost.scores[:, :, k, :].astype(np.float64), cost.valid[:, :, k, :]
        exact = t == 0
        val = np.where(exact, s[..., i0], (1 - t) * s[..., i0] + t * s[..., i1])
        ok = np.where(exact, v[..., i0], v[..., i0] & v[..., i1])
        total += np.where(ok, val, 0.0)
        count += ok
    valid = count > 0
    combined = np.where(valid, total / np.maximum(count, 1), -np.inf)
    return combined, valid


def parabolic_vertex(s_minus, s_0, s_plus):
    """Vertex offset of the parabola through three equally spaced scores."""
    s_minus, s_0, s_plus = (np.asarray(v, dtype=np.float64) for v in (s_minus, s_0, s_plus))
    denom = s_minus - 2.0 * s_0 + s_plus
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(denom < 0, (s_minus - s_plus) / (2.0 * denom), 0.0)
    return np.clip(v, -0.5, 0.5)


def update_deterministic(cost: CostSlice, eflow: EFlowField | None = None) -> UpdateResult:
    """Cost-peak update: argmax of the combined scores, parabola-refined."""
    combined, ok = combine_scales(cost)
    any_ok = ok.any(axis=-1)
    idx = np.argmax(combined, axis=-1)
    h, w, m_p = combined.shape
    rows, cols = np.indices((h, w))
    peak = combined[rows, cols, idx]
    left = np.clip(idx - 1, 0, m_p - 1)
    right = np.clip(idx + 1, 0, m_p - 1)
    can_refine = (idx > 0) & (idx < m_p - 1) & ok[rows, cols, left] & ok[rows, cols, right]
    vertex = np.where(can_refine,
                      parabolic_vertex(np.where(can_refine, combined[rows, cols, left], 0.0),
                                       np.where(can_refine, peak, 0.0),
                                       np.where(can_refine, combined[rows, cols, right], 0.0)),
                      0.0)
    delta = cost.offsets[idx] + vertex
    delta, peak, any_ok = _pooled_fallback(cost, any_ok, delta, peak)
    valid = any_ok if eflow is None else any_ok & eflow.valid
    delta = np.where(valid, delta, 0.0)
    weight = np.where(valid, peak, -np.inf)
    return UpdateResult(delta, weight, valid)


def _pooled_fallback(cost: CostSlice, any_ok, delta, peak):
    """Pixels with no valid finest-grid score jump to a pooled level's best sample.

    When the whole level-0 window is out of frame, the coarser levels may
    still see the source image further along the line.  The finest such
    level is used: its best sample sits ``offset * 2**k`` pixels away.
    """
    todo = ~any_ok
    if not todo.any():
        return delta, peak, any_ok
    delta, peak, any_ok = delta.copy(), peak.copy(), any_ok.copy()
    for k in range(1, cost.m_s):
        v = cost.valid[:, :, k, :]
        use = todo & v.any(axis=-1)
        if not use.any():
            continue
        scores = np.where(v, cost.scores[:, :, k, :], -np.inf)
        j = np.argmax(scores, axis=-1)
        best = np.take_along_axis(scores, j[..., None], axis=-1)[..., 0]
        delta = np.where(use, cost.offsets[j] * 2.0 ** k, delta)
        peak = np.where(use, best, peak)
        any_ok |= use
        todo &= ~use
    return delta, peak, any_ok


# --------------------------------------------------------------------------
# Convolutional GRU
# --------------------------------------------------------------------------

GRU_MAGIC = b"GRU1"
_GRU_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class GruWeights:
    w_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    b_r: np.ndarray
    w_h: np.ndarray
    b_h: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def hidden(self) -> int:
        return self.b_z.shape[0]

    @property
    def inputs(self) -> int:
        return self.w_z.shape[1] - self.hidden

    def validate(self):
        H = self.b_z.shape[0]
        if self.w_z.ndim != 4 or self.w_z.shape[0] != H or self.w_z.shape[2:] != (3, 3):
            raise ConfigError("W_z must have shape (H, H+C, 3, 3)")
        C = self.w_z.shape[1] - H
        if C < 1:
            raise ConfigError("GRU input size must be positive")
        gate = (H, H + C, 3, 3)
        for name in ("w_z", "w_r", "w_h"):
            if getattr(self, name).shape != gate:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {gate}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (H,):
                raise ConfigError(f"{name} must have shape ({H},)")
        if self.w_out.shape != (2, H) or self.b_out.shape != (2,):
            raise ConfigError("output head must be (2, H) weights and (2,) bias")
        return self

    def blocks(self):
        return (self.w_z, self.b_z, self.w_r, self.b_r, self.w_h, self.b_h, self.w_out, self.b_out)


@dataclass(eq=False)
class GruState:
    hidden: np.ndarray  # (H_img, W_img, H)
    weights: GruWeights
    z: np.ndarray | None = None
    r: np.ndarray | None = None
    candidate: np.ndarray | None = None


def random_gru_weights(hidden: int, inputs: int, rng: np.random.Generator,
                       scale: float = 0.3) -> GruWeights:
    def gate():
        return rng.normal(0, scale, (hidden, hidden + inputs, 3, 3)), rng.normal(0, scale, hidden)

    wz, bz = gate()
    wr, br = gate()
    wh, bh = gate()
    return GruWeights(wz, bz, wr, br, wh, bh, rng.normal(0, scale, (2, hidden)),
                      rng.normal(0, scale, 2)).validate()


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 convolution of an ``(H, W, C)`` map with ``(O, C, 3, 3)``."""
    h, wd, _ = x.shape
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b, (h, wd, b.shape[0])).astype(np.float64).copy()
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + h, dx:dx + wd] @ w[:, :, dy, dx].T
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_gru_state(weights: GruWeights, height: int, width: int) -> GruState:
    return GruState(np.zeros((height, width, weights.hidden)), weights)


def gru_cell(state: GruState, x: np.ndarray, force_z: float | None = None) -> GruState:
    """One convolutional GRU step.

    ``force_z`` pins the update gate to a constant (0 freezes the state,
    1 replaces it with the candidate).
    """
    wts = state.weights
    h_prev = state.hidden
    x = np.asarray(x, dtype=np.float64)
    if x.shape[:2] != h_prev.shape[:2] or x.shape[2] != wts.inputs:
        raise ConfigError(f"GRU input shape {x.shape} does not match weights (C={wts.inputs})")
    hx = np.concatenate([h_prev, x], axis=-1)
    z = _sigmoid(conv3x3(hx, wts.w_z, wts.b_z))
    if force_z is not None:
        z = np.full_like(z, float(force_z))
    r = _sigmoid(conv3x3(hx, wts.w_r, wts.b_r))
    cand = np.tanh(conv3x3(np.concatenate([r * h_prev, x], axis=-1), wts.w_h, wts.b_h))
    h_new = (1.0 - z) * h_prev + z * cand
    return GruState(h_new, wts, z, r, cand)


def gru_head(state: GruState) -> tuple[np.ndarray, np.ndarray]:
    out = state.hidden @ state.weights.w_out.T + state.weights.b_out
    return out[..., 0], out[..., 1]


def gru_input(cost: CostSlice, eflow: EFlowField) -> np.ndarray:
    scores, _ = cost.flat()
    e = np.where(eflow.valid, eflow.eflow, 0.0)
    return np.concatenate([scores.astype(np.float64), e[..., None]], axis=-1)


def update_gru(state: GruState, cost: CostSlice, eflow: EFlowField) -> tuple[GruState, UpdateResult]:
    state = gru_cell(state, gru_input(cost, eflow))
    delta, weight = gru_head(state)
    valid = eflow.valid & cost.valid.any(axis=(2, 3)) & np.isfinite(delta) & np.isfinite(weight)
    return state, UpdateResult(np.where(valid, delta, 0.0), np.where(valid, weight, -np.inf), valid)


def write_gru_weights(records: list[GruWeights], path) -> None:
    with open(path, "wb") as fh:
        for wts in records:
            wts.validate()
            fh.write(_GRU_HEADER.pack(GRU_MAGIC, wts.hidden, wts.inputs, 0))
            for blk in wts.blocks():
                fh.write(np.ascontiguousarray(blk, dtype="<f4").tobytes())


def read_gru_weights(path) -> list[GruWeights]:
    raw = Path(path).read_bytes()
    pos = 0
    records = []
    while pos < len(raw):
        if len(raw) - pos < _GRU_HEADER.size:
            raise ParseError(f"{path}: truncated record header at byte {pos}")
        magic, H, C, _ = _GRU_HEADER.unpack_from(raw, pos)
        if magic != GRU_MAGIC:
            raise ParseError(f"{path}: bad magic at byte {pos}")
        if H == 0 or C == 0:
            raise ParseError(f"{path}: zero hidden/input size at byte {pos}")
        pos += _GRU_HEADER.size
        shapes = [(H, H + C, 3, 3), (H,)] * 3 + [(2, H), (2,)]
        blocks = []
        for shp in shapes:
            n = int(np.prod(shp))
            if len(raw) - pos < 4 * n:
                raise ParseError(f"{path}: truncated parameter block at byte {pos}")
            blocks.append(np.frombuffer(raw, "<f4", n, pos).astype(np.float64).reshape(shp))
            pos += 4 * n
        records.append(GruWeights(*blocks).validate())
    if not records:
        raise ParseError(f"{path}: no weight records")
    return records
