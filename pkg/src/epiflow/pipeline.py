"""Iterative depth estimation from per-pair E-flow matching.

One reference view is reconstructed as follows.  A random inverse-depth
map seeds the coarse stage (1/16 resolution).  Every iteration converts the
current depth into an E-flow for each (reference, source) pair, scores an
epipolar cost slice around it, updates the E-flow, triangulates each pair's
E-flow back to depth and fuses the per-pair depths with softmax weights.
The coarse result is upsampled by 4 with convex 3x3 weights and refined at
the fine stage (1/4 resolution).

Nothing inside an iteration reads the declared depth range; it enters only
through :func:`init_depth` and diagnostics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import geom
from .errors import ConfigError, InvalidInputError, ReconstructionFailedError, UndefinedMetricError
from .feat import STAGE_SCALE, FeatureMap, FeaturePyramid, build_pyramid, extract_features
from .geom import CameraView
from .match import (
    CostSlice,
    EFlowField,
    GruWeights,
    UpdateResult,
    build_cost_slice,
    init_gru_state,
    read_gru_weights,
    update_deterministic,
    update_gru,
)

log = logging.getLogger(__name__)

GAMMA = 0.9
STAGES = ("coarse", "fine")


@dataclass(frozen=True, eq=False)
class DepthField:
    depth: np.ndarray
    valid: np.ndarray
    stage: str = "coarse"
    iteration: int = 0

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if depth.shape != valid.shape or depth.ndim != 2:
            raise InvalidInputError("depth and mask must be 2-D arrays of equal shape")
        if self.iteration < 0:
            raise InvalidInputError("iteration must be >= 0")
        valid = valid & np.isfinite(depth) & (depth > 0)
        object.__setattr__(self, "depth", np.where(valid, depth, 0.0))
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True, eq=False)
class FusionWeights:
    logits: np.ndarray  # (N, H, W)
    normalized: bool = False

    def softmax(self) -> "FusionWeights":
        if self.normalized:
            return self
        return FusionWeights(softmax(self.logits, axis=0), True)


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Softmax that leaves all -inf slices as zeros."""
    x = np.asarray(logits, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, e / s, 0.0)


@dataclass
class StageParams:
    iterations: int
    m_s: int
    m_p: int


@dataclass
class PipelineConfig:
    n_sources: int = 2
    coarse: StageParams = field(default_factory=lambda: StageParams(8, 4, 9))
    fine: StageParams = field(default_factory=lambda: StageParams(2, 2, 5))
    backend: str = "deterministic"
    seed: int = 0
    views: list | None = None  # reference views to reconstruct; None means all

    def stage(self, name: str) -> StageParams:
        return self.coarse if name == "coarse" else self.fine

    def validate(self) -> "PipelineConfig":
        if self.n_sources < 1:
            raise ConfigError("n_sources must be >= 1")
        for name in STAGES:
            sp = self.stage(name)
            if sp.iterations < 1:
                raise ConfigError(f"{name} iterations must be >= 1")
            if sp.m_s < 1 or sp.m_p < 1 or sp.m_p % 2 == 0:
                raise ConfigError(f"{name}: need m_s >= 1 and odd m_p")
        if not (self.backend == "deterministic" or self.backend.startswith("gru:")):
            raise ConfigError(f"unknown update backend {self.backend!r}")
        return self


# --------------------------------------------------------------------------
# initialisation, fusion, upsampling, loss
# --------------------------------------------------------------------------

def inverse_uniform_depth(u, d_min: float, d_max: float) -> np.ndarray:
    return 1.0 / (np.asarray(u, dtype=np.float64) * (1.0 / d_min - 1.0 / d_max) + 1.0 / d_max)


def init_depth(cam_r: CameraView, rng_seed, stage: str = "coarse") -> DepthField:
    """Random depth, uniform in inverse depth over the camera's declared range."""
    rng = np.random.default_rng(rng_seed)
    u = rng.random((cam_r.height, cam_r.width))
    d = inverse_uniform_depth(u, cam_r.depth_min, cam_r.depth_max)
    return DepthField(d, np.ones_like(d, dtype=bool), stage, 0)


def fuse_views(per_pair: Sequence[DepthField], weights: FusionWeights,
               stage: str | None = None, iteration: int | None = None) -> DepthField:
    """Softmax-weighted sum of per-pair depths; sources without a valid depth are ignored."""
    if not per_pair:
        raise InvalidInputError("need at least one per-pair depth")
    shape = per_pair[0].depth.shape
    if any(f.depth.shape != shape for f in per_pair) or weights.logits.shape != (len(per_pair),) + shape:
        raise InvalidInputError("per-pair depths and weights must share dimensions")
    depths = np.stack([f.depth for f in per_pair])
    valid = np.stack([f.valid for f in per_pair])
    if weights.normalized:
        w = _renormalize(np.where(valid, weights.logits, 0.0))
    else:
        w = softmax(np.where(valid, weights.logits, -np.inf), axis=0)
    fused = np.sum(np.where(valid, depths, 0.0) * w, axis=0)
    ok = valid.any(axis=0) & (w.sum(axis=0) > 0)
    return DepthField(fused, ok, stage or per_pair[0].stage,
                      per_pair[0].iteration if iteration is None else iteration)


def _renormalize(w: np.ndarray) -> np.ndarray:
    s = w.sum(axis=0, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, w / s, 0.0)


NEIGHBOUR_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def bilinear_convex_weights(height: int, width: int, factor: int = 4) -> np.ndarray:
    """Per-output-pixel 9-way weights that reproduce bilinear interpolation.

    Returns ``(height * factor, width * factor, 9)``; neighbour order is
    row-major over ``dy, dx in (-1, 0, 1)``.
    """
    r = np.arange(factor)
    off = (r + 0.5) / factor - 0.5  # position inside the coarse cell
    w1 = np.zeros((factor, 3))
    w1[:, 0] = np.where(off < 0, -off, 0.0)
    w1[:, 1] = 1.0 - np.abs(off)
    w1[:, 2] = np.where(off > 0, off, 0.0)
    w2 = (w1[:, None, :, None] * w1[None, :, None, :]).reshape(factor, factor, 9)
    return np.tile(w2, (height, width, 1))


def upsample_depth(coarse: DepthField, factor: int = 4, weights: np.ndarray | None = None,
                   stage: str = "fine") -> DepthField:
    """Convex combination of each output pixel's 3x3 coarse neighbourhood.

    Masked or out-of-map neighbours are dropped and the remaining weights
    renormalised; pixels left with no weight are masked.
    """
    h, w = coarse.depth.shape
    H, W = h * factor, w * factor
    if weights is None:
        weights = bilinear_convex_weights(h, w, factor)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (H, W, 9):
            raise InvalidInputError(f"weights must have shape {(H, W, 9)}")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise InvalidInputError("convex weights must be finite and non-negative")
        if np.max(np.abs(weights.sum(axis=-1) - 1.0)) > 1e-5:
            raise InvalidInputError("convex weights must sum to 1 within 1e-5")
    ys = np.arange(H) // factor
    xs = np.arange(W) // factor
    acc = np.zeros((H, W))
    wsum = np.zeros((H, W))
    for n, (dy, dx) in enumerate(NEIGHBOUR_OFFSETS):
        yy = ys[:, None] + dy
        xx = xs[None, :] + dx
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        use = inside & coarse.valid[yc, xc]
        wn = np.where(use, weights[..., n], 0.0)
        acc += wn * coarse.depth[yc, xc]
        wsum += wn
    ok = wsum > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(ok, acc / wsum, 0.0)
    return DepthField(depth, ok, stage, 0)


def compute_loss(snapshots: Sequence[DepthField], gt, d_min: float, d_max: float,
                 gamma: float = GAMMA) -> float:
    """Gamma-weighted L1 distance between normalised depths.

    Snapshots are grouped by ``stage`` in order of appearance; the ``i``-th
    snapshot of a stage carries weight ``gamma ** i``.  ``gt`` is a single
    :class:`DepthField` or a mapping from stage name to one.
    """
    if not snapshots:
        raise UndefinedMetricError("no snapshots")
    per_stage: dict[str, list[DepthField]] = {}
    for snap in snapshots:
        per_stage.setdefault(snap.stage, []).append(snap)
    total = 0.0
    for stage, snaps in per_stage.items():
        g = gt[stage] if isinstance(gt, dict) else gt
        gnorm = None
        for i, snap in enumerate(snaps):
            if snap.depth.shape != g.depth.shape:
                raise InvalidInputError(f"{stage} snapshot and ground truth differ in size")
            both = snap.valid & g.valid
            if not both.any():
                raise UndefinedMetricError(f"{stage} snapshot {i} shares no valid pixel with ground truth")
            if gnorm is None:
                gnorm = np.zeros_like(g.depth)
                gnorm[g.valid] = geom.normalize_depth(g.depth[g.valid], d_min, d_max)
            dn = geom.normalize_depth(snap.depth[both], d_min, d_max)
            total += gamma ** i * float(np.mean(np.abs(gnorm[both] - dn)))
    return total


# --------------------------------------------------------------------------
# iteration
# --------------------------------------------------------------------------

@dataclass(eq=False)
class PairContext:
    cam_s: CameraView
    pyramid: FeaturePyramid
    frame: geom.EpipolarFrame
    frame_ok: np.ndarray
    source: int


@dataclass(eq=False)
class StageContext:
    """Everything one reference view needs to iterate at one stage."""

    stage: str
    cam_r: CameraView
    ref: FeatureMap
    pairs: list[PairContext]
    m_s: int
    m_p: int

    @property
    def grid(self) -> np.ndarray:
        return geom.pixel_grid(self.cam_r.width, self.cam_r.height)


def stage_camera(cam: CameraView, stage: str, fmap: FeatureMap | None = None) -> CameraView:
    factor = STAGE_SCALE[stage]
    if fmap is not None:
        return cam.scaled(factor, fmap.width, fmap.height)
    return cam.scaled(factor, -(-cam.width // 16) * 16 // factor, -(-cam.height // 16) * 16 // factor)


def make_stage_context(stage: str, ref_cam: CameraView, ref_map: FeatureMap,
                       sources: Sequence[tuple[int, CameraView, FeatureMap]],
                       m_s: int, m_p: int) -> StageContext:
    cam_r = stage_camera(ref_cam, stage, ref_map)
    grid = geom.pixel_grid(cam_r.width, cam_r.height)
    pairs = []
    for idx, cam, fmap in sources:
        cam_s = stage_camera(cam, stage, fmap)
        frame, ok = geom.epipolar_frame_batch(grid, cam_r, cam_s)
        pairs.append(PairContext(cam_s, build_pyramid(fmap, m_s), frame, ok, idx))
    return StageContext(stage, cam_r, ref_map, pairs, m_s, m_p)


def depth_to_eflow_field(depth: DepthField, ctx: StageContext, pair: PairContext) -> EFlowField:
    e, ok = geom.depth_to_eflow_batch(ctx.grid, depth.depth, pair.frame, ctx.cam_r, pair.cam_s)
    valid = depth.valid & pair.frame_ok & ok & np.isfinite(e)
    return EFlowField(np.where(valid, e, 0.0), pair.frame, valid, pair.source)


def mask_infeasible(cost: CostSlice, eflow: EFlowField, ctx: StageContext,
                    pair: PairContext) -> CostSlice:
    """Drop samples whose E-flow does not triangulate to a positive depth.

    Such positions lie past the vanishing point or the epipole on the
    epipolar line; no surface point can match there, exactly like a
    sample outside the source frame.
    """
    valid = cost.valid.copy()
    for k in range(cost.m_s):
        for j, off in enumerate(cost.offsets):
            e = eflow.eflow + off * 2.0 ** k
            tri = geom.eflow_to_depth_batch(ctx.grid, e, eflow.frame, ctx.cam_r, pair.cam_s)
            valid[:, :, k, j] &= tri.status == geom.STATUS_OK
    return CostSlice(np.where(valid, cost.scores, 0.0).astype(cost.scores.dtype), valid, cost.offsets)


def iterate_pair(depth: DepthField, ctx: StageContext, pair: PairContext,
                 updater=None) -> tuple[EFlowField, UpdateResult]:
    """Convert depth to this pair's E-flow, score it and apply one update."""
    eflow = depth_to_eflow_field(depth, ctx, pair)
    cost = build_cost_slice(ctx.ref, pair.pyramid, eflow, ctx.m_s, ctx.m_p)
    cost = mask_infeasible(cost, eflow, ctx, pair)
    upd = updater(cost, eflow) if updater is not None else update_deterministic(cost, eflow)
    valid = upd.valid & eflow.valid
    new = EFlowField(np.where(valid, eflow.eflow + upd.delta_eflow, 0.0), eflow.frame, valid, pair.source)
    return new, UpdateResult(upd.delta_eflow, np.where(valid, upd.weight, -np.inf), valid)


def triangulate_pair(eflow: EFlowField, ctx: StageContext, pair: PairContext,
                     stage: str, iteration: int) -> DepthField:
    tri = geom.eflow_to_depth_batch(ctx.grid, eflow.eflow, eflow.frame, ctx.cam_r, pair.cam_s)
    ok = eflow.valid & (tri.status == geom.STATUS_OK)
    return DepthField(np.where(ok, tri.depth, 0.0), ok, stage, iteration)


class _GruUpdater:
    """Per-pair GRU state; created fresh at every stage start."""

    def __init__(self, weights: GruWeights, height: int, width: int):
        self.state = init_gru_state(weights, height, width)

    def __call__(self, cost, eflow):
        self.state, upd = update_gru(self.state, cost, eflow)
        return upd


def run_stage(depth_in: DepthField, ctx: StageContext, t_iters: int,
              gru_weights: GruWeights | None = None) -> tuple[DepthField, list[DepthField]]:
    """``t_iters`` rounds of per-pair update, triangulation and fusion.

    Returns the final depth and the fused depth after every iteration.
    """
    if t_iters < 1:
        raise InvalidInputError("t_iters must be >= 1")
    if depth_in.depth.shape != (ctx.cam_r.height, ctx.cam_r.width):
        raise InvalidInputError("initial depth does not match the stage resolution")
    updaters = [None] * len(ctx.pairs)
    if gru_weights is not None:
        updaters = [_GruUpdater(gru_weights, ctx.cam_r.height, ctx.cam_r.width) for _ in ctx.pairs]
    depth = replace(depth_in, stage=ctx.stage)
    snapshots = []
    for t in range(1, t_iters + 1):
        per_pair, logits = [], []
        for pair, upd_fn in zip(ctx.pairs, updaters):
            eflow, upd = iterate_pair(depth, ctx, pair, upd_fn)
            d_pair = triangulate_pair(eflow, ctx, pair, ctx.stage, t)
            per_pair.append(d_pair)
            logits.append(np.where(d_pair.valid, upd.weight, -np.inf))
        fused = fuse_views(per_pair, FusionWeights(np.stack(logits)), ctx.stage, t)
        depth = DepthField(fused.depth, fused.valid & depth.valid, ctx.stage, t)
        snapshots.append(depth)
        log.debug("%s iteration %d: %d valid pixels", ctx.stage, t, int(depth.valid.sum()))
        if not depth.valid.any():
            raise ReconstructionFailedError(f"every pixel masked at {ctx.stage} iteration {t}")
    return depth, snapshots


@dataclass(eq=False)
class ViewResult:
    coarse: DepthField
    fine: DepthField
    snapshots: list[DepthField]
    init: DepthField
    fine_camera: CameraView
    ref: int = -1
    sources: tuple = ()


def select_gru_weights(records: Sequence[GruWeights] | None, sp: StageParams) -> GruWeights | None:
    if records is None:
        return None
    need = sp.m_s * sp.m_p + 1
    for rec in records:
        if rec.inputs == need:
            return rec
    raise ConfigError(f"no GRU weight record with input size {need}")


def backend_weights(config: PipelineConfig) -> list[GruWeights] | None:
    """GRU weight records named by a ``gru:<path>`` backend; ``None`` for the deterministic rule."""
    if config.backend == "deterministic":
        return None
    path = config.backend[len("gru:"):]
    try:
        return read_gru_weights(path)
    except OSError as exc:
        raise ConfigError(f"cannot read GRU weights {path!r}: {exc.strerror}") from None


def reconstruct_view(ref: int, cams: Sequence[CameraView], features: dict[str, Sequence[FeatureMap]],
                     sources: Sequence[int], config: PipelineConfig, initial: DepthField | None = None,
                     gru_records: Sequence[GruWeights] | None = None) -> ViewResult:
    """Coarse-to-fine reconstruction of view ``ref`` against ``sources``.

    ``features[stage][i]`` is the feature map of view ``i``.  Without an
    explicit ``initial`` depth the coarse stage starts from
    :func:`init_depth` seeded by ``(config.seed, ref)``.
    """
    config.validate()
    if gru_records is None:
        gru_records = backend_weights(config)
    if not sources:
        raise ConfigError(f"view {ref} has no source views")
    for s in sources:
        R, T = geom.relative_pose(cams[ref], cams[s])
        if np.linalg.norm(T) <= geom.EPS_BASELINE:
            raise ConfigError(f"views {ref} and {s} have zero baseline")
    snapshots: list[DepthField] = []
    depth = initial
    coarse_out = None
    init = None
    cam_fine = None
    for stage in STAGES:
        sp = config.stage(stage)
        ctx = make_stage_context(stage, cams[ref], features[stage][ref],
                                 [(s, cams[s], features[stage][s]) for s in sources], sp.m_s, sp.m_p)
        if stage == "coarse":
            if depth is None:
                depth = init_depth(ctx.cam_r, [config.seed, ref])
            init = depth
        else:
            depth = upsample_depth(coarse_out, STAGE_SCALE["coarse"] // STAGE_SCALE["fine"])
            cam_fine = ctx.cam_r
        depth, snaps = run_stage(depth, ctx, sp.iterations, select_gru_weights(gru_records, sp))
        snapshots.extend(snaps)
        if stage == "coarse":
            coarse_out = depth
    return ViewResult(coarse_out, depth, snapshots, init, cam_fine, ref, tuple(sources))


def compute_features(images: Sequence[np.ndarray], provider=None) -> dict[str, list[FeatureMap]]:
    return {stage: [extract_features(img, stage, provider) for img in images] for stage in STAGES}
