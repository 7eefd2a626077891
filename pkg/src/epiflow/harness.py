"""End-to-end runs: reconstruct every view, filter, fuse and evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import synth
from .errors import ConfigError
from .evaluate import EvalReport, default_threshold, evaluate, gt_point_cloud, mean_footprint
from .fuse3d import ConsistencyParams, PointCloud, fuse_to_point_cloud, geometric_consistency_mask
from .geom import CameraView
from .pipeline import DepthField, PipelineConfig, ViewResult, backend_weights, compute_features, reconstruct_view

log = logging.getLogger(__name__)

RANGE_FACTORS = (1.0, 2.0, 3.0)


def widen_range(cam: CameraView, x: float) -> CameraView:
    """The ``x``-th depth range: ``[d_min / x, d_max * x]``."""
    if x < 1:
        raise ConfigError("range factor must be >= 1")
    return cam.with_depth_range(cam.depth_min / x, cam.depth_max * x)


def reconstruct_all(cams: Sequence[CameraView], images: Sequence[np.ndarray],
                    pairs: Sequence[Sequence[int]], config: PipelineConfig,
                    initial: dict[int, DepthField] | None = None, features=None,
                    gru_records=None) -> list[ViewResult]:
    """Reconstruct every view against its first ``config.n_sources`` pair entries."""
    features = features or compute_features(images)
    if gru_records is None:
        gru_records = backend_weights(config)
    out = []
    refs = range(len(cams)) if config.views is None else config.views
    for ref in refs:
        sources = list(pairs[ref])[:config.n_sources]
        init = None if initial is None else initial.get(ref)
        out.append(reconstruct_view(ref, cams, features, sources, config, init, gru_records))
    return out


def fuse_results(results: Sequence[ViewResult], images: Sequence[np.ndarray],
                 params: ConsistencyParams | None = None) -> tuple[PointCloud, list[np.ndarray]]:
    depths = [r.fine for r in results]
    cams = [r.fine_camera for r in results]
    masks = geometric_consistency_mask(depths, cams, params)
    return fuse_to_point_cloud(depths, masks, [images[r.ref] for r in results], cams), masks


@dataclass(eq=False)
class SyntheticRun:
    scene: synth.SyntheticScene
    results: list[ViewResult]
    cloud: PointCloud
    masks: list[np.ndarray]
    report: EvalReport | None
    footprint: float
    range_factor: float = 1.0
    extras: dict = field(default_factory=dict)

    def depth_accuracy(self, tol: float = 0.01) -> float:
        """Fraction of valid, textured, co-visible fine pixels within ``tol`` relative error."""
        hits, total = 0, 0
        for res in self.results:
            m = evaluation_mask(self.scene, res)
            gt = synth.render_depth(self.scene.spec, res.fine_camera)
            rel = np.abs(res.fine.depth - gt) / gt
            hits += int(np.sum(rel[m] < tol))
            total += int(m.sum())
        return hits / total if total else float("nan")


def evaluation_mask(scene: synth.SyntheticScene, res: ViewResult) -> np.ndarray:
    """Valid fine pixels that are textured and seen by at least one of the view's sources."""
    cam = res.fine_camera
    factor = scene.cameras[res.ref].width // cam.width
    tex = synth.textured_mask(scene.images[res.ref], factor)[:cam.height, :cam.width]
    srcs = [scene.cameras[s] for s in res.sources]
    return res.fine.valid & tex & synth.covisible_mask(scene.spec, cam, srcs)


def run_synthetic(scene: synth.SyntheticScene, config: PipelineConfig | None = None,
                  range_factor: float = 1.0, initial: dict[int, DepthField] | None = None,
                  params: ConsistencyParams | None = None, features=None) -> SyntheticRun:
    config = config or PipelineConfig()
    cams = [widen_range(c, range_factor) for c in scene.cameras]
    results = reconstruct_all(cams, scene.images, scene.pairs, config, initial, features)
    cloud, masks = fuse_results(results, scene.images, params)
    fine_cams = [r.fine_camera for r in results]
    gt_depths = [synth.render_depth(scene.spec, c) for c in fine_cams]
    foot = mean_footprint(gt_depths, fine_cams)
    report = None
    if len(cloud):
        report = evaluate(cloud, gt_point_cloud(gt_depths, fine_cams), default_threshold(foot))
    else:
        log.warning("empty point cloud; no metrics")
    return SyntheticRun(scene, results, cloud, masks, report, foot, range_factor)
