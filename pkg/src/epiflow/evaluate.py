"""Point-cloud accuracy / completeness metrics and ground-truth clouds."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import geom
from .errors import UndefinedMetricError
from .fuse3d import PointCloud
from .geom import CameraView

OUTLIER_FACTOR = 20.0
SURVIVAL_FRACTIONS = (0.05, 0.1, 0.25, 0.5, 1.0)


@dataclass
class EvalReport:
    accuracy: float
    completeness: float
    overall: float
    dist_threshold: float
    accuracy_outliers: float  # fraction of reconstructed points beyond the threshold
    completeness_outliers: float  # fraction of GT points beyond the threshold
    survival: dict = field(default_factory=dict)  # threshold -> {"accuracy": frac, "completeness": frac}
    n_points: int = 0
    n_gt: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["survival"] = {f"{k:.6g}": v for k, v in self.survival.items()}
        return d

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest neighbour in ``dst``."""
    dist, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def _mean_inliers(d: np.ndarray, thr: float) -> float:
    inl = d[d <= thr]
    return float(inl.mean()) if inl.size else math.inf


def evaluate(cloud: PointCloud, gt_cloud: PointCloud, dist_threshold: float,
             survival_thresholds: Sequence[float] | None = None) -> EvalReport:
    """Accuracy (recon to GT), completeness (GT to recon) and their mean.

    Distances above ``dist_threshold`` are outliers: they are left out of
    the means and reported as fractions.  A direction with no inlier at
    all has an infinite mean.
    """
    if len(cloud) == 0 or len(gt_cloud) == 0:
        raise UndefinedMetricError("evaluation needs two non-empty point clouds")
    if not dist_threshold > 0:
        raise UndefinedMetricError("dist_threshold must be positive")
    acc_d = nearest_distances(cloud.points, gt_cloud.points)
    comp_d = nearest_distances(gt_cloud.points, cloud.points)
    acc = _mean_inliers(acc_d, dist_threshold)
    comp = _mean_inliers(comp_d, dist_threshold)
    if survival_thresholds is None:
        survival_thresholds = [f * dist_threshold for f in SURVIVAL_FRACTIONS]
    survival = {float(t): {"accuracy": float(np.mean(acc_d <= t)),
                           "completeness": float(np.mean(comp_d <= t))}
                for t in survival_thresholds}
    return EvalReport(acc, comp, 0.5 * (acc + comp), float(dist_threshold),
                      float(np.mean(acc_d > dist_threshold)), float(np.mean(comp_d > dist_threshold)),
                      survival, len(cloud), len(gt_cloud))


def mean_footprint(depths: Sequence[np.ndarray], cams: Sequence[CameraView]) -> float:
    """Mean metric size of a pixel at the given depths (depths match ``cams``)."""
    vals = []
    for d, cam in zip(depths, cams):
        d = np.asarray(d, dtype=np.float64)
        f = 0.5 * (cam.intrinsics[0, 0] + cam.intrinsics[1, 1])
        vals.append(d[np.isfinite(d) & (d > 0)] / f)
    return float(np.mean(np.concatenate(vals)))


def default_threshold(footprint: float) -> float:
    return OUTLIER_FACTOR * footprint


def gt_point_cloud(depths: Sequence[np.ndarray], cams: Sequence[CameraView],
                   images: Sequence[np.ndarray] | None = None) -> PointCloud:
    """One point per pixel of every view, lifted with exact depth."""
    from .fuse3d import sample_colors

    pts, cols = [], []
    for v, (d, cam) in enumerate(zip(depths, cams)):
        d = np.asarray(d, dtype=np.float64)
        ok = np.isfinite(d) & (d > 0)
        grid = geom.pixel_grid(cam.width, cam.height)
        pts.append(geom.reproject_batch(grid[ok], d[ok], cam))
        if images is not None:
            cols.append(sample_colors(images[v], cam.width, cam.height)[ok])
        else:
            cols.append(np.full((int(ok.sum()), 3), 255, np.uint8))
    return PointCloud.from_points(np.concatenate(pts), np.concatenate(cols))
