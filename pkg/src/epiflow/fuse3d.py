"""Geometric-consistency filtering of depth maps and point-cloud fusion.

A reference pixel is checked against every other view in two steps:

1. *project-in*: the pixel is lifted with its depth, projected into the
   source, the source depth is sampled there and the resulting source
   point is expressed in the reference camera.  Its depth must agree with
   the reference depth within ``max_rel_depth_diff`` (relative).
2. *round trip*: the same source point is projected back into the
   reference; it must land within ``max_reproj_error`` pixels of where it
   started.

A pixel survives when at least ``min_consistent_views`` sources pass both
steps.  Surviving pixels are lifted to world coordinates and points of
different views closer than the merge radius are averaged.

PLY layout written by :func:`write_ply` (binary, little-endian)::

    ply
    format binary_little_endian 1.0
    element vertex <N>
    property float x
    property float y
    property float z
    property uchar red
    property uchar green
    property uchar blue
    end_header

followed by ``N`` records of 15 bytes (three float32, three uint8).  Every
header line ends with a single ``\\n``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geom
from .errors import ConfigError, InvalidInputError, ParseError
from .geom import CameraView
from .pipeline import DepthField

log = logging.getLogger(__name__)

PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")])


@dataclass
class ConsistencyParams:
    max_reproj_error: float = 1.0
    max_rel_depth_diff: float = 0.01
    min_consistent_views: int = 2
    enforce_range: bool = True

    def validate(self) -> "ConsistencyParams":
        if not (self.max_reproj_error > 0 and self.max_rel_depth_diff > 0):
            raise ConfigError("consistency thresholds must be positive")
        if self.min_consistent_views < 1:
            raise ConfigError("min_consistent_views must be >= 1")
        return self


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3) float64, world frame
    colors: np.ndarray  # (N, 3) uint8
    source: np.ndarray  # (N, 3) int: view, row, column of the first contributing pixel

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        self.source = np.asarray(self.source, dtype=np.int64).reshape(-1, 3)
        if not (len(self.points) == len(self.colors) == len(self.source)):
            raise InvalidInputError("points, colors and source must have equal length")
        if not np.all(np.isfinite(self.points)):
            raise InvalidInputError("point coordinates must be finite")

    def __len__(self):
        return len(self.points)

    @property
    def empty(self) -> bool:
        return len(self.points) == 0

    @classmethod
    def from_points(cls, points, colors=None) -> "PointCloud":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if colors is None:
            colors = np.full((len(points), 3), 255, dtype=np.uint8)
        src = np.full((len(points), 3), -1, dtype=np.int64)
        return cls(points, colors, src)


# --------------------------------------------------------------------------
# consistency
# --------------------------------------------------------------------------

def _sample_depth(field: DepthField, pix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth lookup; any invalid neighbour with weight makes the sample invalid."""
    H, W = field.depth.shape
    x, y = pix[..., 0], pix[..., 1]
    inside = np.isfinite(x) & np.isfinite(y) & (x >= -0.5) & (x <= W - 0.5) & (y >= -0.5) & (y <= H - 0.5)
    xs = np.clip(np.where(inside, x, 0.0), 0.0, W - 1)
    ys = np.clip(np.where(inside, y, 0.0), 0.0, H - 1)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx, wy = xs - x0, ys - y0
    out = np.zeros(x.shape)
    ok = inside.copy()
    for yy, xx, w in ((y0, x0, (1 - wx) * (1 - wy)), (y0, x1, wx * (1 - wy)),
                      (y1, x0, (1 - wx) * wy), (y1, x1, wx * wy)):
        ok &= (w <= 0) | field.valid[yy, xx]
        out += w * field.depth[yy, xx]
    return np.where(ok, out, 0.0), ok


def pair_consistency(d_ref: DepthField, cam_ref: CameraView, d_src: DepthField,
                     cam_src: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ``(relative depth difference, round-trip displacement)``.

    Pixels that cannot be checked (invalid, behind a camera, outside the
    source frame or landing on invalid source depth) get ``inf`` in both.
    """
    grid = geom.pixel_grid(cam_ref.width, cam_ref.height)
    P = geom.reproject_batch(grid, d_ref.depth, cam_ref)
    pix_s, z_s, front = geom.project_batch(P, cam_src)
    depth_s, ok = _sample_depth(d_src, np.where(front[..., None], pix_s, np.nan))
    ok &= front & d_ref.valid
    Q = geom.reproject_batch(np.where(ok[..., None], pix_s, 0.0), np.where(ok, depth_s, 1.0), cam_src)
    pix_back, z_back, front_back = geom.project_batch(Q, cam_ref)
    ok &= front_back
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.abs(z_back - d_ref.depth) / d_ref.depth
        disp = np.linalg.norm(pix_back - grid, axis=-1)
    return np.where(ok, rel, np.inf), np.where(ok, disp, np.inf)


def geometric_consistency_mask(depths: Sequence[DepthField], cams: Sequence[CameraView],
                               params: ConsistencyParams | None = None,
                               return_counts: bool = False):
    """Per-view survival masks; ``cams`` must match the depth-map resolution.

    With ``return_counts`` the number of consistent sources per pixel is
    returned as well.
    """
    params = (params or ConsistencyParams()).validate()
    n = len(depths)
    if n != len(cams):
        raise InvalidInputError("one camera per depth map is required")
    if n < params.min_consistent_views + 1:
        raise ConfigError(f"{n} views cannot provide {params.min_consistent_views} consistent sources")
    for d, c in zip(depths, cams):
        if d.depth.shape != (c.height, c.width):
            raise InvalidInputError("depth map and camera resolution differ")
    masks, counts = [], []
    for r in range(n):
        count = np.zeros(depths[r].depth.shape, dtype=np.int64)
        for s in range(n):
            if s == r:
                continue
            rel, disp = pair_consistency(depths[r], cams[r], depths[s], cams[s])
            depth_ok = rel <= params.max_rel_depth_diff
            reproj_ok = disp <= params.max_reproj_error
            count += depth_ok & reproj_ok
        keep = depths[r].valid & (count >= params.min_consistent_views)
        if params.enforce_range:
            d = depths[r].depth
            keep &= (d >= cams[r].depth_min) & (d <= cams[r].depth_max)
        masks.append(keep)
        counts.append(count)
    return (masks, counts) if return_counts else masks


# --------------------------------------------------------------------------
# fusion
# --------------------------------------------------------------------------

def sample_colors(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Image colours at the pixel centres of a ``width x height`` raster of the same view."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = img[..., :3]
    H, W = img.shape[:2]
    xs = np.clip(np.round((np.arange(width) + 0.5) * W / width - 0.5).astype(int), 0, W - 1)
    ys = np.clip(np.round((np.arange(height) + 0.5) * H / height - 0.5).astype(int), 0, H - 1)
    out = img[ys[:, None], xs[None, :]]
    if out.dtype != np.uint8:
        out = np.clip(np.round(out * 255 if out.max() <= 1.0 else out), 0, 255).astype(np.uint8)
    return out


def merge_radius(depths: Sequence[DepthField], masks: Sequence[np.ndarray],
                 cams: Sequence[CameraView]) -> float:
    """Half the median metric pixel footprint over all surviving pixels."""
    sizes = []
    for d, m, c in zip(depths, masks, cams):
        f = 0.5 * (c.intrinsics[0, 0] + c.intrinsics[1, 1])
        sizes.append(d.depth[m] / f)
    sizes = np.concatenate(sizes) if sizes else np.zeros(0)
    return 0.5 * float(np.median(sizes)) if sizes.size else 0.0


def merge_points(points: np.ndarray, colors: np.ndarray, source: np.ndarray,
                 radius: float) -> PointCloud:
    """Greedy deterministic merge over a spatial hash.

    Points are visited in input order; each joins the first existing
    cluster whose running centroid lies within ``radius`` and comes from
    a different view, otherwise it opens a new cluster.  Points of one
    view never merge with each other.
    """
    if radius <= 0 or len(points) == 0:
        return PointCloud(points, colors, source)
    cell = radius
    grid: dict[tuple[int, int, int], list[int]] = {}
    sums, csum, count, first, views = [], [], [], [], []
    keys = np.floor(points / cell).astype(np.int64)
    for i in range(len(points)):
        p = points[i]
        kx, ky, kz = keys[i]
        best = -1
        best_d = radius
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for c in grid.get((kx + dx, ky + dy, kz + dz), ()):
                        if source[i, 0] in views[c]:
                            continue
                        dist = np.linalg.norm(sums[c] / count[c] - p)
                        if dist <= best_d:
                            best, best_d = c, dist
        if best < 0:
            best = len(sums)
            sums.append(p.copy())
            csum.append(colors[i].astype(np.float64))
            count.append(1)
            first.append(source[i])
            views.append({int(source[i, 0])})
            grid.setdefault((kx, ky, kz), []).append(best)
        else:
            sums[best] += p
            csum[best] += colors[i]
            count[best] += 1
            views[best].add(int(source[i, 0]))
    cnt = np.asarray(count, dtype=np.float64)[:, None]
    pts = np.asarray(sums) / cnt
    cols = np.clip(np.round(np.asarray(csum) / cnt), 0, 255).astype(np.uint8)
    return PointCloud(pts, cols, np.asarray(first))


def fuse_to_point_cloud(depths: Sequence[DepthField], masks: Sequence[np.ndarray],
                        images: Sequence[np.ndarray], cams: Sequence[CameraView],
                        radius: float | None = None) -> PointCloud:
    """Lift surviving pixels to the world frame and merge near-duplicates across views."""
    pts, cols, src = [], [], []
    for v, (d, m, img, cam) in enumerate(zip(depths, masks, images, cams)):
        ys, xs = np.nonzero(m)
        if len(ys) == 0:
            continue
        pix = np.stack([xs, ys], axis=-1).astype(np.float64)
        pts.append(geom.reproject_batch(pix, d.depth[ys, xs], cam))
        cols.append(sample_colors(img, cam.width, cam.height)[ys, xs])
        src.append(np.stack([np.full_like(ys, v), ys, xs], axis=-1))
    if not pts:
        log.warning("no pixel survived filtering; the point cloud is empty")
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros((0, 3), np.int64))
    if radius is None:
        radius = merge_radius(depths, masks, cams)
    return merge_points(np.concatenate(pts), np.concatenate(cols), np.concatenate(src), radius)


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

def ply_header(n: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(cloud: PointCloud, path) -> None:
    rec = np.empty(len(cloud), dtype=PLY_DTYPE)
    for k, name in enumerate("xyz"):
        rec[name] = cloud.points[:, k]
    for k, name in enumerate(("red", "green", "blue")):
        rec[name] = cloud.colors[:, k]
    with open(path, "wb") as fh:
        fh.write(ply_header(len(cloud)))
        fh.write(rec.tobytes())


def read_ply(path) -> PointCloud:
    """Read the layout produced by :func:`write_ply` (and nothing else)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise ParseError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    n = None
    for lineno, line in enumerate(header, 1):
        parts = line.split()
        if parts[:2] == ["element", "vertex"] and len(parts) == 3:
            try:
                n = int(parts[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad vertex count {parts[2]!r}") from None
    if n is None or n < 0:
        raise ParseError(f"{path}: missing vertex count")
    if ply_header(n) != raw[:end + len(b"end_header\n")]:
        raise ParseError(f"{path}: unsupported PLY layout")
    body = raw[end + len(b"end_header\n"):]
    if len(body) != n * PLY_DTYPE.itemsize:
        raise ParseError(f"{path}: expected {n * PLY_DTYPE.itemsize} bytes of vertex data, found {len(body)}")
    rec = np.frombuffer(body, dtype=PLY_DTYPE, count=n)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1).astype(np.float64)
    cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=-1)
    if not np.all(np.isfinite(pts)):
        raise ParseError(f"{path}: non-finite coordinates")
    return PointCloud(pts, cols, np.full((n, 3), -1, dtype=np.int64))
