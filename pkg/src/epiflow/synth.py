"""Ray-cast synthetic scenes with exact ground-truth depth.

Surfaces are analytic (plane, sphere in front of a backdrop, boxes on a
backdrop) and carry a procedural value-noise albedo defined in world
coordinates, so every view sees the same texture.  Depth is the ray
parameter of the first hit, which for rays ``C + t * R^T K^-1 [x, y, 1]``
equals the camera-frame z coordinate exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import geom
from .errors import ConfigError
from .geom import CameraView

PRESETS = ("plane", "sphere", "boxes")
SPHERE_RADIUS = 0.5


@dataclass
class SceneSpec:
    preset: str = "plane"
    width: int = 160
    height: int = 128
    n_views: int = 3
    focal: float = 800.0
    ring_radius: float = 0.37
    distance: float = 2.0
    toe_in: bool = True
    depth_min: float = 1.4
    depth_max: float = 3.0
    texture_period: float = 0.12
    octaves: int = 4
    supersample: int = 4
    name: str = ""

    def validate(self) -> "SceneSpec":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.n_views < 2:
            raise ConfigError("need at least two views")
        if not self.ring_radius > geom.EPS_BASELINE:
            raise ConfigError("camera ring has zero baseline")
        if self.width <= 0 or self.height <= 0 or self.focal <= 0:
            raise ConfigError("image size and focal length must be positive")
        if not 0 < self.depth_min < self.depth_max:
            raise ConfigError("invalid depth range")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class SyntheticScene:
    spec: SceneSpec
    cameras: list[CameraView]
    images: list[np.ndarray]  # (H, W, 3) uint8
    gt_depths: list[np.ndarray]  # (H, W) float64, full resolution
    seed: int = 0
    pairs: list[list[int]] = field(default_factory=list)


# --------------------------------------------------------------------------
# texture
# --------------------------------------------------------------------------

class ValueNoise:
    """Seeded 3-D value noise on an integer lattice with smoothstep blending."""

    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        self.perm = rng.permutation(256).astype(np.int64)
        self.values = rng.random(256)

    def _lattice(self, ix, iy, iz):
        p = self.perm
        return self.values[p[(p[(p[ix & 255] + iy) & 255] + iz) & 255]]

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        base = np.floor(pts)
        frac = pts - base
        s = frac * frac * (3.0 - 2.0 * frac)
        ix, iy, iz = (base[..., k].astype(np.int64) for k in range(3))
        out = np.zeros(pts.shape[:-1])
        for dx in (0, 1):
            wx = s[..., 0] if dx else 1 - s[..., 0]
            for dy in (0, 1):
                wy = s[..., 1] if dy else 1 - s[..., 1]
                for dz in (0, 1):
                    wz = s[..., 2] if dz else 1 - s[..., 2]
                    out += wx * wy * wz * self._lattice(ix + dx, iy + dy, iz + dz)
        return out


def albedo(points: np.ndarray, seed: int, period: float, octaves: int) -> np.ndarray:
    """Grey level in ``[0.1, 0.9]`` from summed noise octaves."""
    total = np.zeros(points.shape[:-1])
    norm = 0.0
    for k in range(octaves):
        noise = ValueNoise(seed * 101 + k)
        amp = 0.6 ** k
        total += amp * noise(points / (period / 2 ** k) + 17.3 * k)
        norm += amp
    return 0.1 + 0.8 * total / norm


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------

def _hit_plane(origin, dirs, z0):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z0 - origin[2]) / dirs[..., 2]
    return np.where(t > 0, t, np.inf)


def _hit_sphere(origin, dirs, centre, radius):
    oc = origin - centre
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(dirs * oc, axis=-1)
    c = float(oc @ oc) - radius ** 2
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, t1)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _hit_box(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.max(np.minimum(t1, t2), axis=-1)
    tmax = np.min(np.maximum(t1, t2), axis=-1)
    hit = (tmin <= tmax) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def surface_hits(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Ray parameter of the first surface hit (``inf`` for misses)."""
    d = spec.distance
    if spec.preset == "plane":
        return _hit_plane(origin, dirs, d)
    if spec.preset == "sphere":
        r = SPHERE_RADIUS
        return np.minimum(_hit_plane(origin, dirs, d + r + 0.2),
                          _hit_sphere(origin, dirs, np.array([0.0, 0.0, d + r]), r))
    back = d + 0.3
    t = _hit_plane(origin, dirs, back)
    for lo, hi in _boxes(d, spec.distance * spec.width / (2.0 * spec.focal)):
        t = np.minimum(t, _hit_box(origin, dirs, lo, hi))
    return t


def _boxes(d, half_width):
    """Three boxes standing on the backdrop; lateral extents scale with the view."""
    s = half_width / 0.8
    return [
        (np.array([-0.55 * s, -0.35 * s, d - 0.15]), np.array([-0.05 * s, 0.25 * s, d + 0.3])),
        (np.array([0.1 * s, -0.4 * s, d - 0.05]), np.array([0.6 * s, 0.0, d + 0.3])),
        (np.array([0.05 * s, 0.1 * s, d + 0.05]), np.array([0.45 * s, 0.45 * s, d + 0.3])),
    ]


def world_rays(cam: CameraView, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ray origin and directions whose parameter equals camera-frame depth."""
    dirs_cam = geom.homogeneous(pixels) @ cam.K_inv.T
    return cam.center, dirs_cam @ cam.rotation


def render_depth(spec: SceneSpec, cam: CameraView) -> np.ndarray:
    origin, dirs = world_rays(cam, geom.pixel_grid(cam.width, cam.height))
    return surface_hits(spec, origin, dirs)


def ring_cameras(spec: SceneSpec) -> list[CameraView]:
    K = np.array([[spec.focal, 0.0, (spec.width - 1) / 2.0],
                  [0.0, spec.focal, (spec.height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    target = np.array([0.0, 0.0, spec.distance])
    cams = []
    for i in range(spec.n_views):
        theta = np.pi / 2 + 2 * np.pi * i / spec.n_views
        C = np.array([spec.ring_radius * np.cos(theta), spec.ring_radius * np.sin(theta), 0.0])
        if spec.toe_in:
            f = target - C
            f /= np.linalg.norm(f)
            x = np.cross([0.0, 1.0, 0.0], f)
            x /= np.linalg.norm(x)
            y = np.cross(f, x)
            R = np.stack([x, y, f])
        else:
            R = np.eye(3)
        cams.append(CameraView(K, R, -R @ C, spec.depth_min, spec.depth_max, spec.width, spec.height))
    return cams


def pairs_by_distance(cams: list[CameraView]) -> list[list[int]]:
    centres = np.array([c.center for c in cams])
    out = []
    for i in range(len(cams)):
        dist = np.linalg.norm(centres - centres[i], axis=1)
        order = [int(j) for j in np.argsort(dist, kind="stable") if j != i]
        out.append(order)
    return out


def render_scene(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    spec.validate()
    cams = ring_cameras(spec)
    images, depths = [], []
    ss = spec.supersample
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    for cam in cams:
        depth = render_depth(spec, cam)
        if not np.all(np.isfinite(depth)):
            raise ConfigError("scene does not cover the whole image")
        grid = geom.pixel_grid(cam.width, cam.height)
        acc = np.zeros((cam.height, cam.width))
        for sy in sub:
            for sx in sub:
                origin, dirs = world_rays(cam, grid + np.array([sx, sy]))
                t = surface_hits(spec, origin, dirs)
                acc += albedo(origin + dirs * t[..., None], seed, spec.texture_period, spec.octaves)
        grey = acc / ss ** 2
        rgb = np.stack([grey, 0.92 * grey + 0.04, 0.84 * grey + 0.08], axis=-1)
        images.append(np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8))
        depths.append(depth)
    return SyntheticScene(spec, cams, images, depths, seed, pairs_by_distance(cams))


def footprint(depth: np.ndarray, cam: CameraView) -> float:
    """Mean metric size of one pixel of ``cam`` at the given depths."""
    f = 0.5 * (cam.intrinsics[0, 0] + cam.intrinsics[1, 1])
    return float(np.mean(depth) / f)


def textured_mask(image: np.ndarray, factor: int, threshold: float = 0.01) -> np.ndarray:
    """Pixels of the ``1/factor`` raster whose 3x3 grey-level std exceeds ``threshold``."""
    from .feat import box_downsample, pad_to_multiple, to_gray

    g = box_downsample(pad_to_multiple(to_gray(image)), factor)
    p = np.pad(g, 1, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(p, (3, 3))
    return win.std(axis=(-1, -2)) > threshold


def covisible_mask(spec: SceneSpec, cam_r: CameraView, sources: list[CameraView],
                   rel_tol: float = 0.01) -> np.ndarray:
    """Pixels of ``cam_r`` whose surface point is seen by at least one source.

    A source sees the point when it projects inside the source frame and
    the analytic depth at that pixel agrees within ``rel_tol`` (no
    occluder in front).  ``cam_r`` may be at any resolution; sources are
    rescaled to the same factor.
    """
    depth = render_depth(spec, cam_r)
    P = geom.reproject_batch(geom.pixel_grid(cam_r.width, cam_r.height), depth, cam_r)
    seen = np.zeros(depth.shape, dtype=bool)
    for cam in sources:
        factor = cam.width / cam_r.width
        small = cam.scaled(factor, cam_r.width, cam_r.height) if factor != 1 else cam
        pix, z, front = geom.project_batch(P, small)
        inside = front & (pix[..., 0] >= -0.5) & (pix[..., 0] <= small.width - 0.5) \
            & (pix[..., 1] >= -0.5) & (pix[..., 1] <= small.height - 0.5)
        origin, dirs = world_rays(small, np.where(inside[..., None], pix, 0.0))
        t = surface_hits(spec, origin, dirs)
        seen |= inside & (np.abs(t - z) <= rel_tol * z)
    return seen
