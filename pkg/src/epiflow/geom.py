"""Pinhole camera math and the depth / flow / E-flow conversion kernel.

Conventions
-----------
* Pixels are ``(x, y)`` pairs in the last axis of an array; pixel centres sit
  on integer coordinates.
* A :class:`CameraView` stores a world-to-camera pose: a world point ``X``
  maps to camera coordinates ``R @ X + T``.  When the reference camera sits
  at the world origin (``R = I``, ``T = 0``), a source camera's pose is the
  pose relative to the reference.
* Every function broadcasts over leading axes.  Scalar inputs give scalar
  outputs.
* The public conversion functions raise on the first invalid element.  The
  ``*_batch`` variants used by the pipeline never raise; they return a status
  or validity mask instead.

All arithmetic here is float64; triangulation denominators are
cancellation-prone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateTriangulationError,
    InvalidInputError,
    NegativeDepthError,
    NoEpipolarGeometryError,
)

EPS_Z = 1e-6
EPS_BASELINE = 1e-9
EPS_DENOM_REL = 1e-8  # multiplied by the larger source image dimension
ORTHO_TOL = 1e-9

STATUS_OK = 0
STATUS_DEGENERATE = 1
STATUS_NEGATIVE = 2


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CameraView:
    """Intrinsics, world-to-camera pose and declared depth range of one image."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    depth_min: float
    depth_max: float
    width: int
    height: int

    def __post_init__(self):
        K = _frozen(self.intrinsics)
        R = _frozen(self.rotation)
        T = _frozen(self.translation).reshape(-1)
        if K.shape != (3, 3) or R.shape != (3, 3) or T.shape != (3,):
            raise InvalidInputError("expected K 3x3, R 3x3, T 3-vector")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(T))):
            raise InvalidInputError("camera parameters must be finite")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise InvalidInputError("K must be upper-triangular with K[2][2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise InvalidInputError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvalidInputError("rotation must have determinant +1")
        dmin, dmax = float(self.depth_min), float(self.depth_max)
        if not (0 < dmin < dmax) or not np.isfinite(dmax):
            raise InvalidInputError(f"invalid depth range ({dmin}, {dmax})")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise InvalidInputError("image dimensions must be positive")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)
        object.__setattr__(self, "depth_min", dmin)
        object.__setattr__(self, "depth_max", dmax)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.intrinsics)

    def with_depth_range(self, depth_min: float, depth_max: float) -> "CameraView":
        return CameraView(self.intrinsics, self.rotation, self.translation,
                          depth_min, depth_max, self.width, self.height)

    def scaled(self, factor: float, width: int | None = None,
               height: int | None = None) -> "CameraView":
        """Camera for the same view sampled at ``1/factor`` of the resolution.

        Pixel centres are preserved: full-resolution coordinate ``x`` maps to
        ``(x + 0.5) / factor - 0.5``.
        """
        K = self.intrinsics.copy()
        K[0, :2] /= factor
        K[1, 1] /= factor
        K[0, 2] = (K[0, 2] + 0.5) / factor - 0.5
        K[1, 2] = (K[1, 2] + 0.5) / factor - 0.5
        if width is None:
            width = int(np.ceil(self.width / factor))
        if height is None:
            height = int(np.ceil(self.height / factor))
        return CameraView(K, self.rotation, self.translation,
                          self.depth_min, self.depth_max, width, height)

    def __eq__(self, other):
        if not isinstance(other, CameraView):
            return NotImplemented
        return (np.array_equal(self.intrinsics, other.intrinsics)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation)
                and self.depth_min == other.depth_min
                and self.depth_max == other.depth_max
                and self.width == other.width and self.height == other.height)

    __hash__ = None


class EpipolarFrame(NamedTuple):
    """Unit direction of the source epipolar line for each reference pixel.

    ``anchor`` is the foot of the perpendicular from ``pixel`` (the reference
    pixel position, read in source image coordinates) onto the epipolar line,
    so ``anchor + direction * e`` always lies on the line and
    ``direction . (p_s - pixel) == e`` for any ``p_s`` on it.  When the two
    cameras share intrinsics and orientation the anchor coincides with the
    pixel itself.
    """

    direction: np.ndarray
    anchor: np.ndarray
    pixel: np.ndarray


class Triangulation(NamedTuple):
    depth: np.ndarray
    depth_x: np.ndarray
    depth_y: np.ndarray
    used_x: np.ndarray
    status: np.ndarray


def _out(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


def _pix(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1:] != (2,):
        raise InvalidInputError("pixels need a trailing axis of size 2")
    return p


def homogeneous(p) -> np.ndarray:
    p = _pix(p)
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


def pixel_grid(width: int, height: int) -> np.ndarray:
    """``(height, width, 2)`` array of pixel-centre coordinates."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def relative_pose(cam_r: CameraView, cam_s: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Pose mapping reference-camera coordinates to source-camera coordinates."""
    R = cam_s.rotation @ cam_r.rotation.T
    T = cam_s.translation - R @ cam_r.translation
    return R, T


def reproject(p, depth, cam: CameraView):
    """Lift pixel(s) at the given depth to world coordinates."""
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)):
        raise InvalidInputError("depth must be finite")
    if np.any(depth <= 0):
        raise InvalidInputError("depth must be positive")
    return reproject_batch(p, depth, cam)


def reproject_batch(p, depth, cam: CameraView) -> np.ndarray:
    ray = homogeneous(p) @ cam.K_inv.T
    P_cam = np.asarray(depth, dtype=np.float64)[..., None] * ray
    return (P_cam - cam.translation) @ cam.rotation


def project_batch(P, cam: CameraView):
    """Project world point(s); returns ``(pixel, depth, in_front)``."""
    Pc = np.asarray(P, dtype=np.float64) @ cam.rotation.T + cam.translation
    z = Pc[..., 2]
    in_front = z > EPS_Z
    with np.errstate(divide="ignore", invalid="ignore"):
        uvw = Pc @ cam.intrinsics.T
        pix = uvw[..., :2] / uvw[..., 2:3]
    return pix, z, in_front


def project(P, cam: CameraView):
    """Project world point(s) into ``cam``; returns ``(pixel, depth)``."""
    pix, z, ok = project_batch(P, cam)
    if not np.all(ok):
        raise BehindCameraError(f"{np.count_nonzero(~ok)} point(s) at or behind the camera")
    return pix, _out(z)


def flow_of_pair(p_r, p_s) -> np.ndarray:
    return _pix(p_s) - _pix(p_r)


def depth_to_flow(p_r, depth, cam_r: CameraView, cam_s: CameraView) -> np.ndarray:
    """Flow ``p_s - p_r`` induced by lifting ``p_r`` to ``depth``."""
    p_s, _ = project(reproject(p_r, depth, cam_r), cam_s)
    return p_s - _pix(p_r)


def depth_to_flow_batch(p_r, depth, cam_r: CameraView, cam_s: CameraView):
    p_s, _, ok = project_batch(reproject_batch(p_r, depth, cam_r), cam_s)
    return p_s - _pix(p_r), ok & np.isfinite(depth) & (np.asarray(depth) > 0)


def triangulate(p_r, flow, cam_r: CameraView, cam_s: CameraView) -> Triangulation:
    """Closed-form depth of ``p_r`` from its flow into ``cam_s``.

    Writing the reference ray as ``a = K_r^-1 p_r`` and the source ray rotated
    into the reference frame as ``q = R^T K_s^-1 p_s``, with ``t = -R^T T``,
    the constraint ``d a = d_s q + t`` gives one estimate per image axis::

        d_x = (t_x q_z - t_z q_x) / (a_x q_z - a_z q_x)
        d_y = (t_y q_z - t_z q_y) / (a_y q_z - a_z q_y)

    The x estimate is used when ``|flow_x| >= |flow_y|``, the y estimate
    otherwise.  Never raises; see ``status``.
    """
    p_r = _pix(p_r)
    flow = _pix(flow)
    R, T = relative_pose(cam_r, cam_s)
    a = homogeneous(p_r) @ cam_r.K_inv.T
    q = (homogeneous(p_r + flow) @ cam_s.K_inv.T) @ R
    t = -R.T @ T
    num_x = t[0] * q[..., 2] - t[2] * q[..., 0]
    num_y = t[1] * q[..., 2] - t[2] * q[..., 1]
    den_x = a[..., 0] * q[..., 2] - a[..., 2] * q[..., 0]
    den_y = a[..., 1] * q[..., 2] - a[..., 2] * q[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        depth_x = num_x / den_x
        depth_y = num_y / den_y
    used_x = np.abs(flow[..., 0]) >= np.abs(flow[..., 1])
    den = np.where(used_x, den_x, den_y)
    depth = np.where(used_x, depth_x, depth_y)
    eps = EPS_DENOM_REL * max(cam_s.width, cam_s.height)
    degenerate = ~(np.abs(den) > eps)
    negative = ~degenerate & ~(depth > 0)
    status = np.full(depth.shape, STATUS_OK, dtype=np.uint8)
    status[degenerate] = STATUS_DEGENERATE
    status[negative] = STATUS_NEGATIVE
    depth = np.where(status == STATUS_OK, depth, np.nan)
    return Triangulation(depth, depth_x, depth_y, used_x, status)


def _raise_for_status(status: np.ndarray):
    if np.any(status == STATUS_DEGENERATE):
        raise DegenerateTriangulationError("triangulation denominator below epsilon (pixel near epipole)")
    if np.any(status == STATUS_NEGATIVE):
        raise NegativeDepthError("triangulated depth is not positive")


def flow_to_depth(p_r, flow, cam_r: CameraView, cam_s: CameraView):
    tri = triangulate(p_r, flow, cam_r, cam_s)
    _raise_for_status(tri.status)
    return _out(tri.depth)


def epipolar_frame_batch(p_r, cam_r: CameraView, cam_s: CameraView):
    """Epipolar frame per pixel plus a mask of non-degenerate pixels."""
    p_r = _pix(p_r)
    R, T = relative_pose(cam_r, cam_s)
    if np.linalg.norm(T) <= EPS_BASELINE:
        raise NoEpipolarGeometryError("camera pair has zero baseline")
    # A: image of the point at infinity on the ray, B: image of the reference centre.
    A = (homogeneous(p_r) @ cam_r.K_inv.T) @ R.T @ cam_s.intrinsics.T
    B = cam_s.intrinsics @ T
    v = B[:2] * A[..., 2:3] - A[..., :2] * B[2]
    norm = np.linalg.norm(v, axis=-1)
    scale = np.maximum(np.linalg.norm(A, axis=-1) * np.linalg.norm(B), np.finfo(float).tiny)
    ok = norm > 1e-12 * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        direction = v / norm[..., None]
        line = np.cross(A, B)
        n = line[..., :2]
        offset = (np.sum(n * p_r, axis=-1) + line[..., 2]) / np.sum(n * n, axis=-1)
        anchor = p_r - n * offset[..., None]
    direction = np.where(ok[..., None], direction, np.nan)
    anchor = np.where(ok[..., None], anchor, np.nan)
    return EpipolarFrame(direction, anchor, p_r), ok


def epipolar_frame(p_r, cam_r: CameraView, cam_s: CameraView) -> EpipolarFrame:
    """Unit epipolar direction oriented so E-flow grows with inverse depth."""
    frame, ok = epipolar_frame_batch(p_r, cam_r, cam_s)
    if not np.all(ok):
        raise NoEpipolarGeometryError("pixel coincides with the epipole")
    return frame


def flow_to_eflow(flow, frame: EpipolarFrame):
    return _out(np.sum(_pix(flow) * frame.direction, axis=-1))


def eflow_to_flow(eflow, frame: EpipolarFrame) -> np.ndarray:
    e = np.asarray(eflow, dtype=np.float64)[..., None]
    return frame.anchor + frame.direction * e - frame.pixel


def depth_to_eflow(p_r, depth, cam_r: CameraView, cam_s: CameraView):
    frame = epipolar_frame(p_r, cam_r, cam_s)
    return flow_to_eflow(depth_to_flow(p_r, depth, cam_r, cam_s), frame)


def eflow_to_depth(p_r, eflow, cam_r: CameraView, cam_s: CameraView):
    frame = epipolar_frame(p_r, cam_r, cam_s)
    return flow_to_depth(p_r, eflow_to_flow(eflow, frame), cam_r, cam_s)


def depth_to_eflow_batch(p_r, depth, frame: EpipolarFrame, cam_r: CameraView,
                         cam_s: CameraView):
    flow, ok = depth_to_flow_batch(p_r, depth, cam_r, cam_s)
    return np.sum(flow * frame.direction, axis=-1), ok


def eflow_to_depth_batch(p_r, eflow, frame: EpipolarFrame, cam_r: CameraView,
                         cam_s: CameraView) -> Triangulation:
    return triangulate(p_r, eflow_to_flow(eflow, frame), cam_r, cam_s)


def normalize_depth(depth, d_min: float, d_max: float):
    """Map inverse depth affinely so ``d_min -> 1`` and ``d_max -> 0``."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise InvalidInputError("depth must be positive")
    if not 0 < d_min < d_max:
        raise InvalidInputError("need 0 < d_min < d_max")
    inv_max = 1.0 / d_max
    return _out((1.0 / depth - inv_max) / (1.0 / d_min - inv_max))
