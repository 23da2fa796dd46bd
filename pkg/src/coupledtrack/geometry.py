"""Pinhole camera geometry shared by fusion, filtering and simulation.

Conventions: camera frame has x right, y down, z forward (KITTI style).
An :class:`EgoPose` maps world points into the camera frame,
``X_cam = R @ X_world + t``. The world frame is the first camera frame of a
sequence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PARALLEL_TOL = 1e-9


class GeometryError(ValueError):
    pass


class BehindCameraError(GeometryError):
    """A point has non-positive depth in the camera frame."""


class NoIntersectionError(GeometryError):
    """A viewing ray does not hit the ground plane in front of the camera."""


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    u0: float
    v0: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if not 0 <= self.u0 <= self.image_width:
            raise ValueError("u0 outside the image")
        if not 0 <= self.v0 <= self.image_height:
            raise ValueError("v0 outside the image")


@dataclass(frozen=True, eq=False)
class EgoPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "EgoPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_camera_to_world(cls, matrix) -> "EgoPose":
        """Build from a 3x4 camera-to-world matrix (KITTI odometry poses)."""
        M = np.asarray(matrix, dtype=float).reshape(3, 4)
        R = M[:, :3].T
        return cls(R, -R @ M[:, 3])

    def camera_to_world(self) -> np.ndarray:
        out = np.empty((3, 4))
        out[:, :3] = self.rotation.T
        out[:, 3] = self.center
        return out

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points_world) -> np.ndarray:
        p = np.asarray(points_world, dtype=float)
        return p @ self.rotation.T + self.translation

    def to_world(self, points_camera) -> np.ndarray:
        p = np.asarray(points_camera, dtype=float)
        return (p - self.translation) @ self.rotation

    def __eq__(self, other):
        if not isinstance(other, EgoPose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True, eq=False)
class GroundPlane:
    """Plane ``{x : normal . x = offset}``; ``normal`` points up, away from the road."""
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("ground plane normal must be a unit vector")
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_camera_height(cls, height: float) -> "GroundPlane":
        # y points down in the camera frame, so the road sits at y = +height.
        return cls(np.array([0.0, -1.0, 0.0]), -float(height))

    def tangent_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane (lateral, longitudinal) unit axes closest to world x and z."""
        n = self.normal
        ex = np.array([1.0, 0.0, 0.0]) - n[0] * n
        if np.linalg.norm(ex) < 1e-6:
            ex = np.array([0.0, 0.0, 1.0]) - n[2] * n
        ex /= np.linalg.norm(ex)
        ez = np.cross(ex, n)
        if ez[2] < 0:
            ez = -ez
        return ex, ez

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal - self.offset

    def __eq__(self, other):
        if not isinstance(other, GroundPlane):
            return NotImplemented
        return np.array_equal(self.normal, other.normal) and self.offset == other.offset

    def __hash__(self):
        return hash((self.normal.tobytes(), self.offset))


@dataclass(frozen=True)
class BBox2D:
    """Center-format image box, in pixels."""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width/height must be positive, got {self.w}x{self.h}")

    @classmethod
    def from_corners(cls, left, top, right, bottom) -> "BBox2D":
        return cls(0.5 * (left + right), 0.5 * (top + bottom), right - left, bottom - top)

    @classmethod
    def from_array(cls, a) -> "BBox2D":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - 0.5 * self.w, self.y - 0.5 * self.h,
                self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])

    @property
    def footpoint(self) -> np.ndarray:
        return np.array([self.x, self.y + 0.5 * self.h])


def project(point_camera, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixel coordinates."""
    p = np.asarray(point_camera, dtype=float)
    if p[2] <= 0:
        raise BehindCameraError(f"point has depth {p[2]:.6g} <= 0")
    return np.array([intr.f * p[0] / p[2] + intr.u0, intr.f * p[1] / p[2] + intr.v0])


def project_many(points_camera, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection; rows with non-positive depth come back as NaN."""
    p = np.atleast_2d(np.asarray(points_camera, dtype=float))
    z = p[:, 2]
    out = np.full((len(p), 2), np.nan)
    ok = z > 0
    out[ok, 0] = intr.f * p[ok, 0] / z[ok] + intr.u0
    out[ok, 1] = intr.f * p[ok, 1] / z[ok] + intr.v0
    return out


def pixel_ray(pixel, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray direction with unit depth through ``pixel``."""
    return np.array([(pixel[0] - intr.u0) / intr.f, (pixel[1] - intr.v0) / intr.f, 1.0])


def backproject_to_ground(pixel, intr: CameraIntrinsics, ego: EgoPose,
                          plane: GroundPlane) -> np.ndarray:
    """Intersect the viewing ray of ``pixel`` with the ground plane (world frame)."""
    d_world = ego.rotation.T @ pixel_ray(pixel, intr)
    c = ego.center
    denom = plane.normal @ d_world
    if abs(denom) < PARALLEL_TOL:
        raise NoIntersectionError("viewing ray is parallel to the ground plane")
    s = (plane.offset - plane.normal @ c) / denom
    if s <= 0:
        raise NoIntersectionError("ground intersection lies behind the camera")
    return c + s * d_world


def ego_correct_bbox(bbox: BBox2D, depth_estimate: float, intr: CameraIntrinsics,
                     ego_prev: EgoPose, ego_curr: EgoPose) -> BBox2D:
    """Move a box from the previous camera frame into the current one.

    The footpoint is lifted to 3D at ``depth_estimate`` along its viewing ray,
    carried through the relative camera motion and reprojected. Width and
    height are kept.
    """
    if depth_estimate <= 0:
        raise ValueError("depth estimate must be positive")
    if ego_prev == ego_curr:
        return bbox
    p_prev = depth_estimate * pixel_ray(bbox.footpoint, intr)
    p_curr = ego_curr.to_camera(ego_prev.to_world(p_prev))
    # BehindCameraError here means the box left the frustum.
    u, v = project(p_curr, intr)
    return BBox2D(u, v - 0.5 * bbox.h, bbox.w, bbox.h)


def iou_2d(a: BBox2D, b: BBox2D) -> float:
    al, at, ar, ab = a.corners()
    bl, bt, br, bb = b.corners()
    iw = min(ar, br) - max(al, bl)
    ih = min(ab, bb) - max(at, bt)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return float(min(1.0, inter / union))


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two arrays of center-format boxes (N,4) and (M,4)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    a_lt = a[:, None, :2] - 0.5 * a[:, None, 2:]
    a_rb = a[:, None, :2] + 0.5 * a[:, None, 2:]
    b_lt = b[None, :, :2] - 0.5 * b[None, :, 2:]
    b_rb = b[None, :, :2] + 0.5 * b[None, :, 2:]
    wh = np.clip(np.minimum(a_rb, b_rb) - np.maximum(a_lt, b_lt), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, None, 2] * a[:, None, 3]) + (b[None, :, 2] * b[None, :, 3]) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.minimum(out, 1.0)


def box3d_corners(position, size3d, plane: GroundPlane) -> np.ndarray:
    """Eight world-frame corners of an upright box standing on ``position``.

    ``size3d`` is (width, height, length); width runs along the plane's
    lateral axis and length along its longitudinal axis.
    """
    w, h, l = size3d
    ex, ez = plane.tangent_axes()
    up = plane.normal
    p = np.asarray(position, dtype=float)
    corners = []
    for sx in (-0.5, 0.5):
        for sz in (-0.5, 0.5):
            base = p + sx * w * ex + sz * l * ez
            corners.append(base)
            corners.append(base + h * up)
    return np.array(corners)


def projected_box(position, size3d, intr: CameraIntrinsics, ego: EgoPose,
                  plane: GroundPlane) -> BBox2D:
    """Axis-aligned image hull of the projected 3D box."""
    corners_c = ego.to_camera(box3d_corners(position, size3d, plane))
    if np.any(corners_c[:, 2] <= 0):
        raise BehindCameraError("3D box is not fully in front of the camera")
    uv = project_many(corners_c, intr)
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    return BBox2D.from_corners(lo[0], lo[1], hi[0], hi[1])


@dataclass(frozen=True)
class FrameContext:
    """Everything known about the sensor rig at one frame."""
    frame: int
    timestamp: float
    intrinsics: CameraIntrinsics
    ego: EgoPose
    plane: GroundPlane

    def depth_of(self, point_world) -> float:
        return float(self.ego.to_camera(point_world)[2])
