"""Rays, planes, the pinhole camera and yaw-friendly SE(3) poses.

World convention: right-handed, ground plane ``z = 0`` with normal ``+z``.
Camera frame follows the usual computer-vision layout (x right, y down,
z forward), so ``X_cam = R @ X_world + t`` and ``u = f X/Z + c_u``.
Quaternions are stored ``(x, y, z, w)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PointBehindCamera, RayParallelToPlane, RayPointsAway

EPS_PARALLEL = 1e-9
EPS_DEPTH = 1e-6


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen(self.origin, (3,)))
        object.__setattr__(self, "direction", _frozen(normalize(self.direction), (3,)))

    def at(self, depth: float) -> np.ndarray:
        return self.origin + depth * self.direction


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "normal", _frozen(normalize(self.normal), (3,)))
        object.__setattr__(self, "point", _frozen(self.point, (3,)))

    def signed_distance(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.point) @ self.normal


GROUND = Plane()


def intersect_ray_plane(ray: Ray, plane: Plane, eps: float = EPS_PARALLEL):
    """Return ``(depth, point)`` where ``ray`` meets ``plane``."""
    denom = float(ray.direction @ plane.normal)
    if abs(denom) <= eps:
        raise RayParallelToPlane(f"ray direction is parallel to the plane (|d.n| = {abs(denom):.3g})")
    depth = float((plane.point - ray.origin) @ plane.normal) / denom
    if depth < 0.0:
        raise RayPointsAway(f"plane lies behind the ray origin (depth {depth:.6g})")
    return depth, ray.origin + depth * ray.direction


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with square pixels and no skew.

    ``rotation``/``translation`` are world-to-camera extrinsics.  Pixel
    centres sit at integer coordinates, so pixel ``(row i, col j)`` is
    ``(u, v) = (j, i)``.
    """

    focal: float
    cu: float
    cv: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int = 128
    height: int = 128

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("camera rotation must be a proper orthonormal matrix")
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cu < self.width and 0 <= self.cv < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *, focal: float,
                width: int = 128, height: int = 128, cu: float | None = None,
                cv: float | None = None) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        forward = normalize(np.asarray(target, dtype=np.float64) - eye)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            # looking along the up vector; any horizontal right axis will do
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right = normalize(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(
            focal=float(focal),
            cu=width / 2 if cu is None else float(cu),
            cv=height / 2 if cv is None else float(cv),
            rotation=R,
            translation=-R @ eye,
            width=width,
            height=height,
        )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cu], [0.0, self.focal, self.cv], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def pixel_direction(self, u, v) -> np.ndarray:
        """Unit world-space directions of the camera rays through ``(u, v)``."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d_cam = np.stack([(u - self.cu) / self.focal, (v - self.cv) / self.focal, np.ones_like(u)], axis=-1)
        d = d_cam @ self.rotation  # R^T d_cam, row-wise
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return u, v


def project_point(camera: CameraModel, P, eps: float = EPS_DEPTH) -> np.ndarray:
    """Project a world point to pixel coordinates ``(u, v)``."""
    Xc = camera.rotation @ np.asarray(P, dtype=np.float64) + camera.translation
    if Xc[2] <= eps:
        raise PointBehindCamera(f"camera-frame depth {Xc[2]:.3g} is not positive")
    p = camera.K @ Xc
    return p[:2] / p[2]


def project_points(camera: CameraModel, P) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection; returns ``(uv, depth)`` without depth checks."""
    Xc = np.asarray(P, dtype=np.float64) @ camera.rotation.T + camera.translation
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([camera.focal * Xc[..., 0] / z + camera.cu, camera.focal * Xc[..., 1] / z + camera.cv], axis=-1)
    return uv, z


def pixel_to_ground(camera: CameraModel, pixel, plane: Plane = GROUND) -> np.ndarray:
    """Back-project a pixel onto ``plane``."""
    u, v = pixel
    ray = Ray(camera.center, camera.pixel_direction(u, v))
    return intersect_ray_plane(ray, plane)[1]


def ground_points(camera: CameraModel, plane: Plane = GROUND, eps: float = EPS_PARALLEL):
    """Ground intersection of every pixel ray.

    Returns ``(points, hit)`` with ``points`` of shape ``(H, W, 3)``; rows of
    ``points`` where ``hit`` is False are undefined (filled with NaN).
    """
    u, v = camera.pixel_grid()
    d = camera.pixel_direction(u, v)
    o = camera.center
    denom = d @ plane.normal
    num = float((plane.point - o) @ plane.normal)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = num / denom
    hit = (np.abs(denom) > eps) & (depth >= 0) & np.isfinite(depth)
    pts = o + np.where(hit, depth, np.nan)[..., None] * d
    return pts, hit


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_matrix_jacobian(q) -> np.ndarray:
    """``dR/dq`` for the unit-quaternion rotation formula, shape ``(3, 3, 4)``."""
    x, y, z, w = q
    J = np.zeros((3, 3, 4))
    J[0, 0] = [0, -4 * y, -4 * z, 0]
    J[0, 1] = [2 * y, 2 * x, -2 * w, -2 * z]
    J[0, 2] = [2 * z, 2 * w, 2 * x, 2 * y]
    J[1, 0] = [2 * y, 2 * x, 2 * w, 2 * z]
    J[1, 1] = [-4 * x, 0, -4 * z, 0]
    J[1, 2] = [-2 * w, 2 * z, 2 * y, -2 * x]
    J[2, 0] = [2 * z, -2 * w, 2 * x, -2 * y]
    J[2, 1] = [2 * w, 2 * z, 2 * y, 2 * x]
    J[2, 2] = [-4 * x, -4 * y, 0, 0]
    return J


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` in (x, y, z, w) order."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``y = R(Q) x + T``."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quaternion: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        q = np.asarray(self.quaternion, dtype=np.float64)
        if q.shape != (4,):
            raise ValueError("quaternion must have 4 components (x, y, z, w)")
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and nonzero")
        if abs(n - 1.0) > 0.0:
            q = q / n
        object.__setattr__(self, "quaternion", _frozen(q))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "PoseSE3":
        return cls(translation, (0.0, 0.0, math.sin(yaw / 2), math.cos(yaw / 2)))

    @property
    def yaw(self) -> float:
        x, y, z, w = self.quaternion
        return math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))

    @property
    def is_yaw_only(self) -> bool:
        return self.quaternion[0] == 0.0 and self.quaternion[1] == 0.0

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def apply(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_inverse(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.translation) @ self.rotation

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """Pose equivalent to applying ``other`` first, then ``self``."""
        return PoseSE3(self.rotation @ other.translation + self.translation,
                       quat_multiply(self.quaternion, other.quaternion))

    def with_translation(self, translation) -> "PoseSE3":
        return PoseSE3(translation, self.quaternion)


IDENTITY_POSE = PoseSE3()


def apply_pose(pose: PoseSE3, x) -> np.ndarray:
    return pose.apply(x)


def apply_pose_inverse(pose: PoseSE3, y) -> np.ndarray:
    return pose.apply_inverse(y)


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    return a.compose(b)


def hemisphere_sample(rng: np.random.Generator, radius: float) -> np.ndarray:
    """Area-uniform point on the upper hemisphere ``z > 0`` of given radius."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    z = 1.0 - rng.random()  # (0, 1]
    phi = 2.0 * math.pi * rng.random()
    s = math.sqrt(max(0.0, 1.0 - z * z))
    p = np.array([s * math.cos(phi), s * math.sin(phi), z])
    return radius * p / np.linalg.norm(p)


def spherical_to_cartesian(azimuth: float, elevation: float, radius: float) -> np.ndarray:
    ce = math.cos(elevation)
    return radius * np.array([ce * math.cos(azimuth), ce * math.sin(azimuth), math.sin(elevation)])


def cartesian_to_spherical(p) -> tuple[float, float, float]:
    x, y, z = (float(c) for c in p)
    r = math.sqrt(x * x + y * y + z * z)
    return math.atan2(y, x), math.asin(z / r), r
