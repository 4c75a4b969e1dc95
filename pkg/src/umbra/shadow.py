"""Differentiable point-light shadow rendering onto the ground plane.

For every camera pixel we back-project onto the ground, march the segment
from the light to that ground point and pool the occupancy of the posed
shape along it.  ``hard`` mode takes the maximum; ``smooth`` mode takes the
Boltzmann-weighted mean ``sum f e^{f/tau} / sum e^{f/tau}``, which stays in
[0, 1] and tends to the maximum as ``tau -> 0``.

Pixels whose camera ray misses the ground, or reaches the object
(occupancy > 0.5) before the ground, are marked invalid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from numba import njit

from . import _kernels
from .errors import NoValidPixels
from .geometry import IDENTITY_POSE, GROUND, CameraModel, Plane, PoseSE3, ground_points, quat_matrix_jacobian
from .generator import GeneratorSpec, decode_jacobian, decode_params, params_to_shape, shape_param_index
from .occfield import ShapeSpec

DEFAULT_SAMPLES = 128
DEFAULT_TAU = 0.1
LIGHT_RADIUS = 3.0
OCCLUSION_THRESHOLD = 0.5
SEGMENTATION_FAR = 10.0
BCE_EPS = 1e-7
CULL_MARGIN = 30.0


def cull_cutoff(sharpness: float) -> float:
    """``F`` beyond which a primitive's soft occupancy is below ``1e-13``."""
    return 1.0 + CULL_MARGIN / sharpness


def occlusion_cutoff(sharpness: float, n_primitives: int, threshold: float = OCCLUSION_THRESHOLD) -> float:
    """``F`` beyond which no primitive can lift the union above ``threshold``.

    The union exceeds ``threshold`` only if some ``f_m > 1 - (1 - threshold)^(1/M)``.
    """
    p = 1.0 - (1.0 - threshold) ** (1.0 / max(n_primitives, 1))
    return 1.0 - math.log(p / (1.0 - p)) / sharpness


@dataclass(frozen=True)
class LightSource:
    position: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, dtype=np.float64).reshape(3)
        p.setflags(write=False)
        object.__setattr__(self, "position", p)

    @classmethod
    def from_spherical(cls, azimuth: float, elevation: float, radius: float = LIGHT_RADIUS) -> "LightSource":
        ce = math.cos(elevation)
        return cls(radius * np.array([ce * math.cos(azimuth), ce * math.sin(azimuth), math.sin(elevation)]))

    @property
    def spherical(self) -> tuple[float, float, float]:
        x, y, z = self.position
        rho = float(np.linalg.norm(self.position))
        return math.atan2(y, x), math.asin(z / rho), rho

    @staticmethod
    def angle_jacobian(azimuth: float, elevation: float, radius: float = LIGHT_RADIUS) -> np.ndarray:
        """``d position / d (azimuth, elevation)``, shape ``(3, 2)``."""
        ca, sa = math.cos(azimuth), math.sin(azimuth)
        ce, se = math.cos(elevation), math.sin(elevation)
        return radius * np.array([[-ce * sa, -se * ca], [ce * ca, -se * sa], [0.0, ce]])


@dataclass
class ShadowImage:
    """``values`` and ``valid`` are ``(H, W)`` arrays (row = image v)."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValueError("values and validity mask must have the same shape")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def binarized(self, threshold: float = 0.5) -> "ShadowImage":
        return ShadowImage((self.values > threshold).astype(np.float64), self.valid.copy())

    def shadow_fraction(self) -> float:
        return float(np.mean(self.values > 0.5))


@dataclass(frozen=True)
class Scene:
    camera: CameraModel
    light: LightSource
    pose: PoseSE3 = IDENTITY_POSE
    plane: Plane = GROUND
    ray_samples: int = DEFAULT_SAMPLES

    def __post_init__(self):
        if self.ray_samples < 2:
            raise ValueError("need at least two samples per ray")
        if self.plane.signed_distance(self.light.position) <= 0:
            raise ValueError("the light must be above the ground plane")

    @cached_property
    def _ground(self):
        pts, hit = ground_points(self.camera, self.plane)
        flat = np.ascontiguousarray(np.nan_to_num(pts.reshape(-1, 3)))
        return flat, hit.reshape(-1)

    @property
    def ground(self) -> np.ndarray:
        """Ground point of every pixel, ``(H*W, 3)``; rows off the ground are 0."""
        return self._ground[0]

    @property
    def ground_hit(self) -> np.ndarray:
        return self._ground[1]

    @property
    def shape_hw(self) -> tuple[int, int]:
        return self.camera.height, self.camera.width

    def with_light(self, light: LightSource) -> "Scene":
        new = replace(self, light=light)
        if "_ground" in self.__dict__:
            new.__dict__["_ground"] = self.__dict__["_ground"]
        return new

    def with_pose(self, pose: PoseSE3) -> "Scene":
        new = replace(self, pose=pose)
        if "_ground" in self.__dict__:
            new.__dict__["_ground"] = self.__dict__["_ground"]
        return new


def _kernel_args(shape: ShapeSpec, pose: PoseSE3):
    # fresh writable copies keep a single compiled signature per kernel
    return (
        np.array(shape.kinds, dtype=np.int64),
        np.array(shape.centers, dtype=np.float64),
        np.array(shape.half_extents, dtype=np.float64),
        np.array(shape.exponents, dtype=np.float64),
        float(shape.sharpness),
        np.array(pose.rotation, dtype=np.float64),
        np.array(pose.translation, dtype=np.float64),
        cull_cutoff(shape.sharpness),
    )


def _posed(scene: Scene, shape: ShapeSpec) -> PoseSE3:
    """The pose actually used: the scene pose composed with the shape's own."""
    return scene.pose.compose(shape.pose)


def camera_occlusion(scene: Scene, shape: ShapeSpec) -> np.ndarray:
    """Pixels whose camera ray meets the object before the ground, flat ``(H*W,)``."""
    ground, hit = scene.ground, scene.ground_hit
    cam = np.broadcast_to(scene.camera.center, ground.shape).copy()
    args = _kernel_args(shape, _posed(scene, shape))
    tight = occlusion_cutoff(shape.sharpness, shape.n_primitives)
    return _kernels.segments_hit(cam, ground, hit, scene.ray_samples, *args, tight, OCCLUSION_THRESHOLD)


def render_shadow(scene: Scene, shape: ShapeSpec, mode: str = "hard", tau: float = DEFAULT_TAU) -> ShadowImage:
    """Render the camera-view shadow image of ``shape`` under ``scene``."""
    if mode not in ("hard", "smooth"):
        raise ValueError(f"unknown mode {mode!r}")
    ground, hit = scene.ground, scene.ground_hit
    light = np.broadcast_to(scene.light.position, ground.shape).copy()
    args = _kernel_args(shape, _posed(scene, shape))
    values = _kernels.render_segments(light, ground, hit, scene.ray_samples, *args, mode == "smooth", float(tau))
    occluded = camera_occlusion(scene, shape)
    H, W = scene.shape_hw
    return ShadowImage(values.reshape(H, W), (hit & ~occluded).reshape(H, W))


def render_segmentation(scene: Scene, shape: ShapeSpec) -> np.ndarray:
    """Binary object mask seen by the camera, ``(H, W)``."""
    cam = scene.camera
    u, v = cam.pixel_grid()
    d = cam.pixel_direction(u, v).reshape(-1, 3)
    ground, hit = scene.ground, scene.ground_hit
    far = cam.center + SEGMENTATION_FAR * d
    ends = np.where(hit[:, None], ground, far)
    starts = np.broadcast_to(cam.center, ends.shape).copy()
    args = _kernel_args(shape, _posed(scene, shape))
    mask = np.ones(ends.shape[0], dtype=bool)
    tight = occlusion_cutoff(shape.sharpness, shape.n_primitives)
    seg = _kernels.segments_hit(starts, np.ascontiguousarray(ends), mask, scene.ray_samples, *args, tight,
                                OCCLUSION_THRESHOLD)
    return seg.reshape(scene.shape_hw)


@njit(cache=True)
def _dense_max(light, ends, hit, samples, R, T, centers, half, expo, k, radii):
    """Per-pixel max of the exact soft-union occupancy over evenly spaced samples."""
    n, M = ends.shape[0], centers.shape[0]
    out = np.zeros(n)
    # primitive centres in the world frame for the bounding-sphere test
    wc = np.empty((M, 3))
    for m in range(M):
        for j in range(3):
            wc[m, j] = T[j] + R[j, 0] * centers[m, 0] + R[j, 1] * centers[m, 1] + R[j, 2] * centers[m, 2]
    for p in range(n):
        if not hit[p]:
            continue
        # parameter window covered by the bounding spheres along this segment
        lo, hi = 1.0, 0.0
        s0, s1, s2 = ends[p, 0] - light[0], ends[p, 1] - light[1], ends[p, 2] - light[2]
        L2 = s0 * s0 + s1 * s1 + s2 * s2
        for m in range(M):
            o0, o1, o2 = light[0] - wc[m, 0], light[1] - wc[m, 1], light[2] - wc[m, 2]
            b = s0 * o0 + s1 * o1 + s2 * o2
            disc = b * b - L2 * (o0 * o0 + o1 * o1 + o2 * o2 - radii[m] * radii[m])
            if disc > 0.0:
                root = math.sqrt(disc)
                lo = min(lo, (-b - root) / L2)
                hi = max(hi, (-b + root) / L2)
        if hi <= lo:
            continue
        i0 = max(0, int(math.floor(lo * samples - 0.5)))
        i1 = min(samples - 1, int(math.ceil(hi * samples - 0.5)))
        best = 0.0
        for i in range(i0, i1 + 1):
            t = (i + 0.5) / samples
            x0 = light[0] + t * s0
            x1 = light[1] + t * s1
            x2 = light[2] + t * s2
            # object frame: y = R^T (x - T)
            u0, u1, u2 = x0 - T[0], x1 - T[1], x2 - T[2]
            keep = 1.0
            for m in range(M):
                F = 0.0
                for j in range(3):
                    y = R[0, j] * u0 + R[1, j] * u1 + R[2, j] * u2
                    r = abs(y - centers[m, j]) / half[m, j]
                    F += r * r if expo[m] == 2.0 else r ** expo[m]
                keep *= 1.0 - 1.0 / (1.0 + math.exp(-k * (1.0 - F)))
            if 1.0 - keep > best:
                best = 1.0 - keep
        out[p] = best
    return out


def dense_reference_shadow(scene: Scene, shape: ShapeSpec, samples: int = 4096) -> np.ndarray:
    """Slow hard-max reference renderer used as a test oracle.

    A direct loop over ``samples`` evenly spaced points per light segment
    with the closed-form occupancy, independent of the production kernels.
    Samples outside every primitive's bounding sphere of radius
    ``sqrt(2) |a|`` are skipped: there every ``F >= 2`` (exponents are at
    least 2), so occupancy is below ``1e-8`` at the default sharpness.
    """
    pose = _posed(scene, shape)
    radii = math.sqrt(2.0) * np.linalg.norm(shape.half_extents, axis=1)
    out = _dense_max(np.array(scene.light.position, dtype=np.float64), np.ascontiguousarray(scene.ground),
                     np.ascontiguousarray(scene.ground_hit), samples, np.array(pose.rotation),
                     np.array(pose.translation, dtype=np.float64), np.array(shape.centers),
                     np.array(shape.half_extents), np.array(shape.exponents, dtype=np.float64),
                     float(shape.sharpness), radii)
    return out.reshape(scene.shape_hw)


def bce_loss(observed: ShadowImage, predicted: ShadowImage) -> float:
    """Mean binary cross-entropy over pixels valid in both images."""
    return bce_loss_and_grad(observed, predicted)[0]


def bce_loss_and_grad(observed: ShadowImage, predicted: ShadowImage, straight_through: bool = True):
    """Loss and ``dL/d predicted.values`` (zero outside the shared valid set).

    With ``straight_through`` (the default) the derivative is evaluated at the
    clamped prediction on every valid pixel, so pixels whose prediction sits
    in the clamp band still pull the render towards the observation.  With
    ``straight_through=False`` the exact derivative of the clamped loss is
    returned (zero inside the band).
    """
    if observed.values.shape != predicted.values.shape:
        raise ValueError("observed and predicted images differ in size")
    V = observed.valid & predicted.valid
    n = int(V.sum())
    if n == 0:
        raise NoValidPixels("no pixel is valid in both images")
    s = observed.values
    raw = predicted.values
    p = np.clip(raw, BCE_EPS, 1.0 - BCE_EPS)
    terms = -(s * np.log(p) + (1.0 - s) * np.log1p(-p))
    loss = float(np.sum(terms[V]) / n)
    keep = V if straight_through else V & (raw > BCE_EPS) & (raw < 1.0 - BCE_EPS)
    grad = np.where(keep, (-(s / p) + (1.0 - s) / (1.0 - p)) / n, 0.0)
    return loss, grad


@dataclass
class ShadowGradients:
    """Gradients of a scalar objective pulled back through the renderer."""

    shape_params: np.ndarray  # (M, 7) [centre, half_extent, exponent]
    sharpness: float
    rotation: np.ndarray  # dL/dR of the object pose, (3, 3)
    translation: np.ndarray  # (3,)
    light_position: np.ndarray  # (3,)
    z: np.ndarray | None = None
    light_angles: np.ndarray | None = None  # (azimuth, elevation)
    quaternion: np.ndarray | None = None  # (x, y, z, w)
    yaw: float | None = None


def pullback_shape(scene: Scene, shape: ShapeSpec, dvalues, mode: str = "smooth", tau: float = DEFAULT_TAU,
                   valid=None) -> ShadowGradients:
    """Backward pass of :func:`render_shadow` for a fixed ``shape``.

    ``dvalues`` is ``dL/d values`` as an ``(H, W)`` array.  Entries at
    ``valid == False`` pixels are discarded before the sweep.
    """
    d = np.asarray(dvalues, dtype=np.float64).reshape(-1)
    if valid is not None:
        d = np.where(np.asarray(valid).reshape(-1), d, 0.0)
    d = np.where(scene.ground_hit, d, 0.0)
    pose = _posed(scene, shape)
    args = _kernel_args(shape, pose)
    g_prim, g_k, g_R, g_T, g_light = _kernels.render_light_backward(
        np.ascontiguousarray(scene.light.position), scene.ground, d, scene.ray_samples, *args,
        mode == "smooth", float(tau))
    return _finish_gradients(scene, pose, g_prim, g_k, g_R, g_T, g_light)


def _finish_gradients(scene: Scene, pose: PoseSE3, g_prim, g_k, g_R, g_T, g_light) -> ShadowGradients:
    # pose = scene.pose o shape.pose; gradients are w.r.t. the composed rotation
    q = pose.quaternion
    g_q = np.einsum("ij,ijk->k", g_R, quat_matrix_jacobian(q))
    az, el, rho = scene.light.spherical
    g_angles = LightSource.angle_jacobian(az, el, rho).T @ g_light
    yaw = pose.yaw
    c, s = math.cos(yaw), math.sin(yaw)
    dRz = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    g_yaw = float(np.sum(g_R * dRz)) if pose.is_yaw_only else None
    return ShadowGradients(g_prim, float(g_k), g_R, g_T, g_light, None, g_angles, g_q, g_yaw)


def shadow_bce_with_grads(observed: ShadowImage, scene: Scene, shape: ShapeSpec, mode: str = "smooth",
                          tau: float = DEFAULT_TAU, straight_through: bool = True):
    """Render, masked BCE against ``observed`` and its gradients in one sweep.

    Equivalent to :func:`render_shadow`, :func:`bce_loss_and_grad` and
    :func:`pullback_shape` in sequence.  Returns ``(loss, image, gradients)``.
    """
    if observed.values.shape != scene.shape_hw:
        raise ValueError("observed and predicted images differ in size")
    hit = scene.ground_hit
    occluded = camera_occlusion(scene, shape)
    valid = observed.valid.reshape(-1) & hit & ~occluded
    if not valid.any():
        raise NoValidPixels("no pixel is valid in both images")
    pose = _posed(scene, shape)
    out = _kernels.light_bce_pass(
        np.array(scene.light.position), scene.ground, hit, valid, np.ascontiguousarray(observed.values.reshape(-1)),
        scene.ray_samples, *_kernel_args(shape, pose), mode == "smooth", float(tau), BCE_EPS,
        bool(straight_through))
    values, loss, g_prim, g_k, g_R, g_T, g_light = out
    H, W = scene.shape_hw
    image = ShadowImage(values.reshape(H, W), (hit & ~occluded).reshape(H, W))
    return float(loss), image, _finish_gradients(scene, pose, g_prim, g_k, g_R, g_T, g_light)


def latent_bce_with_grads(observed: ShadowImage, scene: Scene, gen: GeneratorSpec, z, tau: float = DEFAULT_TAU,
                          sharpness: float = 20.0, straight_through: bool = True):
    """:func:`shadow_bce_with_grads` for the smooth render of ``G(z)``, with ``dJ/dz`` filled in."""
    z = np.asarray(z, dtype=np.float64)
    params = decode_params(gen, z)
    shape = params_to_shape(gen, params, sharpness)
    loss, image, g = shadow_bce_with_grads(observed, scene, shape, "smooth", tau, straight_through)
    g.z = decode_jacobian(gen, z).T @ g.shape_params.reshape(-1)[shape_param_index(gen)]
    return loss, image, g


def render_shadow_with_grads(scene: Scene, gen: GeneratorSpec, z, tau: float = DEFAULT_TAU,
                             sharpness: float = 20.0):
    """Smooth render of ``G(z)`` posed by ``scene.pose``, plus its pullback.

    Returns ``(image, pullback)``; ``pullback(dvalues)`` gives
    :class:`ShadowGradients` including ``z``, light angles, quaternion, yaw and
    translation.  Gradients from invalid pixels are zeroed.
    """
    z = np.asarray(z, dtype=np.float64)
    params = decode_params(gen, z)
    shape = params_to_shape(gen, params, sharpness)
    image = render_shadow(scene, shape, "smooth", tau)
    index = shape_param_index(gen)

    def pullback(dvalues) -> ShadowGradients:
        g = pullback_shape(scene, shape, dvalues, "smooth", tau, valid=image.valid)
        g.z = decode_jacobian(gen, z).T @ g.shape_params.reshape(-1)[index]
        return g

    return image, pullback
