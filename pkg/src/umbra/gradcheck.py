"""Finite-difference verification of every gradient path, plus a scalar-tape
replica of the render-and-loss pipeline used as an independent oracle for
the compiled adjoint kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import finite_difference_check
from .generator import (
    CENTER_SCALE,
    EXPONENT_MIN,
    EXPONENT_SPAN,
    GeneratorSpec,
    _slot_layout,
    decode,
    decode_jacobian,
    decode_params,
    sample_latent,
)
from .geometry import CameraModel, PoseSE3, spherical_to_cartesian
from .occfield import BOX, HALF_EXTENT_MAX, HALF_EXTENT_MIN, ShapeSpec, occupancy, occupancy_gradient
from .shadow import (
    BCE_EPS,
    DEFAULT_TAU,
    LIGHT_RADIUS,
    LightSource,
    Scene,
    ShadowImage,
    bce_loss,
    latent_bce_with_grads,
    render_shadow,
    render_shadow_with_grads,
)

TOLERANCE = 1e-3
STAGES = ("decode", "occupancy", "renderer", "loss")


@dataclass
class Problem:
    """A small random scene with an observation rendered from another latent."""

    gen: GeneratorSpec
    scene: Scene
    z: np.ndarray
    observed: ShadowImage
    angles: np.ndarray
    yaw: float
    translation: np.ndarray


def make_problem(rng: np.random.Generator, category: str = "mixed", size: int = 48, samples: int = 64,
                 focal: float | None = None) -> Problem:
    """A scene whose image crops the shadow region at reduced resolution."""
    gen = GeneratorSpec.for_category(category)
    z_true = sample_latent(rng, gen.latent_dim)
    truth = decode(gen, z_true)
    az = 2 * math.pi * rng.random()
    el = math.radians(35 + 25 * rng.random())
    eye = spherical_to_cartesian(2 * math.pi * rng.random(), math.radians(45 + 30 * rng.random()), 2.0)
    camera = CameraModel.look_at(eye, focal=focal or size * 0.95, width=size, height=size)
    yaw = 2 * math.pi * rng.random()
    pose = PoseSE3.from_yaw(yaw, (0.0, 0.0, truth.rest_height()))
    scene = Scene(camera, LightSource.from_spherical(az, el), pose, ray_samples=samples)
    observed = render_shadow(scene, truth, "hard").binarized()
    # start nearby so the prediction overlaps the observation
    z = z_true + 0.3 * rng.standard_normal(gen.latent_dim)
    z /= np.linalg.norm(z)
    return Problem(gen, scene, z, observed, np.array([az, el]), yaw, np.array(pose.translation))


def _scene_at(p: Problem, angles, yaw, txy) -> Scene:
    pose = PoseSE3.from_yaw(float(yaw), (txy[0], txy[1], p.translation[2]))
    return p.scene.with_light(LightSource.from_spherical(angles[0], angles[1])).with_pose(pose)


def check_decode(rng: np.random.Generator, gen: GeneratorSpec, h: float = 1e-6) -> float:
    z = sample_latent(rng, gen.latent_dim)
    w = rng.standard_normal(gen.param_count)
    return finite_difference_check(lambda x: float(w @ decode_params(gen, x)), z, h,
                                   grad=lambda x: decode_jacobian(gen, x).T @ w)


def _shell_points(rng: np.random.Generator, shape: ShapeSpec, m: int, n: int) -> np.ndarray:
    """Object-frame points near primitive m's surface that no other primitive swallows."""
    # corner-leaning directions: on a flat face r ~ 1 and the exponent has no leverage
    u = rng.choice([-1.0, 1.0], (4 * n, 3)) + 0.5 * rng.standard_normal((4 * n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    e = shape.exponents[m]
    # scale the direction onto the superquadric F = 1, then jitter radially
    F = np.sum(np.abs(u) ** e, axis=1)
    target = rng.uniform(0.85, 1.15, len(u))  # keeps k (1 - F) within a few units
    pts = shape.centers[m] + shape.half_extents[m] * u * (target / F)[:, None] ** (1.0 / e)
    others = [j for j in range(shape.n_primitives) if j != m]
    if others:
        sub = ShapeSpec(shape.kinds[others], shape.centers[others], shape.half_extents[others],
                        shape.exponents[others], shape.sharpness)
        pts = pts[occupancy(sub, pts) < 0.2]
    return pts[:n]


def check_occupancy(rng: np.random.Generator, gen: GeneratorSpec, h: float = 1e-6) -> float:
    """Occupancy gradients w.r.t. each primitive's parameters, sharpness, pose and position.

    Each primitive is checked on points near its own surface, where all of
    its parameters move the field measurably.
    """
    pose = PoseSE3.from_yaw(2 * math.pi * rng.random(), rng.uniform(-0.3, 0.3, 3))
    shape = decode(gen, sample_latent(rng, gen.latent_dim)).with_pose(pose)
    theta = shape.param_vector()
    M = shape.n_primitives
    worst = 0.0
    for m in range(M):
        pts = pose.apply(_shell_points(rng, shape, m, 24))
        if len(pts) == 0:
            continue
        v = rng.standard_normal(len(pts))
        width = 7 if shape.kinds[m] == BOX else 6
        idx = np.concatenate([7 * m + np.arange(width), 7 * M + np.arange(5)])

        def full(x):
            t = theta.copy()
            t[idx] = x
            return t

        # directional derivatives along random unit vectors: individual
        # components can sit below finite-difference resolution
        for _ in range(3):
            u = rng.standard_normal(len(idx))
            u /= np.linalg.norm(u)
            err_p = finite_difference_check(
                lambda s_: float(v @ occupancy(shape.from_param_vector(full(theta[idx] + s_[0] * u)), pts)),
                [0.0], h,
                grad=lambda s_: [(v @ occupancy_gradient(shape.from_param_vector(full(theta[idx])), pts)[1])[idx] @ u])
            dx = rng.standard_normal(pts.shape)
            dx /= np.linalg.norm(dx)
            err_x = finite_difference_check(
                lambda s_: float(v @ occupancy(shape, pts + s_[0] * dx)), [0.0], h,
                grad=lambda s_: [float(np.sum(v[:, None] * occupancy_gradient(shape, pts)[0] * dx))])
            worst = max(worst, err_p, err_x)
    return worst


def _pack(p: Problem) -> np.ndarray:
    return np.concatenate([p.z, p.angles, [p.yaw], p.translation[:2]])


def _unpack(p: Problem, x):
    d = p.gen.latent_dim
    return x[:d], x[d:d + 2], x[d + 2], x[d + 3:d + 5]


def check_renderer(p: Problem, rng: np.random.Generator, tau: float = DEFAULT_TAU, h: float = 1e-6) -> float:
    """Random linear functional of the smooth render w.r.t. (z, light angles, yaw, translation xy)."""
    w = rng.standard_normal(p.observed.values.shape)

    def f(x):
        z, ang, yaw, txy = _unpack(p, x)
        img = render_shadow(_scene_at(p, ang, yaw, txy), decode(p.gen, z), "smooth", tau)
        return float(np.sum(w * np.where(img.valid, img.values, 0.0)))

    def grad(x):
        z, ang, yaw, txy = _unpack(p, x)
        img, pullback = render_shadow_with_grads(_scene_at(p, ang, yaw, txy), p.gen, z, tau)
        g = pullback(w)
        return np.concatenate([g.z, g.light_angles, [g.yaw], g.translation[:2]])

    return finite_difference_check(f, _pack(p), h, grad=grad)


def check_loss(p: Problem, tau: float = DEFAULT_TAU, h: float = 1e-6) -> float:
    """Masked BCE of the smooth render against the observation."""

    def f(x):
        z, ang, yaw, txy = _unpack(p, x)
        return bce_loss(p.observed, render_shadow(_scene_at(p, ang, yaw, txy), decode(p.gen, z), "smooth", tau))

    def grad(x):
        z, ang, yaw, txy = _unpack(p, x)
        _, _, g = latent_bce_with_grads(p.observed, _scene_at(p, ang, yaw, txy), p.gen, z, tau,
                                        straight_through=False)
        return np.concatenate([g.z, g.light_angles, [g.yaw], g.translation[:2]])

    return finite_difference_check(f, _pack(p), h, grad=grad)


def run_gradcheck(cases: int = 3, seed: int = 0, category: str = "mixed") -> dict[str, float]:
    """Max relative error per stage over ``cases`` random problems."""
    if cases < 1:
        raise ValueError("need at least one case")
    worst = {s: 0.0 for s in STAGES}
    for c in range(cases):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(c,)))
        p = make_problem(rng, category)
        worst["decode"] = max(worst["decode"], check_decode(rng, p.gen))
        worst["occupancy"] = max(worst["occupancy"], check_occupancy(rng, p.gen))
        worst["renderer"] = max(worst["renderer"], check_renderer(p, rng))
        worst["loss"] = max(worst["loss"], check_loss(p))
    return worst


# --------------------------------------------------------------------------- tape replica

def tape_decode(gen: GeneratorSpec, z):
    """Squashed decoder outputs as scalar expressions (floats or Vars)."""
    out = []
    span = HALF_EXTENT_MAX - HALF_EXTENT_MIN
    for start, width in _slot_layout(gen.kinds):
        for j in range(width):
            row = gen.W[start + j]
            raw = gen.b[start + j]
            for i in range(gen.latent_dim):
                raw = raw + row[i] * z[i]
            if j < 3:
                out.append(CENTER_SCALE * ad.tanh(raw))
            elif j < 6:
                out.append(HALF_EXTENT_MIN + span * ad.logistic(raw))
            else:
                out.append(EXPONENT_MIN + EXPONENT_SPAN * ad.logistic(raw))
    return out


def tape_loss(gen: GeneratorSpec, scene: Scene, observed: ShadowImage, valid: np.ndarray, z, angles, yaw, txy,
              tz: float, tau: float = DEFAULT_TAU, sharpness: float = 20.0):
    """Scalar replica of the smooth-render BCE over the pixels marked ``valid``.

    Works on floats or :class:`~umbra.autodiff.Var`; every sample of every
    light segment is evaluated (no culling).
    """
    params = tape_decode(gen, z)
    prims = []
    for kind, (start, width) in zip(gen.kinds, _slot_layout(gen.kinds)):
        c = params[start:start + 3]
        a = params[start + 3:start + 6]
        e = params[start + 6] if width == 7 else None
        prims.append((kind, c, a, e))
    az, el = angles
    ce = ad.cos(el)
    light = [LIGHT_RADIUS * ce * ad.cos(az), LIGHT_RADIUS * ce * ad.sin(az), LIGHT_RADIUS * ad.sin(el)]
    cy, sy = ad.cos(yaw), ad.sin(yaw)
    T = [txy[0], txy[1], tz]
    N = scene.ray_samples
    ground = scene.ground
    flat_valid = valid.reshape(-1)
    obs = observed.values.reshape(-1)
    n = int(flat_valid.sum())
    total = 0.0
    for p in np.flatnonzero(flat_valid):
        g = ground[p]
        fs = []
        for i in range(N):
            t = (i + 0.5) / N
            x = [light[j] + t * (g[j] - light[j]) - T[j] for j in range(3)]
            # y = Rz(yaw)^T (x - T)
            y = [cy * x[0] + sy * x[1], -sy * x[0] + cy * x[1], x[2]]
            keep = 1.0
            for kind, c, a, e in prims:
                F = 0.0
                for j in range(3):
                    d = y[j] - c[j]
                    if kind == BOX:
                        F = F + ad.pow(ad.absolute(d) / a[j], e)
                    else:
                        F = F + (d / a[j]) * (d / a[j])
                keep = keep * (1.0 - ad.logistic(sharpness * (1.0 - F)))
            fs.append(1.0 - keep)
        fmax = max(ad.value_of(f) for f in fs)
        num, den = 0.0, 0.0
        for f in fs:
            w = ad.exp((f - fmax) / tau)
            num = num + w * f
            den = den + w
        q = ad.minimum(ad.maximum(num / den, BCE_EPS), 1.0 - BCE_EPS)
        s = obs[p]
        term = -(s * ad.log(q) + (1.0 - s) * ad.log(1.0 - q)) if 0.0 < s < 1.0 else (
            -ad.log(q) if s >= 1.0 else -ad.log(1.0 - q))
        total = total + term
    return total / n
