"""Soft occupancy fields made of blended ellipsoids and superellipsoid boxes.

Each primitive has an inside/outside function
``F(x) = sum_i |x_i - c_i|^e / a_i^e`` (``e = 2`` for ellipsoids), turned
into a soft occupancy ``sigmoid(k (1 - F))``.  Primitives are combined by a
probabilistic union ``1 - prod(1 - f_m)`` and the whole field is posed in
the world by a :class:`~umbra.geometry.PoseSE3`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import EmptyLevelSet
from .geometry import IDENTITY_POSE, PoseSE3

ELLIPSOID = 0
BOX = 1
KIND_NAMES = {ELLIPSOID: "ellipsoid", BOX: "box"}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}

HALF_EXTENT_MIN = 0.05
HALF_EXTENT_MAX = 0.5
DEFAULT_SHARPNESS = 20.0
MESH_BOUND = 1.2


@dataclass(frozen=True)
class Primitive:
    kind: int
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    exponent: float = 2.0

    def __post_init__(self):
        kind = KIND_CODES.get(self.kind, self.kind)
        if kind not in KIND_NAMES:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "half_extents", tuple(float(a) for a in self.half_extents))
        if kind == ELLIPSOID:
            object.__setattr__(self, "exponent", 2.0)
        elif self.exponent < 2.0:
            raise ValueError("box sharpness exponent must be >= 2")
        if min(self.half_extents) <= 0:
            raise ValueError("half extents must be positive")

    @property
    def in_range(self) -> bool:
        return all(HALF_EXTENT_MIN <= a <= HALF_EXTENT_MAX for a in self.half_extents)


def inside_outside(prim: Primitive, x) -> np.ndarray:
    """``F < 1`` inside the primitive, ``1`` on its surface, ``> 1`` outside."""
    d = np.abs(np.asarray(x, dtype=np.float64) - np.asarray(prim.center))
    return np.sum((d / np.asarray(prim.half_extents)) ** prim.exponent, axis=-1)


@dataclass(frozen=True)
class ShapeSpec:
    """Array-backed bundle of primitives, blend sharpness and pose.

    ``centers``/``half_extents`` have shape ``(M, 3)``; ``kinds`` and
    ``exponents`` shape ``(M,)``.  Arrays are read-only.
    """

    kinds: np.ndarray
    centers: np.ndarray
    half_extents: np.ndarray
    exponents: np.ndarray
    sharpness: float = DEFAULT_SHARPNESS
    pose: PoseSE3 = field(default=IDENTITY_POSE)

    def __post_init__(self):
        kinds = np.array(self.kinds, dtype=np.int64).reshape(-1)
        M = kinds.shape[0]
        centers = np.array(self.centers, dtype=np.float64).reshape(M, 3)
        half = np.array(self.half_extents, dtype=np.float64).reshape(M, 3)
        expo = np.array(self.exponents, dtype=np.float64).reshape(M)
        expo = np.where(kinds == ELLIPSOID, 2.0, expo)
        if M < 1:
            raise ValueError("a shape needs at least one primitive")
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")
        if np.any(half <= 0) or np.any(expo < 2.0):
            raise ValueError("half extents must be positive and exponents >= 2")
        for name, arr in (("kinds", kinds), ("centers", centers), ("half_extents", half), ("exponents", expo)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "sharpness", float(self.sharpness))

    @classmethod
    def from_primitives(cls, prims, sharpness: float = DEFAULT_SHARPNESS, pose: PoseSE3 = IDENTITY_POSE):
        prims = list(prims)
        return cls(
            kinds=[p.kind for p in prims],
            centers=[p.center for p in prims],
            half_extents=[p.half_extents for p in prims],
            exponents=[p.exponent for p in prims],
            sharpness=sharpness,
            pose=pose,
        )

    @property
    def primitives(self) -> list[Primitive]:
        return [Primitive(int(k), tuple(c), tuple(a), float(e))
                for k, c, a, e in zip(self.kinds, self.centers, self.half_extents, self.exponents)]

    @property
    def n_primitives(self) -> int:
        return int(self.kinds.shape[0])

    def with_pose(self, pose: PoseSE3) -> "ShapeSpec":
        return replace(self, pose=pose)

    def canonical(self) -> "ShapeSpec":
        return replace(self, pose=IDENTITY_POSE)

    def with_primitive(self, prim: Primitive) -> "ShapeSpec":
        return ShapeSpec.from_primitives(self.primitives + [prim], self.sharpness, self.pose)

    def in_range(self) -> bool:
        return bool(np.all(self.half_extents >= HALF_EXTENT_MIN - 1e-12)
                    and np.all(self.half_extents <= HALF_EXTENT_MAX + 1e-12))

    def rest_height(self) -> float:
        """Vertical offset that puts the lowest primitive on the ground ``z = 0``."""
        return float(-np.min(self.centers[:, 2] - self.half_extents[:, 2]))

    def bounds(self, cutoff: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Object-frame axis-aligned box enclosing every ``F <= cutoff`` region."""
        scale = cutoff ** (1.0 / self.exponents)[:, None]
        lo = self.centers - self.half_extents * scale
        hi = self.centers + self.half_extents * scale
        return lo.min(axis=0), hi.max(axis=0)

    # flat parameter vector, used by gradient checks
    def param_vector(self) -> np.ndarray:
        per = np.concatenate([self.centers, self.half_extents, self.exponents[:, None]], axis=1)
        return np.concatenate([per.reshape(-1), [self.sharpness], self.pose.translation, [self.pose.yaw]])

    def from_param_vector(self, vec) -> "ShapeSpec":
        """Inverse of :meth:`param_vector`; the rotation is rebuilt as pure yaw."""
        vec = np.asarray(vec, dtype=np.float64)
        M = self.n_primitives
        per = vec[:7 * M].reshape(M, 7)
        k = vec[7 * M]
        T = vec[7 * M + 1:7 * M + 4]
        yaw = vec[7 * M + 4]
        return ShapeSpec(self.kinds, per[:, :3], per[:, 3:6], per[:, 6], k, PoseSE3.from_yaw(yaw, T))


def _primitive_fields(shape: ShapeSpec, y: np.ndarray):
    """Per-primitive ``F`` at object-frame points ``y`` of shape ``(n, 3)``."""
    d = y[:, None, :] - shape.centers[None, :, :]  # (n, M, 3)
    r = np.abs(d) / shape.half_extents[None]
    e = shape.exponents[None, :, None]
    return d, r, np.sum(r ** e, axis=-1)


def occupancy(shape: ShapeSpec, x_world) -> np.ndarray:
    """Soft occupancy in (0, 1) at world points ``x_world`` of shape ``(..., 3)``."""
    x = np.asarray(x_world, dtype=np.float64)
    lead = x.shape[:-1]
    y = shape.pose.apply_inverse(x.reshape(-1, 3))
    _, _, F = _primitive_fields(shape, y)
    f = expit(shape.sharpness * (1.0 - F))
    occ = 1.0 - np.prod(1.0 - f, axis=-1)
    return occ.reshape(lead)


def occupancy_gradient(shape: ShapeSpec, x_world):
    """Exact gradients of :func:`occupancy`.

    Returns ``(d_dx, d_dparams)`` where ``d_dx`` has shape ``(..., 3)`` and
    ``d_dparams`` has shape ``(..., P)`` following :meth:`ShapeSpec.param_vector`
    (centres, half extents and exponent per primitive, then sharpness, pose
    translation and yaw).  Exponent entries of ellipsoids are zero.
    """
    x = np.asarray(x_world, dtype=np.float64)
    lead = x.shape[:-1]
    x = x.reshape(-1, 3)
    n = x.shape[0]
    M = shape.n_primitives
    R = shape.pose.rotation
    T = shape.pose.translation
    y = (x - T) @ R
    d, r, F = _primitive_fields(shape, y)
    k = shape.sharpness
    f = expit(k * (1.0 - F))
    one_minus = 1.0 - f
    # d occ / d f_m = prod_{j != m} (1 - f_j), computed without division
    others = np.empty_like(f)
    for m in range(M):
        others[:, m] = np.prod(np.delete(one_minus, m, axis=1), axis=1)
    dF = others * (-k * f * one_minus)  # d occ / d F_m
    e = shape.exponents[None, :, None]
    a = shape.half_extents[None]
    re = r ** e
    with np.errstate(divide="ignore", invalid="ignore"):
        dFdd = np.where(r > 0, e * re / r, 0.0) * np.sign(d) / a  # dF/dy per coordinate
        dFda = -e * re / a
        logr = np.where(r > 0, np.log(np.where(r > 0, r, 1.0)), 0.0)
    dFde = np.sum(re * logr, axis=-1)

    g_centers = -dF[:, :, None] * dFdd
    g_half = dF[:, :, None] * dFda
    g_expo = np.where(shape.kinds[None] == BOX, dF * dFde, 0.0)
    g_k = np.sum(others * f * one_minus * (1.0 - F), axis=1)
    g_y = np.sum(dF[:, :, None] * dFdd, axis=1)  # (n, 3)
    g_x = g_y @ R.T
    g_T = -g_x
    # y = R^T (x - T) and R = Rz(yaw): dy/dyaw = dR^T/dyaw (x - T)
    yaw = shape.pose.yaw
    c, s = np.cos(yaw), np.sin(yaw)
    dRz = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    g_yaw = np.sum(g_y * ((x - T) @ dRz), axis=1)

    per = np.concatenate([g_centers, g_half, g_expo[:, :, None]], axis=2).reshape(n, 7 * M)
    g_params = np.concatenate([per, g_k[:, None], g_T, g_yaw[:, None]], axis=1)
    return g_x.reshape(lead + (3,)), g_params.reshape(lead + (g_params.shape[-1],))


def occupancy_grid(shape: ShapeSpec, resolution: int, bound: float = MESH_BOUND) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(-bound, bound, resolution)
    X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1)
    return axis, occupancy(shape, pts)


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float
    faces: np.ndarray  # (F, 3) int, 0-indexed


def extract_mesh(shape: ShapeSpec, resolution: int = 64, iso: float = 0.5, bound: float = MESH_BOUND) -> Mesh:
    """Marching cubes of the occupancy field on ``[-bound, bound]^3`` (world frame)."""
    from skimage.measure import marching_cubes

    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    if not 0.0 < iso < 1.0:
        raise ValueError("iso must lie in (0, 1)")
    axis, occ = occupancy_grid(shape, resolution, bound)
    if not (occ.min() < iso < occ.max()):
        raise EmptyLevelSet(f"no grid cell straddles iso={iso}")
    step = axis[1] - axis[0]
    verts, faces, _, _ = marching_cubes(occ, level=iso, spacing=(step, step, step))
    # outward-facing winding for an "inside is high" field
    faces = faces[:, ::-1]
    return Mesh(vertices=verts - bound, faces=faces.astype(np.int64))
