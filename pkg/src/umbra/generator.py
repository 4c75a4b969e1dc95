"""Seeded affine decoder from the unit latent sphere to primitive shapes.

``raw = W z + b`` is laid out per primitive as
``[centre(3), half_extent(3), exponent(1)]`` (the exponent slot is only
present for box primitives) and squashed into the valid parameter box:
centres by ``0.4 tanh``, half extents by ``0.05 + 0.45 sigmoid`` and box
exponents by ``2 + 6 sigmoid``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch
from .occfield import BOX, ELLIPSOID, HALF_EXTENT_MAX, HALF_EXTENT_MIN, KIND_CODES, KIND_NAMES, ShapeSpec

CENTER_SCALE = 0.4
EXPONENT_MIN = 2.0
EXPONENT_SPAN = 6.0
DEFAULT_WEIGHT_SCALE = 0.5


@dataclass(frozen=True)
class Category:
    name: str
    kinds: tuple[int, ...]
    latent_dim: int
    seed: int
    weight_scale: float = DEFAULT_WEIGHT_SCALE


# Per-category decoders differ by seed, primitive vocabulary, latent size and
# weight scale.  "blob" is the standard reconstruction suite: a single shadow
# only pins down shapes when the latent is low-dimensional and the decoder
# varies gently (see README).
CATEGORIES = {
    "mixed": Category("mixed", (ELLIPSOID, ELLIPSOID, BOX, BOX), 16, 1001),
    "blob": Category("blob", (ELLIPSOID, ELLIPSOID), 3, 2002, 0.35),
    "table": Category("table", (BOX,) * 5, 16, 3003),
}


def _slot_layout(kinds) -> list[tuple[int, int]]:
    """``(start, width)`` of each primitive's block in the raw vector."""
    out, pos = [], 0
    for k in kinds:
        w = 7 if k == BOX else 6
        out.append((pos, w))
        pos += w
    return out


@dataclass(frozen=True)
class GeneratorSpec:
    """A reproducible decoder: ``W`` and ``b`` are drawn from ``seed``."""

    latent_dim: int = 16
    kinds: tuple[int, ...] = CATEGORIES["mixed"].kinds
    seed: int = 1001
    category: str = "mixed"
    weight_scale: float = DEFAULT_WEIGHT_SCALE
    sphere_radius: float = 1.0
    W: np.ndarray = field(init=False, repr=False, compare=False)
    b: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        kinds = tuple(KIND_CODES.get(k, k) for k in self.kinds)
        object.__setattr__(self, "kinds", kinds)
        if self.latent_dim < 1 or len(kinds) < 1:
            raise ValueError("latent_dim and primitive count must be positive")
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        P = self.param_count
        W = rng.standard_normal((P, self.latent_dim)) * self.weight_scale
        b = np.zeros(P)
        for (start, width) in _slot_layout(kinds):
            # centre bias stays zero so z = 0 decodes to centred primitives
            b[start + 3:start + 6] = 0.3 + 0.3 * rng.standard_normal(3)
            if width == 7:
                b[start + 6] = 0.5 * rng.standard_normal()
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @classmethod
    def for_category(cls, name: str, **overrides) -> "GeneratorSpec":
        cat = CATEGORIES[name]
        kw = dict(latent_dim=cat.latent_dim, kinds=cat.kinds, seed=cat.seed, category=name,
                  weight_scale=cat.weight_scale)
        kw.update(overrides)
        return cls(**kw)

    @property
    def primitive_count(self) -> int:
        return len(self.kinds)

    @property
    def param_count(self) -> int:
        return sum(w for _, w in _slot_layout(self.kinds))

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "latent_dim": int(self.latent_dim),
            "kinds": [KIND_NAMES[k] for k in self.kinds],
            "category": self.category,
            "weight_scale": float(self.weight_scale),
            "sphere_radius": float(self.sphere_radius),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(
            latent_dim=int(d["latent_dim"]),
            kinds=tuple(d["kinds"]),
            seed=int(d["seed"]),
            category=d.get("category", "custom"),
            weight_scale=float(d.get("weight_scale", DEFAULT_WEIGHT_SCALE)),
            sphere_radius=float(d.get("sphere_radius", 1.0)),
        )


def _check_dim(gen: GeneratorSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (gen.latent_dim,):
        raise DimensionMismatch(f"latent has shape {z.shape}, generator expects ({gen.latent_dim},)")
    return z


def _squash(gen: GeneratorSpec, raw: np.ndarray):
    """Return squashed parameters and the elementwise squash derivative."""
    out = np.empty_like(raw)
    slope = np.empty_like(raw)
    for start, width in _slot_layout(gen.kinds):
        c = np.tanh(raw[start:start + 3])
        out[start:start + 3] = CENTER_SCALE * c
        slope[start:start + 3] = CENTER_SCALE * (1.0 - c * c)
        s = expit(raw[start + 3:start + 6])
        span = HALF_EXTENT_MAX - HALF_EXTENT_MIN
        out[start + 3:start + 6] = HALF_EXTENT_MIN + span * s
        slope[start + 3:start + 6] = span * s * (1.0 - s)
        if width == 7:
            s = expit(raw[start + 6])
            out[start + 6] = EXPONENT_MIN + EXPONENT_SPAN * s
            slope[start + 6] = EXPONENT_SPAN * s * (1.0 - s)
    return out, slope


def decode_params(gen: GeneratorSpec, z) -> np.ndarray:
    """Flat squashed parameter vector ``G(z)`` (length ``param_count``)."""
    z = _check_dim(gen, z)
    return _squash(gen, gen.W @ z + gen.b)[0]


def params_to_shape(gen: GeneratorSpec, params: np.ndarray, sharpness: float = 20.0) -> ShapeSpec:
    centers, half, expo = [], [], []
    for kind, (start, width) in zip(gen.kinds, _slot_layout(gen.kinds)):
        centers.append(params[start:start + 3])
        half.append(params[start + 3:start + 6])
        expo.append(params[start + 6] if width == 7 else 2.0)
    return ShapeSpec(list(gen.kinds), np.array(centers), np.array(half), np.array(expo), sharpness)


def decode(gen: GeneratorSpec, z, sharpness: float = 20.0) -> ShapeSpec:
    """Decode a latent into an identity-pose :class:`ShapeSpec`."""
    return params_to_shape(gen, decode_params(gen, z), sharpness)


def decode_jacobian(gen: GeneratorSpec, z) -> np.ndarray:
    """``d params / d z`` of shape ``(param_count, latent_dim)``."""
    z = _check_dim(gen, z)
    _, slope = _squash(gen, gen.W @ z + gen.b)
    return slope[:, None] * gen.W


def shape_param_index(gen: GeneratorSpec) -> np.ndarray:
    """Map each decoder output to its slot in ``(M, 7)`` per-primitive arrays.

    The ``(M, 7)`` block is ``[centre, half_extent, exponent]`` per row, the
    same layout the renderer uses for its parameter gradients.
    """
    idx = []
    for m, (start, width) in enumerate(_slot_layout(gen.kinds)):
        idx.extend(m * 7 + j for j in range(width))
    return np.array(idx, dtype=np.int64)


def sample_latent(rng: np.random.Generator, d: int, radius: float = 1.0) -> np.ndarray:
    """Gaussian draw projected onto the sphere of the given radius."""
    if d < 1:
        raise ValueError("latent dimension must be >= 1")
    while True:
        z = rng.standard_normal(d)
        n = np.linalg.norm(z)
        if n > 0:
            return radius * z / n


def project_to_sphere(z, radius: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return radius * z / np.linalg.norm(z)
