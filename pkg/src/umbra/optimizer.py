"""Latent search: noisy projected gradient descent over the shape latent,
optionally joined by the light angles and a yaw-only object pose.

Each restart follows the loop

    z <- z - lr * (dJ/dz + N(0, sigma_k^2 I)),   sigma_k = max(0, (K-1-k)/K)
    z <- z / ||z||
    light angles <- light angles - lr * dJ/d(angles)     (unknown light)
    (q_z, q_w), (t_x, t_y) <- ... - lr * grad            (unknown pose)

with ``J`` the masked binary cross-entropy between the observed shadow and
the smooth render of ``G(z)``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradient, NoValidPixels, UmbraError
from .generator import GeneratorSpec, decode, sample_latent
from .geometry import PoseSE3, hemisphere_sample, cartesian_to_spherical
from .occfield import ShapeSpec
from .shadow import (
    DEFAULT_TAU,
    LIGHT_RADIUS,
    LightSource,
    Scene,
    ShadowImage,
    bce_loss,
    latent_bce_with_grads,
    render_shadow,
)

log = logging.getLogger(__name__)

ELEVATION_MIN = 0.05
ELEVATION_MAX = math.pi / 2 - 0.05
TRANSLATION_BOX = 0.5
GRAD_CLIP = 10.0
LR_KNOWN = 1.0
LR_UNKNOWN = 0.01


@dataclass(frozen=True)
class OptimizerConfig:
    steps: int = 300
    lr: float | None = None
    restarts: int = 8
    noise: bool = True
    unknown_light: bool = False
    unknown_pose: bool = False
    tau: float = DEFAULT_TAU
    seed: int = 0
    threads: int = 1
    clip: float = GRAD_CLIP
    # descend on the clamp-free BCE slope; False gives the exact gradient
    straight_through: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")
        if self.lr is not None and not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def step_size(self) -> float:
        if self.lr is not None:
            return self.lr
        return LR_UNKNOWN if (self.unknown_light or self.unknown_pose) else LR_KNOWN


def noise_sigma(k: int, K: int) -> float:
    """Noise scale at step ``k`` (1-based) of ``K``: linear decay clamped at 0."""
    if not 1 <= k <= K:
        raise ValueError("step index must satisfy 1 <= k <= K")
    return max(0.0, (K - 1 - k) / K)


@dataclass
class ChainState:
    z: np.ndarray
    light_angles: np.ndarray  # (azimuth, elevation)
    quaternion: np.ndarray  # (x, y, z, w), yaw-only when the pose is optimised
    translation: np.ndarray
    light_radius: float = LIGHT_RADIUS

    def copy(self) -> "ChainState":
        return ChainState(self.z.copy(), self.light_angles.copy(), self.quaternion.copy(),
                          self.translation.copy(), self.light_radius)

    @property
    def light(self) -> LightSource:
        return LightSource.from_spherical(*self.light_angles, self.light_radius)

    @property
    def pose(self) -> PoseSE3:
        return PoseSE3(self.translation, self.quaternion)


@dataclass
class StepGradients:
    z: np.ndarray
    light_angles: np.ndarray
    quaternion: np.ndarray
    translation: np.ndarray


def _clip(g: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.linalg.norm(g))
    return g * (limit / n) if n > limit else g


def step(state: ChainState, grads: StepGradients, config: OptimizerConfig, k: int,
         rng: np.random.Generator | None = None, radius: float = 1.0) -> ChainState:
    """One iteration of the update rule; returns a new state."""
    for name in ("z", "light_angles", "quaternion", "translation"):
        if not np.all(np.isfinite(getattr(grads, name))):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    lr = config.step_size
    new = state.copy()
    gz = _clip(grads.z, config.clip)
    if config.noise:
        sigma = noise_sigma(k, config.steps)
        if sigma > 0.0:
            if rng is None:
                raise ValueError("noise requires an rng")
            gz = gz + sigma * rng.standard_normal(gz.shape)
    z = state.z - lr * gz
    new.z = radius * z / np.linalg.norm(z)
    if config.unknown_light:
        ga = _clip(grads.light_angles, config.clip)
        az, el = state.light_angles - lr * ga
        new.light_angles = np.array([math.remainder(az, 2 * math.pi), min(max(el, ELEVATION_MIN), ELEVATION_MAX)])
    if config.unknown_pose:
        gq = _clip(grads.quaternion[2:], config.clip)
        qz, qw = state.quaternion[2:] - lr * gq
        n = math.hypot(qz, qw)
        new.quaternion = np.array([0.0, 0.0, qz / n, qw / n])
        gt = _clip(grads.translation[:2], config.clip)
        txy = np.clip(state.translation[:2] - lr * gt, -TRANSLATION_BOX, TRANSLATION_BOX)
        new.translation = np.array([txy[0], txy[1], state.translation[2]])
    return new


def evaluate(observed: ShadowImage, base: Scene, gen: GeneratorSpec, state: ChainState, tau: float,
             with_grads: bool = True, straight_through: bool = True):
    """Loss (and gradients) of a chain state against ``observed``."""
    scene = base.with_light(state.light).with_pose(state.pose)
    if not with_grads:
        image = render_shadow(scene, decode(gen, state.z), "smooth", tau)
        return bce_loss(observed, image), None, image
    loss, image, g = latent_bce_with_grads(observed, scene, gen, state.z, tau, straight_through=straight_through)
    return loss, StepGradients(g.z, g.light_angles, g.quaternion, g.translation), image


@dataclass
class RestartResult:
    index: int
    z: np.ndarray
    light: np.ndarray
    pose: PoseSE3
    losses: list[float]
    final_loss: float
    shape: ShapeSpec | None
    failed: bool = False
    message: str = ""
    z_norms: list[float] = field(default_factory=list, repr=False)
    quat_norms: list[float] = field(default_factory=list, repr=False)


@dataclass
class ReconstructionResult:
    restarts: list[RestartResult]  # sorted by final loss, failures last
    config: OptimizerConfig

    @property
    def completed(self) -> list[RestartResult]:
        return [r for r in self.restarts if not r.failed]

    @property
    def best(self) -> RestartResult:
        done = self.completed
        if not done:
            raise UmbraError("every restart failed")
        return done[0]

    @property
    def best_index(self) -> int:
        return self.best.index

    def by_index(self) -> list[RestartResult]:
        return sorted(self.restarts, key=lambda r: r.index)


def initial_state(rng: np.random.Generator, base: Scene, gen: GeneratorSpec, config: OptimizerConfig) -> ChainState:
    z = sample_latent(rng, gen.latent_dim, gen.sphere_radius)
    if config.unknown_light:
        c = hemisphere_sample(rng, LIGHT_RADIUS)
        az, el, _ = cartesian_to_spherical(c)
        angles = np.array([az, min(max(el, ELEVATION_MIN), ELEVATION_MAX)])
        radius = LIGHT_RADIUS
    else:
        az, el, radius = cartesian_to_spherical(base.light.position)
        angles = np.array([az, el])
    if config.unknown_pose:
        yaw = 2 * math.pi * rng.random()
        txy = rng.uniform(-TRANSLATION_BOX, TRANSLATION_BOX, 2)
        # the object is assumed to rest on the ground: height from the initial shape
        tz = decode(gen, z).rest_height()
        quat = np.array([0.0, 0.0, math.sin(yaw / 2), math.cos(yaw / 2)])
        trans = np.array([txy[0], txy[1], tz])
    else:
        quat = base.pose.quaternion.copy()
        trans = base.pose.translation.copy()
    return ChainState(z, angles, quat, trans, radius)


def run_restart(observed: ShadowImage, base: Scene, gen: GeneratorSpec, config: OptimizerConfig,
                index: int) -> RestartResult:
    """One independent chain; its rng depends only on ``(seed, index)``."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(index,)))
    state = initial_state(rng, base, gen, config)
    losses: list[float] = []
    z_norms: list[float] = []
    quat_norms: list[float] = []
    try:
        for k in range(1, config.steps + 1):
            loss, grads, _ = evaluate(observed, base, gen, state, config.tau,
                                      straight_through=config.straight_through)
            losses.append(loss)
            state = step(state, grads, config, k, rng, gen.sphere_radius)
            z_norms.append(float(np.linalg.norm(state.z)))
            quat_norms.append(float(np.linalg.norm(state.quaternion)))
        final_loss, _, _ = evaluate(observed, base, gen, state, config.tau, with_grads=False)
    except (NonFiniteGradient, NoValidPixels) as exc:
        log.warning("restart %d diverged: %s", index, exc)
        return RestartResult(index, state.z, state.light.position, state.pose, losses, math.inf, None,
                             failed=True, message=str(exc), z_norms=z_norms, quat_norms=quat_norms)
    shape = decode(gen, state.z).with_pose(state.pose)
    return RestartResult(index, state.z, state.light.position, state.pose, losses, final_loss, shape,
                         z_norms=z_norms, quat_norms=quat_norms)


def reconstruct(observed: ShadowImage, scene_known: Scene, gen: GeneratorSpec,
                config: OptimizerConfig = OptimizerConfig()) -> ReconstructionResult:
    """Run ``config.restarts`` independent chains and rank them by final loss.

    ``scene_known`` always supplies the camera and ground plane; its light
    and pose are used as given unless the config marks them unknown.
    """
    if not np.any(observed.valid):
        raise NoValidPixels("observed shadow has no valid pixel")
    indices = range(config.restarts)
    if config.threads > 1 and config.restarts > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(lambda i: run_restart(observed, scene_known, gen, config, i), indices))
    else:
        results = [run_restart(observed, scene_known, gen, config, i) for i in indices]
    if all(r.failed for r in results):
        raise UmbraError("every restart diverged")
    results.sort(key=lambda r: (r.failed, r.final_loss, r.index))
    return ReconstructionResult(results, config)
