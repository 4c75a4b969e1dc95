import math

import numpy as np
import pytest

from umbra.generator import GeneratorSpec, decode, sample_latent
from umbra.geometry import CameraModel, PoseSE3, spherical_to_cartesian
from umbra.occfield import ELLIPSOID, Primitive, ShapeSpec
from umbra.shadow import LightSource, Scene, render_shadow


def nadir_camera(height=2.0, half_width=1.5, size=128):
    """Camera straight above the origin whose ground window is ``[-half_width, half_width]^2``."""
    return CameraModel.look_at((0.0, 0.0, height), focal=size / 2 * height / half_width, width=size, height=size)


def sphere(r, center=(0.0, 0.0, 0.0)):
    return ShapeSpec.from_primitives([Primitive(ELLIPSOID, center, (r, r, r))])


def random_scene(rng, gen, size=48, samples=64):
    """A small random in-family scene: ``(scene, canonical truth, binary observation)``."""
    truth = decode(gen, sample_latent(rng, gen.latent_dim))
    eye = spherical_to_cartesian(2 * math.pi * rng.random(), math.radians(50 + 25 * rng.random()), 2.0)
    camera = CameraModel.look_at(eye, focal=size * 0.95, width=size, height=size)
    light = LightSource.from_spherical(2 * math.pi * rng.random(), math.radians(35 + 20 * rng.random()))
    pose = PoseSE3.from_yaw(2 * math.pi * rng.random(), (0.0, 0.0, truth.rest_height()))
    scene = Scene(camera, light, pose, ray_samples=samples)
    return scene, truth, render_shadow(scene, truth, "hard").binarized()


@pytest.fixture
def blob():
    return GeneratorSpec.for_category("blob")


@pytest.fixture
def mixed():
    return GeneratorSpec.for_category("mixed")


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
