import math

import numpy as np
import pytest

from umbra import autodiff as ad
from umbra.errors import NoValidPixels
from umbra.generator import GeneratorSpec, decode, sample_latent
from umbra.geometry import CameraModel, PoseSE3, project_point
from umbra.gradcheck import tape_loss
from umbra.occfield import BOX, ELLIPSOID, Primitive, ShapeSpec
from umbra.shadow import (
    LightSource,
    Scene,
    ShadowImage,
    bce_loss,
    bce_loss_and_grad,
    camera_occlusion,
    dense_reference_shadow,
    latent_bce_with_grads,
    render_segmentation,
    render_shadow,
    render_shadow_with_grads,
)

from conftest import nadir_camera, random_scene, sphere

PIXEL = 3.0 / 128  # world units per pixel of the nadir test camera


def pixel_radii(cam):
    u, v = cam.pixel_grid()
    return np.hypot(u - cam.cu, v - cam.cv)


class TestRenderShadow:
    def test_empty_shape(self):
        far = ShapeSpec.from_primitives([Primitive(ELLIPSOID, (0, 0, -5), (0.05, 0.05, 0.05))])
        img = render_shadow(Scene(nadir_camera(), LightSource((0.5, 0.2, 3.0))), far)
        assert np.all(img.values[img.valid] < 0.01)

    def test_tangent_cone_disk(self):
        # sphere r = 0.5 centred at height 1 under a point light at (0, 0, 3):
        # the tangent cone has sin(theta) = 0.5 / 2, ground radius 3 tan(theta)
        cam = nadir_camera(height=10.0)
        img = render_shadow(Scene(cam, LightSource((0, 0, 3.0))), sphere(0.5, (0, 0, 1.0)))
        expected = 3.0 * 0.25 / math.sqrt(1 - 0.0625) / PIXEL
        assert expected * PIXEL == pytest.approx(0.7746, abs=1e-4)
        r = pixel_radii(cam)
        inside = img.values > 0.5
        assert r[inside].max() < expected + 1.5
        assert r[~inside].min() > expected - 1.5
        assert math.sqrt(inside.sum() / math.pi) == pytest.approx(expected, abs=1.5)

    def test_dense_oracle(self, blob):
        rng = np.random.default_rng(0)
        for _ in range(3):
            scene, truth, _ = random_scene(rng, blob, size=64, samples=128)
            hard = render_shadow(scene, truth, "hard")
            dense = dense_reference_shadow(scene, truth)
            assert np.mean(np.abs(hard.values - dense)[hard.valid]) < 0.02

    def test_values_in_unit_interval(self, mixed):
        scene, truth, _ = random_scene(np.random.default_rng(1), mixed)
        for mode in ("hard", "smooth"):
            v = render_shadow(scene, truth, mode).values
            assert np.all((v >= 0) & (v <= 1))

    def test_monotone_in_primitives(self, mixed):
        scene, truth, _ = random_scene(np.random.default_rng(2), mixed)
        more = truth.with_primitive(Primitive(BOX, (0.3, -0.2, 0.1), (0.2, 0.1, 0.3), 4.0))
        assert np.all(render_shadow(scene, more).values >= render_shadow(scene, truth).values - 1e-12)

    def test_containment_under_overhead_light(self):
        # every ground point under a floating box is shadowed by a light straight above
        shape = ShapeSpec.from_primitives([Primitive(BOX, (0, 0, 0.6), (0.3, 0.2, 0.15), 8.0)])
        cam = nadir_camera(height=10.0)
        img = render_shadow(Scene(cam, LightSource((0, 0, 3.0))), shape)
        u, v = cam.pixel_grid()
        x, y = (u - cam.cu) * PIXEL, -(v - cam.cv) * PIXEL
        under = (np.abs(x) < 0.25) & (np.abs(y) < 0.15)
        assert np.all(img.values[under] > 0.5)

    def test_smooth_approaches_hard(self, mixed):
        rng = np.random.default_rng(3)
        for _ in range(3):
            scene, truth, _ = random_scene(rng, mixed)
            hard = render_shadow(scene, truth, "hard").values
            smooth = render_shadow(scene, truth, "smooth", 0.01).values
            assert np.max(np.abs(hard - smooth)) < 0.03

    def test_invalid_where_camera_sees_object(self):
        cam = nadir_camera()
        img = render_shadow(Scene(cam, LightSource((1.0, 0.0, 2.8))), sphere(0.3, (0, 0, 0.5)))
        assert not img.valid[64, 64]
        assert img.valid[0, 0]

    def test_pixels_off_the_ground_invalid(self):
        cam = CameraModel.look_at((2.0, 0.0, 0.3), (0.0, 0.0, 0.3), focal=60, width=32, height=32)
        img = render_shadow(Scene(cam, LightSource((0, 0, 3.0))), sphere(0.2, (0, 0, 0.2)))
        assert not img.valid[:10].any()  # the upper rows look above the horizon


class TestSegmentation:
    def test_empty(self):
        far = ShapeSpec.from_primitives([Primitive(ELLIPSOID, (0, 0, -5), (0.05, 0.05, 0.05))])
        assert not render_segmentation(Scene(nadir_camera(), LightSource((0, 0, 3.0))), far).any()

    def test_silhouette_disk(self):
        cam = nadir_camera(height=2.0)
        seg = render_segmentation(Scene(cam, LightSource((0, 0, 3.0))), sphere(0.4, (0, 0, 1.0)))
        # rim of the silhouette: tangent points at angle asin(0.4 / 1) from the axis
        alpha = math.asin(0.4)
        rim = np.array([0.4 * math.cos(alpha), 0.0, 1.0 + 0.4 * math.sin(alpha)])
        expected = abs(project_point(cam, rim)[0] - cam.cu)
        assert math.sqrt(seg.sum() / math.pi) == pytest.approx(expected, abs=2.0)

    def test_contains_occluded_pixels(self, mixed):
        scene, truth, _ = random_scene(np.random.default_rng(4), mixed)
        seg = render_segmentation(scene, truth)
        occluded = camera_occlusion(scene, truth).reshape(seg.shape)
        assert np.array_equal(seg & scene.ground_hit.reshape(seg.shape), occluded)
        img = render_shadow(scene, truth)
        assert np.all(seg[scene.ground_hit.reshape(seg.shape) & ~img.valid])


class TestBCE:
    def test_identical(self):
        s = ShadowImage(np.eye(4), np.ones((4, 4), bool))
        assert bce_loss(s, s) <= 1.1e-7

    def test_half(self):
        obs = ShadowImage(np.ones((3, 3)), np.ones((3, 3), bool))
        pred = ShadowImage(np.full((3, 3), 0.5), np.ones((3, 3), bool))
        assert bce_loss(obs, pred) == pytest.approx(math.log(2), abs=1e-12)

    def test_no_overlap(self):
        a = ShadowImage(np.ones((2, 2)), np.array([[True, False], [False, False]]))
        b = ShadowImage(np.ones((2, 2)), np.array([[False, True], [False, False]]))
        with pytest.raises(NoValidPixels):
            bce_loss(a, b)

    def test_invalid_pixels_ignored(self):
        valid = np.array([[True, False]])
        obs = ShadowImage(np.array([[1.0, 0.0]]), valid)
        p1 = ShadowImage(np.array([[0.9, 0.1]]), valid)
        p2 = ShadowImage(np.array([[0.9, 0.99]]), valid)
        assert bce_loss(obs, p1) == bce_loss(obs, p2)
        _, g = bce_loss_and_grad(obs, p2)
        assert g[0, 1] == 0.0


class TestGradients:
    def test_light_azimuth_differences(self, blob):
        rng = np.random.default_rng(5)
        scene, truth, obs = random_scene(rng, blob)
        z = sample_latent(rng, blob.latent_dim)
        az, el, _ = scene.light.spherical

        def loss(a):
            s = scene.with_light(LightSource.from_spherical(a, el))
            return bce_loss(obs, render_shadow(s, decode(blob, z), "smooth"))

        _, _, g = latent_bce_with_grads(obs, scene, blob, z, straight_through=False)
        h = 1e-4
        num = (loss(az + h) - loss(az - h)) / (2 * h)
        assert abs(g.light_angles[0] - num) / max(abs(num), abs(g.light_angles[0]), 1e-8) < 1e-3

    def test_invalid_pixels_contribute_nothing(self, mixed):
        rng = np.random.default_rng(6)
        scene, truth, _ = random_scene(rng, mixed)
        z = sample_latent(rng, mixed.latent_dim)
        img, pullback = render_shadow_with_grads(scene, mixed, z)
        assert (~img.valid).any()
        w = np.where(img.valid, 0.0, rng.standard_normal(img.values.shape))
        g = pullback(w)
        for part in (g.z, g.light_angles, g.translation, g.quaternion, g.shape_params):
            assert np.all(np.asarray(part) == 0.0)

    def test_translation_moves_shadow(self):
        # overhead light: shifting the object by d moves the shadow by d * 3 / (3 - h)
        cam = nadir_camera(height=10.0)
        gen = GeneratorSpec(latent_dim=2, kinds=(ELLIPSOID,), seed=0)
        z = np.array([0.6, 0.8])
        shape = decode(gen, z)
        h = float(shape.centers[0, 2]) + shape.rest_height()
        u, _ = cam.pixel_grid()
        x = (u - cam.cu) * PIXEL

        def centroid(dx):
            s = Scene(cam, LightSource((0, 0, 3.0)), PoseSE3((dx, 0.0, shape.rest_height())))
            v = render_shadow(s, shape).values
            return float(np.sum(x * v) / np.sum(v))

        d = 0.05
        assert centroid(d) - centroid(0.0) == pytest.approx(d * 3 / (3 - h), rel=0.05)
        scene = Scene(cam, LightSource((0, 0, 3.0)), PoseSE3((0.0, 0.0, shape.rest_height())))
        img, pullback = render_shadow_with_grads(scene, gen, z)
        assert pullback(np.where(img.valid, x, 0.0)).translation[0] > 0


class TestTapeReplica:
    """The compiled adjoint kernels against a scalar tape of the same pipeline."""

    @pytest.mark.parametrize("category", ["blob", "mixed"])
    def test_loss_and_gradient(self, category):
        rng = np.random.default_rng(7)
        gen = GeneratorSpec.for_category(category)
        scene, truth, obs = random_scene(rng, gen, size=10, samples=12)
        z = sample_latent(rng, gen.latent_dim)
        loss, img, g = latent_bce_with_grads(obs, scene, gen, z, straight_through=False)
        valid = obs.valid & img.valid
        az, el, _ = scene.light.spherical
        yaw = scene.pose.yaw
        txy = scene.pose.translation[:2]
        tz = float(scene.pose.translation[2])
        x0 = np.concatenate([z, [az, el, yaw], txy])
        d = gen.latent_dim

        def f(x):
            return tape_loss(gen, scene, obs, valid, x[:d], x[d:d + 2], x[d + 2], x[d + 3:d + 5], tz)

        value, grad = ad.value_and_grad(f, x0)
        assert value == pytest.approx(loss, rel=1e-9)
        np.testing.assert_allclose(grad[:d], g.z, rtol=1e-6, atol=1e-10)
        np.testing.assert_allclose(grad[d:d + 2], g.light_angles, rtol=1e-6, atol=1e-10)
        np.testing.assert_allclose(grad[d + 3:], g.translation[:2], rtol=1e-6, atol=1e-10)
        assert grad[d + 2] == pytest.approx(g.yaw, rel=1e-6, abs=1e-10)
