import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umbra.errors import NonFiniteGradient, NoValidPixels
from umbra.generator import GeneratorSpec
from umbra.optimizer import (
    ELEVATION_MAX,
    ELEVATION_MIN,
    LR_KNOWN,
    LR_UNKNOWN,
    TRANSLATION_BOX,
    ChainState,
    OptimizerConfig,
    StepGradients,
    noise_sigma,
    reconstruct,
    step,
)
from umbra.shadow import ShadowImage

from conftest import random_scene


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def state(d=4, rng=None):
    rng = rng or np.random.default_rng(0)
    return ChainState(unit(rng.standard_normal(d)), np.array([0.3, 0.7]), np.array([0.0, 0.0, 0.0, 1.0]),
                      np.array([0.0, 0.0, 0.2]))


def grads(d=4, z=None, angles=(0.0, 0.0), quat=(0.0, 0.0, 0.0, 0.0), trans=(0.0, 0.0, 0.0)):
    return StepGradients(np.zeros(d) if z is None else np.asarray(z, float), np.array(angles, float),
                         np.array(quat, float), np.array(trans, float))


class TestNoiseSigma:
    def test_first_step(self):
        assert noise_sigma(1, 300) == pytest.approx(298 / 300)
        assert noise_sigma(1, 300) == pytest.approx(0.99333, abs=1e-5)

    def test_zero_before_end(self):
        assert noise_sigma(299, 300) == 0.0

    def test_clamped_at_end(self):
        # the unclamped formula gives -1/300 here
        assert noise_sigma(300, 300) == 0.0

    @given(st.integers(1, 1000))
    def test_linear_decay(self, K):
        s = [noise_sigma(k, K) for k in range(1, K + 1)]
        assert all(a >= b for a, b in zip(s, s[1:]))
        for k, v in enumerate(s, 1):
            assert v == max(0.0, (K - 1 - k) / K)

    @pytest.mark.parametrize("k", [0, 301])
    def test_out_of_range(self, k):
        with pytest.raises(ValueError):
            noise_sigma(k, 300)


class TestConfig:
    def test_default_step_sizes(self):
        assert OptimizerConfig().step_size == LR_KNOWN == 1.0
        assert OptimizerConfig(unknown_light=True).step_size == LR_UNKNOWN == 0.01
        assert OptimizerConfig(unknown_pose=True).step_size == 0.01
        assert OptimizerConfig(lr=0.3, unknown_pose=True).step_size == 0.3

    def test_defaults(self):
        c = OptimizerConfig()
        assert (c.steps, c.restarts, c.tau) == (300, 8, 0.1)

    @pytest.mark.parametrize("kw", [dict(steps=0), dict(restarts=0), dict(lr=0.0), dict(lr=-1.0), dict(tau=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            OptimizerConfig(**kw)


class TestStep:
    def test_fixed_point(self):
        s = state()
        new = step(s, grads(), OptimizerConfig(noise=False, unknown_light=True, unknown_pose=True), 1)
        np.testing.assert_allclose(new.z, s.z, atol=1e-15)
        np.testing.assert_array_equal(new.light_angles, s.light_angles)
        np.testing.assert_array_equal(new.quaternion, s.quaternion)
        np.testing.assert_array_equal(new.translation, s.translation)

    def test_known_light_and_pose_untouched(self):
        s = state()
        g = grads(z=np.ones(4), angles=(1.0, 1.0), quat=(1.0, 1.0, 1.0, 1.0), trans=(1.0, 1.0, 1.0))
        new = step(s, g, OptimizerConfig(noise=False), 1)
        np.testing.assert_array_equal(new.light_angles, s.light_angles)
        np.testing.assert_array_equal(new.quaternion, s.quaternion)
        np.testing.assert_array_equal(new.translation, s.translation)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 10.0), st.floats(0.01, 100.0))
    def test_projections(self, seed, lr, scale):
        rng = np.random.default_rng(seed)
        s = state(rng=rng)
        g = grads(z=scale * rng.standard_normal(4), angles=scale * rng.standard_normal(2),
                  quat=scale * rng.standard_normal(4), trans=scale * rng.standard_normal(3))
        cfg = OptimizerConfig(lr=lr, unknown_light=True, unknown_pose=True)
        new = step(s, g, cfg, int(rng.integers(1, 301)), rng)
        assert abs(np.linalg.norm(new.z) - 1.0) < 1e-9
        assert abs(np.linalg.norm(new.quaternion) - 1.0) < 1e-9
        assert new.quaternion[0] == new.quaternion[1] == 0.0
        assert ELEVATION_MIN <= new.light_angles[1] <= ELEVATION_MAX
        assert np.all(np.abs(new.translation[:2]) <= TRANSLATION_BOX)
        assert new.translation[2] == s.translation[2]

    def test_gradient_clipped(self):
        s = state()
        cfg = OptimizerConfig(lr=0.01, noise=False, unknown_light=True)
        small = step(s, grads(angles=(10.0, 0.0)), cfg, 1)
        big = step(s, grads(angles=(1000.0, 0.0)), cfg, 1)
        np.testing.assert_allclose(small.light_angles, big.light_angles)
        assert small.light_angles[0] == pytest.approx(0.3 - 0.1)

    def test_noise_only_on_latent(self):
        s = state()
        cfg = OptimizerConfig(lr=0.01, unknown_light=True, unknown_pose=True)
        new = step(s, grads(), cfg, 1, np.random.default_rng(1))
        assert not np.allclose(new.z, s.z)
        np.testing.assert_array_equal(new.light_angles, s.light_angles)
        np.testing.assert_array_equal(new.translation, s.translation)

    def test_non_finite(self):
        with pytest.raises(NonFiniteGradient):
            step(state(), grads(z=[np.nan, 0, 0, 0]), OptimizerConfig(noise=False), 1)

    def test_sphere_quadratic(self):
        # J = ||z - z*||^2 on the unit sphere is minimised at z*/||z*||
        rng = np.random.default_rng(2)
        target = 2.0 * unit(rng.standard_normal(5))
        optimum = (np.linalg.norm(target) - 1.0) ** 2
        cfg = OptimizerConfig(lr=0.1, noise=False)
        s = ChainState(unit(rng.standard_normal(5)), np.zeros(2), np.array([0, 0, 0, 1.0]), np.zeros(3))
        J = lambda z: float(np.sum((z - target) ** 2))
        prev = J(s.z)
        for k in range(1, 1000):
            s = step(s, grads(z=2 * (s.z - target)), cfg, k)
            cur = J(s.z)
            if prev - optimum < 1e-4:
                break
            assert cur < prev
            prev = cur
        assert J(s.z) - optimum < 1e-4
        np.testing.assert_allclose(s.z, unit(target), atol=1e-2)


@pytest.fixture(scope="module")
def problem():
    gen = GeneratorSpec.for_category("blob")
    scene, truth, obs = random_scene(np.random.default_rng(10), gen, size=32, samples=32)
    return gen, scene, obs


class TestReconstruct:
    def test_no_valid_pixels(self, problem):
        gen, scene, obs = problem
        with pytest.raises(NoValidPixels):
            reconstruct(ShadowImage(obs.values, np.zeros_like(obs.valid)), scene, gen, OptimizerConfig(steps=2))

    def test_result_invariants(self, problem):
        gen, scene, obs = problem
        res = reconstruct(obs, scene, gen, OptimizerConfig(steps=8, restarts=3, unknown_light=True,
                                                           unknown_pose=True, seed=1))
        assert len(res.restarts) == 3
        losses = [r.final_loss for r in res.restarts]
        assert losses == sorted(losses)
        assert res.best is res.restarts[0]
        for r in res.restarts:
            assert len(r.losses) <= 8
            assert all(abs(n - 1) < 1e-6 for n in r.z_norms)
            assert all(abs(n - 1) < 1e-6 for n in r.quat_norms)
            assert abs(np.linalg.norm(r.z) - 1) < 1e-6
            assert np.linalg.norm(r.light) == pytest.approx(3.0)

    def test_deterministic(self, problem):
        gen, scene, obs = problem
        cfg = OptimizerConfig(steps=6, restarts=2, seed=5)
        a, b = reconstruct(obs, scene, gen, cfg), reconstruct(obs, scene, gen, cfg)
        for ra, rb in zip(a.restarts, b.restarts):
            assert ra.index == rb.index
            assert ra.losses == rb.losses
            np.testing.assert_array_equal(ra.z, rb.z)

    def test_restart_independence(self, problem):
        gen, scene, obs = problem
        alone = reconstruct(obs, scene, gen, OptimizerConfig(steps=6, restarts=1, seed=3)).by_index()
        serial = reconstruct(obs, scene, gen, OptimizerConfig(steps=6, restarts=3, seed=3)).by_index()
        threaded = reconstruct(obs, scene, gen, OptimizerConfig(steps=6, restarts=3, seed=3, threads=3)).by_index()
        assert alone[0].losses == serial[0].losses
        np.testing.assert_array_equal(alone[0].z, serial[0].z)
        for rs, rt in zip(serial, threaded):
            assert rs.losses == rt.losses
            np.testing.assert_array_equal(rs.z, rt.z)

    def test_noiseless_trajectory_nonincreasing(self):
        gen = GeneratorSpec.for_category("blob")
        rng = np.random.default_rng(20)
        for i in range(10):
            scene, _, obs = random_scene(rng, gen, size=32, samples=32)
            cfg = OptimizerConfig(steps=25, restarts=1, lr=0.02, noise=False, straight_through=False, seed=i)
            losses = reconstruct(obs, scene, gen, cfg).best.losses
            assert all(b <= a + 1e-12 for a, b in zip(losses[5:], losses[6:])), i

    def test_recovers_simple_scene(self, problem):
        gen, scene, obs = problem
        res = reconstruct(obs, scene, gen, OptimizerConfig(steps=120, restarts=2, seed=0))
        assert res.best.final_loss < 0.1
