import numpy as np
import pytest
from scipy.special import expit

from umbra.autodiff import finite_difference_check
from umbra.errors import DimensionMismatch
from umbra.generator import (
    CATEGORIES,
    GeneratorSpec,
    decode,
    decode_jacobian,
    decode_params,
    project_to_sphere,
    sample_latent,
)
from umbra.occfield import BOX, ELLIPSOID


@pytest.fixture(params=sorted(CATEGORIES))
def gen(request):
    return GeneratorSpec.for_category(request.param)


class TestDecode:
    def test_zero_latent(self, gen):
        shape = decode(gen, np.zeros(gen.latent_dim))
        np.testing.assert_array_equal(shape.centers, 0.0)
        slots = [gen.b[s + 3:s + 6] for s in np.cumsum([0] + [7 if k == BOX else 6 for k in gen.kinds])[:-1]]
        np.testing.assert_allclose(shape.half_extents, 0.05 + 0.45 * expit(np.array(slots)))
        assert shape.in_range()

    def test_ranges(self, gen):
        rng = np.random.default_rng(0)
        for _ in range(200):
            shape = decode(gen, sample_latent(rng, gen.latent_dim))
            assert np.all((shape.half_extents >= 0.05) & (shape.half_extents <= 0.5))
            assert np.all(np.abs(shape.centers) <= 0.4)
            assert np.all((shape.exponents >= 2.0) & (shape.exponents <= 8.0))

    def test_extreme_latents_stay_valid(self, gen):
        # far off the sphere the squashes saturate but never leave the box
        shape = decode(gen, 1e3 * np.ones(gen.latent_dim))
        assert shape.in_range() and np.all(np.abs(shape.centers) <= 0.4)

    def test_deterministic(self, gen):
        z = sample_latent(np.random.default_rng(1), gen.latent_dim)
        twin = GeneratorSpec.for_category(gen.category)
        a, b = decode(gen, z), decode(twin, z)
        np.testing.assert_array_equal(a.centers, b.centers)
        np.testing.assert_array_equal(a.half_extents, b.half_extents)
        np.testing.assert_array_equal(a.exponents, b.exponents)

    def test_identity_pose(self, gen):
        shape = decode(gen, sample_latent(np.random.default_rng(2), gen.latent_dim))
        np.testing.assert_array_equal(shape.pose.translation, 0.0)

    def test_dimension_mismatch(self, gen):
        with pytest.raises(DimensionMismatch):
            decode(gen, np.zeros(gen.latent_dim + 1))

    def test_seed_changes_decoder(self):
        a = GeneratorSpec(latent_dim=4, kinds=(ELLIPSOID,), seed=1)
        b = GeneratorSpec(latent_dim=4, kinds=(ELLIPSOID,), seed=2)
        assert not np.array_equal(a.W, b.W)

    def test_dict_round_trip(self, gen):
        twin = GeneratorSpec.from_dict(gen.to_dict())
        assert twin == gen
        np.testing.assert_array_equal(twin.W, gen.W)
        np.testing.assert_array_equal(twin.b, gen.b)

    def test_category_primitive_counts(self):
        assert GeneratorSpec.for_category("blob").kinds == (ELLIPSOID, ELLIPSOID)
        assert GeneratorSpec.for_category("table").kinds == (BOX,) * 5


class TestJacobian:
    def test_against_differences(self, gen):
        rng = np.random.default_rng(3)
        for _ in range(20):
            z = sample_latent(rng, gen.latent_dim)
            J = decode_jacobian(gen, z)
            for row in range(gen.param_count):
                err = finite_difference_check(lambda x: decode_params(gen, x)[row], z, 1e-6, grad=lambda x: J[row])
                assert err < 1e-5

    def test_zero_column(self):
        gen = GeneratorSpec(latent_dim=3, kinds=(ELLIPSOID, BOX), seed=5)
        W = gen.W.copy()
        W[:, 1] = 0.0
        object.__setattr__(gen, "W", W)
        J = decode_jacobian(gen, project_to_sphere([0.3, 0.5, -0.2]))
        np.testing.assert_array_equal(J[:, 1], 0.0)
        assert np.all(np.any(J[:, [0, 2]] != 0, axis=0))

    def test_centre_rows_bounded(self, gen):
        z = sample_latent(np.random.default_rng(4), gen.latent_dim)
        J = decode_jacobian(gen, z)
        start = 0
        for k in gen.kinds:
            for j in range(3):
                assert np.linalg.norm(J[start + j]) <= 0.4 * np.linalg.norm(gen.W[start + j]) + 1e-15
            start += 7 if k == BOX else 6

    def test_lipschitz(self, gen):
        rng = np.random.default_rng(5)
        # every squash has slope at most 0.45 / 4 < 0.4 or 6 / 4 = 1.5 (exponents)
        L = 1.5 * np.max(np.linalg.norm(gen.W, axis=1))
        for _ in range(100):
            z1, z2 = sample_latent(rng, gen.latent_dim), sample_latent(rng, gen.latent_dim)
            gap = np.max(np.abs(decode_params(gen, z1) - decode_params(gen, z2)))
            assert gap <= L * np.linalg.norm(z1 - z2) + 1e-12


class TestSampleLatent:
    def test_unit_norm(self):
        rng = np.random.default_rng(6)
        for d in (1, 4, 16):
            assert np.linalg.norm(sample_latent(rng, d)) == pytest.approx(1.0, abs=1e-9)

    def test_moments(self):
        # uniform on the sphere: each coordinate has mean 0 and variance 1/d
        d, n = 8, 10_000
        rng = np.random.default_rng(7)
        Z = np.array([sample_latent(rng, d) for _ in range(n)])
        assert np.all(np.abs(Z.mean(axis=0)) < 3 * np.sqrt(1.0 / d / n))

    def test_draws_differ(self):
        rng = np.random.default_rng(8)
        assert not np.array_equal(sample_latent(rng, 8), sample_latent(rng, 8))

    def test_radius_knob(self):
        assert np.linalg.norm(sample_latent(np.random.default_rng(9), 16, 4.0)) == pytest.approx(4.0)

    def test_bad_dimension(self):
        with pytest.raises(ValueError):
            sample_latent(np.random.default_rng(0), 0)
