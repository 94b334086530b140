import numpy as np
import pytest

from willmore.grid import (
    GridSpec,
    NodalField,
    StencilKernel,
    convolve,
    convolve_adjoint,
    convolve_periodic,
    convolve_spectral,
    cyclic_shift,
    discrete_l2_dist,
    discrete_l2_norm,
    physical_l2_norm,
    upsample_kernel_bilinear,
)


def unit_grid(d, n):
    return GridSpec(d, n, (0.0,) * d, 1.0)


class TestGridSpec:
    def test_spacing(self):
        spec = GridSpec(2, 256, (-1.0, -1.0), 2.0)
        assert spec.h == 2.0 / 256
        assert spec.num_nodes == 256**2
        assert spec.volume == 4.0

    def test_bad_dimension(self):
        with pytest.raises(ValueError):
            GridSpec(4, 8, (0.0,) * 4, 1.0)

    def test_bad_edge(self):
        with pytest.raises(ValueError):
            GridSpec(2, 8, (0.0, 0.0), -1.0)

    def test_origin_broadcast(self):
        spec = GridSpec(3, 8, (0.0,), 1.0)
        assert spec.origin == (0.0, 0.0, 0.0)

    def test_node_coords(self):
        spec = GridSpec(2, 4, (-1.0, -1.0), 2.0)
        coords = spec.node_coords()
        assert coords.shape == (4, 4, 2)
        assert coords[0, 0, 0] == -1.0
        assert coords[1, 0, 0] == -0.5
        # index n wraps to index 0, so the last node sits one h short of the far edge
        assert coords[3, 0, 0] == 0.5


class TestNodalField:
    def test_length_check(self):
        with pytest.raises(ValueError):
            NodalField(unit_grid(2, 4), np.zeros(15))

    def test_finite_check(self):
        vals = np.zeros(16)
        vals[3] = np.nan
        with pytest.raises(ValueError):
            NodalField(unit_grid(2, 4), vals)

    def test_immutable(self):
        f = NodalField(unit_grid(2, 4), np.zeros(16))
        with pytest.raises(ValueError):
            f.values[0] = 1.0


class TestNorm:
    def test_constant_field(self):
        f = NodalField(unit_grid(2, 8), np.full(64, 2.0))
        assert discrete_l2_norm(f) == pytest.approx(2.0, abs=0)

    def test_zero_field(self):
        f = NodalField(unit_grid(3, 4), np.zeros(64))
        assert discrete_l2_norm(f) == 0.0

    def test_hand_example_1d(self):
        # sqrt((9+16)/2), evaluated by hand
        f = NodalField(unit_grid(1, 2), np.array([3.0, 4.0]))
        assert discrete_l2_norm(f) == pytest.approx(3.5355339059327378, rel=1e-14)

    def test_scaling(self):
        rng = np.random.default_rng(0)
        f = NodalField(unit_grid(2, 8), rng.standard_normal(64))
        g = NodalField(unit_grid(2, 8), -2.5 * f.values)
        assert discrete_l2_norm(g) == pytest.approx(2.5 * discrete_l2_norm(f), rel=1e-14)

    def test_dist(self):
        spec = unit_grid(1, 2)
        u = NodalField(spec, np.array([3.0, 4.0]))
        z = NodalField(spec, np.zeros(2))
        assert discrete_l2_dist(u, u) == 0.0
        assert discrete_l2_dist(u, z) == pytest.approx(3.5355339059327378, rel=1e-14)
        ones = NodalField(unit_grid(2, 4), np.ones(16))
        zeros = NodalField(unit_grid(2, 4), np.zeros(16))
        assert discrete_l2_dist(ones, zeros) == pytest.approx(1.0, abs=0)

    def test_dist_grid_mismatch(self):
        u = NodalField(unit_grid(2, 4), np.zeros(16))
        v = NodalField(unit_grid(2, 8), np.zeros(64))
        with pytest.raises(ValueError):
            discrete_l2_dist(u, v)

    def test_physical_norm(self):
        spec = GridSpec(2, 8, (-1.0, -1.0), 2.0)
        f = NodalField(spec, np.ones(64))
        assert physical_l2_norm(f) == pytest.approx(2.0, rel=1e-14)


class TestConvolution:
    def test_delta_kernel_identity(self):
        rng = np.random.default_rng(1)
        f = NodalField(unit_grid(2, 8), rng.standard_normal(64))
        for op in (convolve_periodic, convolve_spectral):
            out = op(StencilKernel.delta(2, 3), f)
            np.testing.assert_allclose(out.values, f.values, rtol=0, atol=1e-12)

    def test_averaging_preserves_constants(self):
        k = StencilKernel(2, 3, np.full(9, 1.0 / 9.0))
        f = NodalField(unit_grid(2, 8), np.full(64, 3.25))
        for op in (convolve_periodic, convolve_spectral):
            np.testing.assert_allclose(op(k, f).values, 3.25, rtol=1e-13)

    def test_hand_example_1d(self):
        # offsets (-1, 0, +1) with weights (1, 0, -1): (K*U)_a = U_{a-1} - U_{a+1}
        k = StencilKernel(1, 3, np.array([1.0, 0.0, -1.0]))
        f = NodalField(unit_grid(1, 4), np.array([0.0, 1.0, 0.0, 0.0]))
        expected = np.array([-1.0, 0.0, 1.0, 0.0])
        np.testing.assert_allclose(convolve_periodic(k, f).values, expected, atol=0)
        np.testing.assert_allclose(convolve_spectral(k, f).values, expected, atol=1e-14)

    def test_dimension_mismatch(self):
        k = StencilKernel.delta(3, 3)
        f = NodalField(unit_grid(2, 8), np.zeros(64))
        with pytest.raises(ValueError):
            convolve_periodic(k, f)

    def test_kernel_wider_than_grid(self):
        k = StencilKernel.delta(1, 7)
        f = NodalField(unit_grid(1, 4), np.zeros(4))
        with pytest.raises(ValueError):
            convolve_periodic(k, f)

    @pytest.mark.parametrize("d,n,n_K", [(1, 16, 5), (2, 16, 5), (2, 64, 17), (3, 16, 5), (2, 256, 33)])
    def test_direct_spectral_agreement(self, d, n, n_K):
        rng = np.random.default_rng(d * 100 + n_K)
        f = NodalField(unit_grid(d, n), rng.standard_normal(n**d))
        k = StencilKernel(d, n_K, rng.standard_normal(n_K**d))
        a = convolve_periodic(k, f).values
        b = convolve_spectral(k, f).values
        assert np.max(np.abs(a - b)) <= 1e-10 * max(1.0, np.max(np.abs(a)))

    def test_linearity(self):
        rng = np.random.default_rng(7)
        spec = unit_grid(2, 12)
        k = StencilKernel(2, 5, rng.standard_normal(25))
        u = rng.standard_normal(144)
        v = rng.standard_normal(144)
        a, b = 1.7, -0.3
        lhs = convolve(k, NodalField(spec, a * u + b * v)).values
        rhs = a * convolve(k, NodalField(spec, u)).values + b * convolve(k, NodalField(spec, v)).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(8)
        spec = unit_grid(2, 12)
        k = StencilKernel(2, 5, rng.standard_normal(25))
        f = NodalField(spec, rng.standard_normal(144))
        shift = (3, 5)
        a = convolve(k, cyclic_shift(f, shift)).values
        b = cyclic_shift(convolve(k, f), shift).values
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestAdjoint:
    def test_symmetric_kernel_self_adjoint(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal((5, 5))
        w = w + w[::-1, ::-1]  # symmetric under offset negation
        k = StencilKernel(2, 5, w.reshape(-1))
        f = NodalField(unit_grid(2, 16), rng.standard_normal(256))
        np.testing.assert_allclose(
            convolve_adjoint(k, f).values, convolve_periodic(k, f).values, atol=1e-12
        )

    def test_delta_adjoint_identity(self):
        f = NodalField(unit_grid(2, 8), np.arange(64.0))
        np.testing.assert_allclose(convolve_adjoint(StencilKernel.delta(2, 3), f).values, f.values)

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_adjoint_identity_random(self, d):
        rng = np.random.default_rng(40 + d)
        n, n_K = 12, 5
        spec = unit_grid(d, n)
        k = StencilKernel(d, n_K, rng.standard_normal(n_K**d))
        u = NodalField(spec, rng.standard_normal(n**d))
        w = NodalField(spec, rng.standard_normal(n**d))
        lhs = np.dot(convolve_periodic(k, u).values, w.values)
        rhs = np.dot(u.values, convolve_adjoint(k, w).values)
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


class TestUpsample:
    def test_identity_width(self):
        rng = np.random.default_rng(3)
        k = StencilKernel(2, 5, rng.standard_normal(25))
        out = upsample_kernel_bilinear(k, 5)
        np.testing.assert_array_equal(out.weights, k.weights)

    def test_even_target_rejected(self):
        with pytest.raises(ValueError):
            upsample_kernel_bilinear(StencilKernel.delta(2, 3), 6)

    def test_delta_upsample(self):
        out = upsample_kernel_bilinear(StencilKernel.delta(2, 3), 5)
        g = out.as_grid()
        assert g[2, 2] == g.max()
        assert out.weights.sum() == pytest.approx(1.0, rel=1e-14)
        # support stays within one coarse cell of the center
        assert np.all(g[0, :] == 0) and np.all(g[:, 0] == 0)

    def test_constant_kernel_interior(self):
        k = StencilKernel(2, 5, np.full(25, 2.0))
        out = upsample_kernel_bilinear(k, 9).as_grid()
        interior = out[1:-1, 1:-1]
        assert np.allclose(interior, interior[0, 0])

    def test_mass_preserved(self):
        rng = np.random.default_rng(4)
        k = StencilKernel(2, 9, rng.random(81) + 0.5)
        out = upsample_kernel_bilinear(k, 17)
        assert out.weights.sum() == pytest.approx(k.weights.sum(), rel=1e-12)

    def test_width_17_to_33(self):
        rng = np.random.default_rng(5)
        k = StencilKernel(2, 17, rng.random(289))
        out = upsample_kernel_bilinear(k, 33)
        assert out.n_K == 33
