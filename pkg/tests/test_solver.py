import numpy as np
import pytest

from willmore.grid import GridSpec, NodalField, StencilKernel
from willmore.neural import MlpParams, NeuralMcfOperator, mlp_forward
from willmore.phase_field import Sphere, sphere_phase_field
from willmore.reference import AllenCahnStepConfig, SemiImplicitMcfOperator
from willmore.solver import (
    WillmoreConfig,
    apply_mask_constraint,
    mask_from_shape,
    newton_cg_step,
    outer_energy,
    outer_gradient,
    outer_hvp,
    run_flow,
    willmore_proxy,
)

EPS = 0.25
TAU = 0.01
TT = 0.02


def make_cfg(**kw):
    return WillmoreConfig(tau=kw.pop("tau", TAU), tau_tilde=kw.pop("tau_tilde", TT), eps=kw.pop("eps", EPS), **kw)


def make_operator(seed=0, n_K=5, sizes=(6, 3, 1)):
    rng = np.random.default_rng(seed)
    kernel_w = 0.4 * rng.standard_normal(n_K**2)
    return NeuralMcfOperator(StencilKernel(2, n_K, kernel_w), MlpParams.random(rng, sizes), TT, EPS)


def smooth_field(spec, seed):
    rng = np.random.default_rng(seed)
    return np.tanh(rng.standard_normal(spec.num_nodes))


@pytest.fixture
def setting():
    spec = GridSpec(2, 8, (0.0, 0.0), 1.0)
    op = make_operator(1)
    u_prev = NodalField(spec, smooth_field(spec, 2))
    u = NodalField(spec, smooth_field(spec, 3))
    return spec, op, u_prev, u


class TestOuterEnergy:
    def test_compositional_oracle(self, setting):
        # independent recomposition from the primitive operations
        spec, op, u_prev, u = setting
        cfg = make_cfg()
        from willmore.grid import convolve_periodic

        v = mlp_forward(op.mlp, convolve_periodic(op.kernel, u).values)
        w = 1.0 / spec.num_nodes
        dist_sq = w * np.sum((u.values - u_prev.values) ** 2)
        prox_sq = w * np.sum((v - u.values) ** 2)
        expected = cfg.eps * dist_sq + cfg.tau * cfg.eps / cfg.tau_tilde**2 * prox_sq
        got = outer_energy(u_prev, u, op, cfg)
        assert got == pytest.approx(expected, rel=1e-14)

    def test_first_term_vanishes_at_prev(self, setting):
        spec, op, u_prev, _ = setting
        cfg = make_cfg()
        e = outer_energy(u_prev, u_prev, op, cfg)
        assert e == pytest.approx(2.0 * cfg.tau * willmore_proxy(u_prev, op, cfg), rel=1e-14)

    def test_zero_when_fixed_point(self, setting):
        spec, op, u_prev, _ = setting

        class IdentityOp:
            tau_tilde = TT
            epsilon = EPS

            def prepare(self, spec_, u_, order=2):
                class Ctx:
                    value = u_.copy()

                return Ctx()

        assert outer_energy(u_prev, u_prev, IdentityOp(), make_cfg()) == 0.0

    def test_grid_mismatch(self, setting):
        spec, op, u_prev, u = setting
        other = GridSpec(2, 16, (0.0, 0.0), 1.0)
        with pytest.raises(ValueError):
            outer_energy(u_prev, NodalField(other, np.zeros(other.num_nodes)), op, make_cfg())


class TestWillmoreProxy:
    def test_energy_identity(self, setting):
        # E = eps ||U-U_prev||^2 + 2 tau W[U] exactly
        spec, op, u_prev, u = setting
        cfg = make_cfg()
        w = 1.0 / spec.num_nodes
        dist_sq = w * float(np.sum((u.values - u_prev.values) ** 2))
        lhs = outer_energy(u_prev, u, op, cfg)
        rhs = cfg.eps * dist_sq + 2.0 * cfg.tau * willmore_proxy(u, op, cfg)
        assert lhs == pytest.approx(rhs, rel=1e-14)

    def test_zero_for_fixed_point(self, setting):
        spec, op, u_prev, _ = setting

        class IdentityOp:
            tau_tilde = TT
            epsilon = EPS

            def prepare(self, spec_, u_, order=2):
                class Ctx:
                    value = u_.copy()

                return Ctx()

        assert willmore_proxy(u_prev, IdentityOp(), make_cfg()) == 0.0


class TestOuterGradient:
    def test_stationary_for_identity_operator(self, setting):
        spec, op, u_prev, _ = setting

        class IdentityOp:
            tau_tilde = TT
            epsilon = EPS

            def prepare(self, spec_, u_, order=2):
                class Ctx:
                    value = u_.copy()

                return Ctx()

            def vjp(self, ctx, w_):
                return w_.copy()

        g = outer_gradient(u_prev, u_prev, IdentityOp(), make_cfg())
        assert np.all(g.values == 0.0)

    @pytest.mark.parametrize("n", [8, 16])
    def test_matches_finite_differences(self, n):
        spec = GridSpec(2, n, (0.0, 0.0), 1.0)
        op = make_operator(5)
        cfg = make_cfg()
        u_prev = NodalField(spec, smooth_field(spec, 6))
        u = NodalField(spec, smooth_field(spec, 7))
        g = outer_gradient(u_prev, u, op, cfg).values

        delta = 1e-6
        fd = np.zeros_like(g)
        base = u.values.copy()
        for i in range(spec.num_nodes):
            up, dn = base.copy(), base.copy()
            up[i] += delta
            dn[i] -= delta
            fd[i] = (
                outer_energy(u_prev, NodalField(spec, up), op, cfg)
                - outer_energy(u_prev, NodalField(spec, dn), op, cfg)
            ) / (2 * delta)
        rel = np.linalg.norm(g - fd) / np.linalg.norm(fd)
        assert rel < 1e-6

    def test_masked_gradient_zero_outside(self, setting):
        spec, op, u_prev, u = setting
        rng = np.random.default_rng(8)
        mask_vals = (rng.random(spec.num_nodes) < 0.5).astype(float)
        cfg = make_cfg(mask=NodalField(spec, mask_vals))
        g = outer_gradient(u_prev, u, op, cfg).values
        assert np.all(g[mask_vals == 0.0] == 0.0)

    def test_all_false_mask_gives_zero(self, setting):
        spec, op, u_prev, u = setting
        cfg = make_cfg(mask=NodalField(spec, np.zeros(spec.num_nodes)))
        g = outer_gradient(u_prev, u, op, cfg).values
        assert np.all(g == 0.0)


class TestOuterHvp:
    def test_zero_direction(self, setting):
        spec, op, u_prev, u = setting
        z = NodalField(spec, np.zeros(spec.num_nodes))
        out = outer_hvp(u_prev, u, z, op, make_cfg())
        assert np.all(out.values == 0.0)

    def test_full_mode_matches_gradient_differences(self, setting):
        spec, op, u_prev, u = setting
        cfg = make_cfg(hessian_mode="full")
        rng = np.random.default_rng(9)
        p = rng.standard_normal(spec.num_nodes)
        delta = 1e-6
        gp = outer_gradient(u_prev, NodalField(spec, u.values + delta * p), op, cfg).values
        gm = outer_gradient(u_prev, NodalField(spec, u.values - delta * p), op, cfg).values
        fd = (gp - gm) / (2 * delta)
        hv = outer_hvp(u_prev, u, NodalField(spec, p), op, cfg).values
        rel = np.linalg.norm(hv - fd) / np.linalg.norm(fd)
        assert rel < 1e-5

    def test_gauss_newton_lower_bound(self, setting):
        # <H p, p> >= 2 eps w |p|^2 for the Gauss-Newton mode
        spec, op, u_prev, u = setting
        cfg = make_cfg(hessian_mode="gauss-newton")
        w = 1.0 / spec.num_nodes
        rng = np.random.default_rng(10)
        for _ in range(5):
            p = rng.standard_normal(spec.num_nodes)
            hp = outer_hvp(u_prev, u, NodalField(spec, p), op, cfg).values
            quad = np.dot(hp, p)
            bound = 2.0 * cfg.eps * w * np.dot(p, p)
            assert quad >= bound * (1.0 - 1e-12)

    def test_symmetry(self, setting):
        spec, op, u_prev, u = setting
        cfg = make_cfg(hessian_mode="full")
        rng = np.random.default_rng(11)
        p = rng.standard_normal(spec.num_nodes)
        q = rng.standard_normal(spec.num_nodes)
        hp = outer_hvp(u_prev, u, NodalField(spec, p), op, cfg).values
        hq = outer_hvp(u_prev, u, NodalField(spec, q), op, cfg).values
        assert np.dot(hp, q) == pytest.approx(np.dot(hq, p), rel=1e-11)

    def test_masked_rows_identity(self, setting):
        spec, op, u_prev, u = setting
        rng = np.random.default_rng(12)
        mask_vals = (rng.random(spec.num_nodes) < 0.5).astype(float)
        cfg = make_cfg(mask=NodalField(spec, mask_vals))
        p = rng.standard_normal(spec.num_nodes)
        hp = outer_hvp(u_prev, u, NodalField(spec, p), op, cfg).values
        frozen = mask_vals == 0.0
        np.testing.assert_array_equal(hp[frozen], p[frozen])


def trained_like_operator(spec, eps, tt):
    """Cheap stand-in inner operator: the closed-form semi-implicit step."""
    return SemiImplicitMcfOperator(AllenCahnStepConfig(eps=eps, tau_tilde=tt))


class TestNewtonCgStep:
    def test_converged_input_returned_unchanged(self, setting):
        spec, op, u_prev, _ = setting

        class IdentityOp:
            tau_tilde = TT
            epsilon = EPS

            def prepare(self, spec_, u_, order=2):
                class Ctx:
                    value = u_.copy()

                return Ctx()

            def ensure_order(self, ctx, order):
                return ctx

            def vjp(self, ctx, w_):
                return w_.copy()

            def residual_hessian_action(self, ctx, p, g, full):
                return np.zeros_like(p)

        out, diag = newton_cg_step(u_prev, IdentityOp(), make_cfg())
        np.testing.assert_array_equal(out.values, u_prev.values)
        assert diag.newton_iterations == 0
        assert diag.converged

    def test_energy_decrease_contract(self):
        eps, tt = 2.0**-4, 2.0**-10
        spec = GridSpec(2, 32, (0.0, 0.0), 1.0)
        u0 = sphere_phase_field(spec, 0.25, (0.5, 0.5), eps)
        op = trained_like_operator(spec, eps, tt)
        cfg = WillmoreConfig(tau=2.0**-12, tau_tilde=tt, eps=eps)
        out, diag = newton_cg_step(u0, op, cfg)
        assert diag.energy <= diag.energy_start
        assert diag.armijo_ok

    def test_willmore_circle_grows(self):
        # one large step of Willmore flow grows a small circle
        eps, tt = 2.0**-4, 2.0**-10
        spec = GridSpec(2, 64, (0.0, 0.0), 1.0)
        u0 = sphere_phase_field(spec, 0.2, (0.5, 0.5), eps)
        op = trained_like_operator(spec, eps, tt)
        cfg = WillmoreConfig(tau=2.0**-9, tau_tilde=tt, eps=eps)
        out, diag = newton_cg_step(u0, op, cfg)
        # interior value at former interface should now be positive (inside)
        grown_area = np.mean(out.values > 0) - np.mean(u0.values > 0)
        assert grown_area > 0


class TestRunFlow:
    def test_zero_steps(self):
        eps, tt = 2.0**-4, 2.0**-10
        spec = GridSpec(2, 16, (0.0, 0.0), 1.0)
        u0 = sphere_phase_field(spec, 0.25, (0.5, 0.5), eps)
        op = trained_like_operator(spec, eps, tt)
        traj = run_flow(u0, 0, op, WillmoreConfig(tau=1e-3, tau_tilde=tt, eps=eps))
        assert len(traj.records) == 1
        assert traj.records[0].step == 0
        np.testing.assert_array_equal(traj.records[0].field.values, u0.values)

    def test_proxy_monotone(self):
        eps, tt = 2.0**-4, 2.0**-10
        spec = GridSpec(2, 32, (0.0, 0.0), 1.0)
        u0 = sphere_phase_field(spec, 0.22, (0.5, 0.5), eps)
        op = trained_like_operator(spec, eps, tt)
        traj = run_flow(u0, 5, op, WillmoreConfig(tau=2.0**-11, tau_tilde=tt, eps=eps))
        proxies = traj.proxies()
        assert np.all(np.diff(proxies) <= 1e-10)

    def test_deterministic(self):
        eps, tt = 2.0**-4, 2.0**-10
        spec = GridSpec(2, 16, (0.0, 0.0), 1.0)
        u0 = sphere_phase_field(spec, 0.25, (0.5, 0.5), eps)
        op = trained_like_operator(spec, eps, tt)
        cfg = WillmoreConfig(tau=2.0**-11, tau_tilde=tt, eps=eps)
        t1 = run_flow(u0, 3, op, cfg)
        t2 = run_flow(u0, 3, op, cfg)
        assert [r.checksum for r in t1.records] == [r.checksum for r in t2.records]

    def test_sink_called(self):
        eps, tt = 2.0**-4, 2.0**-10
        spec = GridSpec(2, 16, (0.0, 0.0), 1.0)
        u0 = sphere_phase_field(spec, 0.25, (0.5, 0.5), eps)
        op = trained_like_operator(spec, eps, tt)
        seen = []
        run_flow(u0, 2, op, WillmoreConfig(tau=2.0**-11, tau_tilde=tt, eps=eps), sink=lambda k, f, d: seen.append(k))
        assert seen == [0, 1, 2]


class TestSpectralPreconditioner:
    def _stiff_setting(self):
        eps, tt = 2.0**-4, 2.0**-10
        spec = GridSpec(2, 64, (0.0, 0.0), 1.0)
        u0 = sphere_phase_field(spec, 0.25, (0.5, 0.5), eps)
        op = trained_like_operator(spec, eps, tt)
        return spec, u0, op, eps, tt

    def test_same_minimizer_fewer_cg_iterations(self):
        spec, u0, op, eps, tt = self._stiff_setting()
        base = WillmoreConfig(tau=tt, tau_tilde=tt, eps=eps, cg_rel_tol=1e-8)
        fast = WillmoreConfig(tau=tt, tau_tilde=tt, eps=eps, cg_rel_tol=1e-8, precond="spectral")
        out_a, diag_a = newton_cg_step(u0, op, base)
        out_b, diag_b = newton_cg_step(u0, op, fast)
        assert np.max(np.abs(out_a.values - out_b.values)) < 1e-6
        assert diag_b.cg_iterations < diag_a.cg_iterations

    def test_unknown_precond_rejected(self):
        with pytest.raises(ValueError):
            WillmoreConfig(tau=1e-3, tau_tilde=1e-3, eps=0.1, precond="magic")

    def test_spectral_requires_symbol(self):
        spec = GridSpec(2, 8, (0.0, 0.0), 1.0)

        class NoSymbolOp:
            tau_tilde = 1e-3
            epsilon = 0.1

            def prepare(self, spec_, u_, order=2):
                raise AssertionError("should fail before prepare")

        cfg = WillmoreConfig(tau=1e-3, tau_tilde=1e-3, eps=0.1, precond="spectral")
        u = NodalField(spec, np.zeros(spec.num_nodes))
        with pytest.raises(ValueError, match="jacobian_symbol"):
            newton_cg_step(u, NoSymbolOp(), cfg)


class TestMask:
    def test_apply_mask_all_true(self):
        spec = GridSpec(2, 8, (0.0, 0.0), 1.0)
        rng = np.random.default_rng(20)
        upd = NodalField(spec, rng.standard_normal(64))
        prev = NodalField(spec, rng.standard_normal(64))
        ones = NodalField(spec, np.ones(64))
        out = apply_mask_constraint(upd, prev, ones)
        np.testing.assert_array_equal(out.values, upd.values)

    def test_apply_mask_all_false(self):
        spec = GridSpec(2, 8, (0.0, 0.0), 1.0)
        rng = np.random.default_rng(21)
        upd = NodalField(spec, rng.standard_normal(64))
        prev = NodalField(spec, rng.standard_normal(64))
        zeros = NodalField(spec, np.zeros(64))
        out = apply_mask_constraint(upd, prev, zeros)
        np.testing.assert_array_equal(out.values, prev.values)

    def test_mask_from_shape(self):
        spec = GridSpec(2, 32, (0.0, 0.0), 1.0)
        mask = mask_from_shape(spec, Sphere((0.5, 0.5), 0.2))
        m = mask.as_grid()
        assert m[16, 16] == 1.0
        assert m[0, 0] == 0.0

    def test_flow_bit_invariance_outside_mask(self):
        # frozen nodes stay bit-identical over a masked flow
        eps, tt = 2.0**-4, 2.0**-10
        spec = GridSpec(2, 32, (0.0, 0.0), 1.0)
        u0 = sphere_phase_field(spec, 0.25, (0.5, 0.5), eps)
        rng = np.random.default_rng(22)
        mask_vals = (rng.random(spec.num_nodes) < 0.4).astype(float)
        cfg = WillmoreConfig(
            tau=2.0**-11, tau_tilde=tt, eps=eps, mask=NodalField(spec, mask_vals)
        )
        op = trained_like_operator(spec, eps, tt)
        traj = run_flow(u0, 10, op, cfg)
        frozen = mask_vals == 0.0
        for rec in traj.records:
            np.testing.assert_array_equal(rec.field.values[frozen], u0.values[frozen])
        # and the free region actually moved
        assert not np.array_equal(traj.records[-1].field.values, u0.values)

    def test_bad_mask_values_rejected(self):
        spec = GridSpec(2, 8, (0.0, 0.0), 1.0)
        with pytest.raises(ValueError):
            WillmoreConfig(tau=1e-3, tau_tilde=1e-3, eps=0.1, mask=NodalField(spec, np.full(64, 0.5)))

    def test_mask_grid_mismatch(self):
        spec = GridSpec(2, 8, (0.0, 0.0), 1.0)
        other = GridSpec(2, 16, (0.0, 0.0), 1.0)
        mask = NodalField(other, np.ones(other.num_nodes))
        cfg = WillmoreConfig(tau=1e-3, tau_tilde=1e-3, eps=0.1, mask=mask)
        u = NodalField(spec, np.zeros(spec.num_nodes))
        op = make_operator(30)
        with pytest.raises(ValueError):
            outer_gradient(u, u, op, cfg)
