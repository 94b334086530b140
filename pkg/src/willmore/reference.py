"""Classical baselines and analytic oracles for one-step mean curvature flow.

Contains the semi-implicit step (nonlinearity lagged, Laplacian solved
spectrally), the fully implicit step (a small variational problem solved
by Newton-CG), the heat-semigroup/soft-threshold composition, and the
closed-form circle evolutions used as ground truth.

All Laplacians are the standard (2d+1)-point periodic finite difference
stencil, diagonal in Fourier space with symbol -(4/h^2) sum_i sin^2(pi k_i/n).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import GridSpec, NodalField
from .newton import cg_solve, minimize_newton_cg
from .phase_field import double_well, double_well_prime, double_well_second

__all__ = [
    "AllenCahnStepConfig",
    "ConvergenceError",
    "mcf_semi_implicit_step",
    "mcf_implicit_step",
    "heat_step_spectral",
    "soft_threshold_forward",
    "soft_threshold_inverse",
    "mbo_like_step",
    "circle_radius_mcf",
    "circle_radius_willmore",
    "SemiImplicitMcfOperator",
    "ImplicitMcfOperator",
]

MONOTONICITY_BOUND = 8.0 / 9.0


class ConvergenceError(RuntimeError):
    """An iterative solve did not reach its tolerance within the budget."""


@dataclass
class AllenCahnStepConfig:
    """Parameters of one inner mean curvature step at interface width eps."""

    eps: float
    tau_tilde: float
    cg_rel_tol: float = 1e-10
    cg_max_iter: int = 500
    newton_tol: float = 1e-9
    newton_max_iter: int = 50

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.tau_tilde < 0:
            raise ValueError("tau_tilde must be nonnegative")
        if self.tau_tilde / self.eps**2 >= MONOTONICITY_BOUND:
            warnings.warn(
                f"tau_tilde/eps^2 = {self.tau_tilde / self.eps ** 2:.4f} >= 8/9: "
                "the pointwise semi-implicit update map is not monotone",
                stacklevel=2,
            )

    @property
    def c(self) -> float:
        """Nonlinearity weight tau_tilde / (2 eps^2)."""
        return self.tau_tilde / (2.0 * self.eps**2)


# ---------------------------------------------------------------------------
# Fourier symbols (cached per grid geometry).


@lru_cache(maxsize=32)
def _fd_laplacian_symbol(d: int, n: int, h: float):
    """Symbol of the (2d+1)-point periodic Laplacian on the rfftn layout."""
    k = np.arange(n)
    s_full = -4.0 / h**2 * np.sin(np.pi * k / n) ** 2
    s_half = s_full[: n // 2 + 1]
    axes = [s_full] * (d - 1) + [s_half]
    total = np.zeros((n,) * (d - 1) + (n // 2 + 1,))
    for i, s in enumerate(axes):
        shape = [1] * d
        shape[i] = len(s)
        total = total + s.reshape(shape)
    return total


@lru_cache(maxsize=32)
def _heat_multiplier(d: int, n: int, edge: float, tau: float):
    """exp(-tau |xi|^2) with physical angular frequencies xi = 2 pi k / edge."""
    xi_full = (2.0 * np.pi / edge) * np.fft.fftfreq(n, d=1.0 / n)  # integer wave numbers k
    xi_half = (2.0 * np.pi / edge) * np.fft.rfftfreq(n, d=1.0 / n)
    sq = np.zeros((n,) * (d - 1) + (n // 2 + 1,))
    axes = [xi_full] * (d - 1) + [xi_half]
    for i, xi in enumerate(axes):
        shape = [1] * d
        shape[i] = len(xi)
        sq = sq + xi.reshape(shape) ** 2
    return np.exp(-tau * sq)


def _solve_screened(arr: np.ndarray, tau: float, d: int, n: int, h: float) -> np.ndarray:
    """(I - tau Lap_h)^-1 arr via the FFT."""
    sym = _fd_laplacian_symbol(d, n, h)
    fh = np.fft.rfftn(arr)
    fh /= 1.0 - tau * sym
    return np.fft.irfftn(fh, s=arr.shape, axes=tuple(range(d)))


def laplacian_fd(arr: np.ndarray, h: float) -> np.ndarray:
    """(2d+1)-point periodic Laplacian."""
    out = -2.0 * arr.ndim * arr
    for axis in range(arr.ndim):
        out = out + np.roll(arr, 1, axis=axis) + np.roll(arr, -1, axis=axis)
    out /= h * h
    return out


# ---------------------------------------------------------------------------
# One-step schemes.


def mcf_semi_implicit_step(U: NodalField, cfg: AllenCahnStepConfig) -> NodalField:
    """Solve (I - tau Lap) v = u - tau/(2 eps^2) Psi'(u), exactly in Fourier space."""
    spec = U.spec
    u = U.as_grid()
    rhs = u - cfg.c * double_well_prime(u)
    v = _solve_screened(rhs, cfg.tau_tilde, spec.d, spec.n, spec.h)
    return NodalField.from_grid(spec, v)


class _ImplicitStepProblem:
    """Variational inner step: minimize over v

        a * sum[ eps (u-v)^2 + 2 tau ( eps/2 |grad_h v|^2 + Psi(v)/(2 eps) ) ]

    with one uniform node weight a = n^-d on both terms, whose stationarity
    condition is (v-u)/tau = Lap_h v - Psi'(v)/(2 eps^2) on any domain.
    """

    class State:
        __slots__ = ("v", "order", "psi_prime", "psi_second")

        def __init__(self, v, order, psi_prime=None, psi_second=None):
            self.v = v
            self.order = order
            self.psi_prime = psi_prime
            self.psi_second = psi_second

    def __init__(self, spec: GridSpec, u: np.ndarray, cfg: AllenCahnStepConfig):
        self.spec = spec
        self.u = u
        self.cfg = cfg
        self.a = 1.0 / spec.num_nodes
        self.grad_scale = 2.0 * self.a * cfg.eps
        sym = _fd_laplacian_symbol(spec.d, spec.n, spec.h)
        denom = self.grad_scale * (1.0 - cfg.tau_tilde * sym)
        shape = (spec.n,) * spec.d

        def precond(r):
            rh = np.fft.rfftn(r.reshape(shape))
            rh /= denom
            return np.fft.irfftn(rh, s=shape, axes=tuple(range(spec.d))).reshape(-1)

        self.precond = precond

    def state(self, v: np.ndarray, order: int = 2):
        st = self.State(v, 0)
        return self.ensure_order(st, order)

    def ensure_order(self, st, order: int):
        if order >= 1 and st.psi_prime is None:
            st.psi_prime = double_well_prime(st.v)
        if order >= 2 and st.psi_second is None:
            st.psi_second = double_well_second(st.v)
        st.order = max(st.order, order)
        return st

    def energy(self, st) -> float:
        cfg = self.cfg
        spec = self.spec
        v = st.v.reshape(spec.shape)
        diff = self.u.reshape(-1) - st.v
        fidelity = cfg.eps * np.dot(diff, diff)
        grad_sq = 0.0
        h = spec.h
        for axis in range(spec.d):
            dvi = (np.roll(v, -1, axis=axis) - v) / h
            grad_sq += float(np.sum(dvi * dvi))
        potential = float(np.sum(double_well(st.v)))
        return self.a * (fidelity + 2.0 * cfg.tau_tilde * (0.5 * cfg.eps * grad_sq + potential / (2.0 * cfg.eps)))

    def gradient(self, st) -> np.ndarray:
        cfg = self.cfg
        spec = self.spec
        v = st.v.reshape(spec.shape)
        lap = laplacian_fd(v, spec.h).reshape(-1)
        el = (st.v - self.u.reshape(-1)) + cfg.tau_tilde * (-lap + st.psi_prime / (2.0 * cfg.eps**2))
        return self.grad_scale * el

    def hessian_action(self, st, p: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        spec = self.spec
        lap = laplacian_fd(p.reshape(spec.shape), spec.h).reshape(-1)
        return self.grad_scale * (p + cfg.tau_tilde * (-lap + st.psi_second * p / (2.0 * cfg.eps**2)))


def mcf_implicit_step(U: NodalField, cfg: AllenCahnStepConfig) -> NodalField:
    """Fully implicit inner step: minimizer of the variational objective.

    Newton-CG warm started at U; raises ConvergenceError with the residual
    when the gradient tolerance is not met.
    """
    if cfg.tau_tilde == 0.0:
        return NodalField(U.spec, U.values.copy())
    problem = _ImplicitStepProblem(U.spec, U.values, cfg)
    res = minimize_newton_cg(
        problem,
        U.values,
        grad_tol=cfg.newton_tol,
        max_iter=cfg.newton_max_iter,
        cg_rel_tol=cfg.cg_rel_tol,
        cg_max_iter=cfg.cg_max_iter,
    )
    if not res.converged:
        raise ConvergenceError(
            f"implicit step did not converge: normalized gradient {res.grad_norm:.3e} "
            f"after {res.iterations} Newton iterations"
        )
    return NodalField(U.spec, res.u)


def heat_step_spectral(U: NodalField, tau: float) -> NodalField:
    """Exact periodic heat semigroup, Fourier multiplier exp(-tau |xi|^2)."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tau == 0.0:
        return NodalField(U.spec, U.values.copy())
    spec = U.spec
    mult = _heat_multiplier(spec.d, spec.n, spec.edge_length, tau)
    fh = np.fft.rfftn(U.as_grid())
    fh *= mult
    out = np.fft.irfftn(fh, s=spec.shape, axes=tuple(range(spec.d)))
    return NodalField.from_grid(spec, out)


def soft_threshold_forward(u, cfg: AllenCahnStepConfig):
    """The pointwise semi-implicit update map phi(u) = u + tau/(2 eps^2) Psi'(u)."""
    u = np.asarray(u, dtype=float)
    return u + cfg.c * double_well_prime(u)


def soft_threshold_inverse(y, cfg: AllenCahnStepConfig):
    """Unique u with phi(u) = y, to |phi(u) - y| <= 1e-12.

    phi is a monotone cubic when tau/eps^2 < 8/9; outside that bound the
    map is not invertible and a ValueError is raised.
    """
    if cfg.tau_tilde / cfg.eps**2 >= MONOTONICITY_BOUND:
        raise ValueError("tau_tilde/eps^2 >= 8/9: update map is not monotone, no inverse")
    scalar = np.isscalar(y) or np.asarray(y).ndim == 0
    u = np.array(y, dtype=float, copy=True).reshape(-1)
    target = u.copy()
    for _ in range(100):
        f = soft_threshold_forward(u, cfg) - target
        if np.max(np.abs(f)) <= 1e-12:
            break
        fp = 1.0 + cfg.c * double_well_second(u)
        u -= f / fp
    else:
        raise ConvergenceError("soft threshold inversion did not reach 1e-12")
    if scalar:
        return float(u[0])
    return u.reshape(np.shape(y))


def mbo_like_step(U: NodalField, cfg: AllenCahnStepConfig) -> NodalField:
    """Heat semigroup step followed by the pointwise soft-threshold inverse."""
    diffused = heat_step_spectral(U, cfg.tau_tilde)
    return NodalField(U.spec, soft_threshold_inverse(diffused.values, cfg))


# ---------------------------------------------------------------------------
# Closed-form circle evolutions.


def circle_radius_mcf(r0: float, t: float, d: int) -> float:
    """Radius sqrt(r0^2 - 2 (d-1) t) of a shrinking sphere, d = 2 or 3."""
    val = r0 * r0 - 2.0 * (d - 1) * t
    if val < 0:
        raise ValueError(f"sphere of radius {r0} is extinct before time {t}")
    return float(np.sqrt(val))


def circle_radius_willmore(r0: float, t: float) -> float:
    """Radius (r0^4 + 2 t)^(1/4) of a circle expanding by Willmore flow (2D)."""
    if not r0 > 0:
        raise ValueError("radius must be positive")
    if t < 0:
        raise ValueError("time must be nonnegative")
    return float((r0**4 + 2.0 * t) ** 0.25)


# ---------------------------------------------------------------------------
# Inner-operator adapters for the nested minimizing-movement scheme.  Both
# expose the protocol the outer solver consumes: prepare / jvp / vjp /
# residual_hessian_action; see solver.py for the contract.


class _SemiImplicitCtx:
    __slots__ = ("spec", "u", "value", "mdiag", "sg", "shape")

    def __init__(self, spec, u, value, mdiag):
        self.spec = spec
        self.u = u
        self.value = value
        self.mdiag = mdiag
        self.sg = None
        self.shape = spec.shape


class SemiImplicitMcfOperator:
    """Closed-form differentiable wrapper of the semi-implicit step."""

    def __init__(self, cfg: AllenCahnStepConfig):
        self.cfg = cfg
        self.epsilon = cfg.eps
        self.tau_tilde = cfg.tau_tilde

    def _solve(self, spec: GridSpec, arr_flat: np.ndarray) -> np.ndarray:
        out = _solve_screened(arr_flat.reshape(spec.shape), self.cfg.tau_tilde, spec.d, spec.n, spec.h)
        return out.reshape(-1)

    def prepare(self, spec: GridSpec, u: np.ndarray, order: int = 2) -> _SemiImplicitCtx:
        cfg = self.cfg
        value = self._solve(spec, u - cfg.c * double_well_prime(u))
        mdiag = 1.0 - cfg.c * double_well_second(u) if order >= 1 else None
        return _SemiImplicitCtx(spec, u, value, mdiag)

    def ensure_order(self, ctx: _SemiImplicitCtx, order: int) -> _SemiImplicitCtx:
        if order >= 1 and ctx.mdiag is None:
            ctx.mdiag = 1.0 - self.cfg.c * double_well_second(ctx.u)
        return ctx

    def apply(self, spec: GridSpec, u: np.ndarray) -> np.ndarray:
        return self.prepare(spec, u, order=0).value

    def jvp(self, ctx: _SemiImplicitCtx, p: np.ndarray) -> np.ndarray:
        return self._solve(ctx.spec, ctx.mdiag * p)

    def vjp(self, ctx: _SemiImplicitCtx, w: np.ndarray) -> np.ndarray:
        return ctx.mdiag * self._solve(ctx.spec, w)

    def second_adjoint(self, ctx: _SemiImplicitCtx, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        # D^2V(p, .) acts through the third derivative of the double well
        if ctx.sg is None:
            ctx.sg = self._solve(ctx.spec, g)
        psi3 = 13.5 * ctx.u
        return -self.cfg.c * psi3 * p * ctx.sg

    def residual_hessian_action(self, ctx, p: np.ndarray, g: np.ndarray, full: bool) -> np.ndarray:
        jp = self.jvp(ctx, p) - p
        out = self.vjp(ctx, jp) - jp
        if full:
            out += self.second_adjoint(ctx, p, g)
        return out

    def jacobian_symbol(self, ctx: _SemiImplicitCtx) -> np.ndarray:
        """Scalar-coefficient Fourier symbol of DV (preconditioning aid)."""
        spec = ctx.spec
        sym = _fd_laplacian_symbol(spec.d, spec.n, spec.h)
        return float(np.mean(ctx.mdiag)) / (1.0 - self.cfg.tau_tilde * sym)


class _ImplicitCtx:
    __slots__ = ("spec", "u", "value", "solve")

    def __init__(self, spec, u, value, solve):
        self.spec = spec
        self.u = u
        self.value = value
        self.solve = solve


class ImplicitMcfOperator:
    """Implicit-function-theorem wrapper of the fully implicit step.

    Derivatives require one screened linear solve per application; the
    second derivative is not available, so the outer Newton runs in
    Gauss-Newton form for this operator.
    """

    def __init__(self, cfg: AllenCahnStepConfig):
        self.cfg = cfg
        self.epsilon = cfg.eps
        self.tau_tilde = cfg.tau_tilde

    def _make_solve(self, spec: GridSpec, value: np.ndarray):
        cfg = self.cfg
        psi2 = double_well_second(value)
        sym = _fd_laplacian_symbol(spec.d, spec.n, spec.h)
        denom = 1.0 - cfg.tau_tilde * sym
        shape = spec.shape

        def precond(r):
            rh = np.fft.rfftn(r.reshape(shape))
            rh /= denom
            return np.fft.irfftn(rh, s=shape, axes=tuple(range(spec.d))).reshape(-1)

        def apply_a(p):
            lap = laplacian_fd(p.reshape(shape), spec.h).reshape(-1)
            return p + cfg.tau_tilde * (-lap + psi2 * p / (2.0 * cfg.eps**2))

        def solve(rhs):
            res = cg_solve(apply_a, rhs, rel_tol=cfg.cg_rel_tol, max_iter=cfg.cg_max_iter, precond=precond)
            return res.x

        return solve

    def prepare(self, spec: GridSpec, u: np.ndarray, order: int = 2) -> _ImplicitCtx:
        value = mcf_implicit_step(NodalField(spec, u), self.cfg).values
        solve = self._make_solve(spec, value) if order >= 1 else None
        return _ImplicitCtx(spec, u, value, solve)

    def ensure_order(self, ctx: _ImplicitCtx, order: int) -> _ImplicitCtx:
        if order >= 1 and ctx.solve is None:
            ctx.solve = self._make_solve(ctx.spec, ctx.value)
        return ctx

    def apply(self, spec: GridSpec, u: np.ndarray) -> np.ndarray:
        return self.prepare(spec, u, order=0).value

    def jvp(self, ctx: _ImplicitCtx, p: np.ndarray) -> np.ndarray:
        return ctx.solve(p)

    def vjp(self, ctx: _ImplicitCtx, w: np.ndarray) -> np.ndarray:
        return ctx.solve(w)

    def second_adjoint(self, ctx, p, g):
        return None

    def residual_hessian_action(self, ctx, p: np.ndarray, g: np.ndarray, full: bool) -> np.ndarray:
        jp = ctx.solve(p) - p
        return ctx.solve(jp) - jp

    def jacobian_symbol(self, ctx: _ImplicitCtx) -> np.ndarray:
        """Scalar-coefficient Fourier symbol of DV (preconditioning aid)."""
        spec = ctx.spec
        cfg = self.cfg
        sym = _fd_laplacian_symbol(spec.d, spec.n, spec.h)
        psi2_bar = float(np.mean(double_well_second(ctx.value)))
        return 1.0 / (1.0 + cfg.tau_tilde * (-sym + psi2_bar / (2.0 * cfg.eps**2)))
