"""Outer minimizing-movement scheme for Willmore flow.

One flow step minimizes, over the next field U,

    E[U_prev, U] = eps ||U - U_prev||^2 + (tau eps / tt^2) ||V[U] - U||^2

where ||.|| is the discrete (mean-weighted) L2 norm and V is a one-step
mean curvature operator with step tt.  The second term is 2 tau times the
Willmore proxy W[U] = eps/(2 tt^2) ||V[U] - U||^2, a difference quotient
of the Willmore energy, so each accepted step cannot increase W.

The minimization runs matrix-free Newton-CG with Armijo backtracking.
Any operator exposing the protocol below can serve as the inner step:

    epsilon, tau_tilde                    attributes
    prepare(spec, u, order) -> ctx        ctx.value = V[u]
    ensure_order(ctx, order) -> ctx       (optional; prepare again if absent)
    jvp(ctx, p), vjp(ctx, w)              first derivatives
    residual_hessian_action(ctx, p, g, full)
                                          (DV^T - I)(DV - I) p, plus the
                                          second-order term of V when full
                                          (operators without one ignore it)

The trained neural operator, the closed-form semi-implicit step, and the
implicit-function wrapper of the fully implicit step all implement it.

Restoration runs constrain the flow to a mask D of free nodes: the
gradient is zeroed and the Hessian acts as the identity outside D, so
frozen nodes are bit-identical across the whole flow.
"""

from __future__ import annotations

import hashlib
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import GridSpec, NodalField
from .newton import minimize_newton_cg

__all__ = [
    "WillmoreConfig",
    "StepDiagnostics",
    "FlowRecord",
    "FlowTrajectory",
    "outer_energy",
    "willmore_proxy",
    "outer_gradient",
    "outer_hvp",
    "newton_cg_step",
    "run_flow",
    "apply_mask_constraint",
    "mask_from_shape",
]


@dataclass
class WillmoreConfig:
    """Time steps, solver tolerances, and the optional restoration mask."""

    tau: float
    tau_tilde: float
    eps: float
    newton_grad_tol: float = 1e-8
    newton_max_iter: int = 50
    cg_rel_tol: float = 1e-6
    cg_max_iter: int = 500
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    armijo_max_backtracks: int = 30
    hessian_mode: str = "full"  # "full" | "gauss-newton"
    precond: str = "none"  # "none" | "jacobi" | "spectral"
    mask: NodalField | None = None

    def __post_init__(self):
        if not (self.tau > 0 and self.tau_tilde > 0 and self.eps > 0):
            raise ValueError("tau, tau_tilde and eps must be positive")
        if not (self.newton_grad_tol > 0 and self.cg_rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.hessian_mode not in ("full", "gauss-newton"):
            raise ValueError(f"unknown hessian_mode {self.hessian_mode!r}")
        if self.precond not in ("none", "jacobi", "spectral"):
            raise ValueError(f"unknown precond {self.precond!r}")
        if self.mask is not None:
            vals = self.mask.values
            if not np.all((vals == 0.0) | (vals == 1.0)):
                raise ValueError("mask must be a boolean (0/1) field")

    def mask_array(self, spec: GridSpec) -> np.ndarray | None:
        if self.mask is None:
            return None
        if self.mask.spec != spec:
            raise ValueError("mask grid does not match the field grid")
        return self.mask.values.astype(bool)

    def with_mask(self, mask: NodalField | None) -> "WillmoreConfig":
        return replace(self, mask=mask)


def _check_operator(op, cfg: WillmoreConfig):
    if abs(op.tau_tilde - cfg.tau_tilde) > 1e-15 * cfg.tau_tilde:
        warnings.warn(
            f"operator inner step {op.tau_tilde:g} differs from configured tau_tilde "
            f"{cfg.tau_tilde:g}",
            stacklevel=3,
        )
    if abs(op.epsilon - cfg.eps) > 1e-15 * cfg.eps:
        warnings.warn(
            f"operator interface width {op.epsilon:g} differs from configured eps {cfg.eps:g}",
            stacklevel=3,
        )


class _OuterProblem:
    """Newton problem for one minimizing-movement step from u_prev."""

    class State:
        __slots__ = ("u", "ctx", "resid", "order")

        def __init__(self, u, ctx, resid, order):
            self.u = u
            self.ctx = ctx
            self.resid = resid
            self.order = order

    def __init__(self, spec: GridSpec, u_prev: np.ndarray, op, cfg: WillmoreConfig):
        self.spec = spec
        self.u_prev = u_prev
        self.op = op
        self.cfg = cfg
        self.w = 1.0 / spec.num_nodes
        self.c_dist = cfg.eps * self.w
        self.c_prox = cfg.tau * cfg.eps / cfg.tau_tilde**2 * self.w
        self.full = cfg.hessian_mode == "full"
        self.mask = cfg.mask_array(spec)
        self.grad_scale = 2.0 * self.c_dist
        self.precond = None
        if cfg.precond == "jacobi":
            scale = 1.0 / self.grad_scale
            self.precond = lambda r: scale * r
        elif cfg.precond == "spectral" and not hasattr(op, "jacobian_symbol"):
            raise ValueError("spectral preconditioning needs an operator with jacobian_symbol")

    def _build_spectral_precond(self, ctx):
        """Invert the scalar-symbol approximation of the Hessian.

        With J = DV - I approximated by its Fourier symbol s(xi) - 1, the
        Hessian is close to 2 c_dist + 2 c_prox |s - 1|^2 per mode, which
        is cheap to invert exactly and positive definite.
        """
        sym = self.op.jacobian_symbol(ctx)
        mhat = 2.0 * self.c_dist + 2.0 * self.c_prox * np.abs(sym - 1.0) ** 2
        shape = self.spec.shape
        axes = tuple(range(self.spec.d))

        def precond(r):
            rh = np.fft.rfftn(r.reshape(shape))
            rh /= mhat
            return np.fft.irfftn(rh, s=shape, axes=axes).reshape(-1)

        return precond

    def state(self, u: np.ndarray, order: int = 2):
        op_order = min(order, 2) if self.full else min(order, 1)
        ctx = self.op.prepare(self.spec, u, order=op_order)
        if self.cfg.precond == "spectral" and self.precond is None and op_order >= 1:
            self.precond = self._build_spectral_precond(ctx)
        return self.State(u, ctx, ctx.value - u, op_order)

    def ensure_order(self, st, order: int):
        need = min(order, 2) if self.full else min(order, 1)
        if st.order >= need:
            return st
        if hasattr(self.op, "ensure_order"):
            st.ctx = self.op.ensure_order(st.ctx, need)
        else:
            st.ctx = self.op.prepare(self.spec, st.u, order=need)
        st.resid = st.ctx.value - st.u
        st.order = need
        return st

    def energy(self, st) -> float:
        diff = st.u - self.u_prev
        return self.c_dist * float(np.dot(diff, diff)) + self.c_prox * float(np.dot(st.resid, st.resid))

    def proxy(self, st) -> float:
        """W[u] = eps/(2 tt^2) ||V[u] - u||^2 from the cached residual."""
        return (
            self.cfg.eps
            / (2.0 * self.cfg.tau_tilde**2)
            * self.w
            * float(np.dot(st.resid, st.resid))
        )

    def gradient(self, st) -> np.ndarray:
        g = 2.0 * self.c_dist * (st.u - self.u_prev) + 2.0 * self.c_prox * (
            self.op.vjp(st.ctx, st.resid) - st.resid
        )
        if self.mask is not None:
            g[~self.mask] = 0.0
        return g

    def hessian_action(self, st, p: np.ndarray) -> np.ndarray:
        if self.mask is not None:
            p_in = np.where(self.mask, p, 0.0)
        else:
            p_in = p
        core = self.op.residual_hessian_action(st.ctx, p_in, st.resid, self.full)
        out = 2.0 * self.c_dist * p_in + 2.0 * self.c_prox * core
        if self.mask is not None:
            out[~self.mask] = p[~self.mask]
        return out


def outer_energy(U_prev: NodalField, U: NodalField, op, cfg: WillmoreConfig) -> float:
    """E[U_prev, U] = eps ||U - U_prev||^2 + tau eps/tt^2 ||V[U] - U||^2."""
    if U_prev.spec != U.spec:
        raise ValueError("fields live on different grids")
    _check_operator(op, cfg)
    prob = _OuterProblem(U.spec, U_prev.values, op, cfg)
    return prob.energy(prob.state(U.values, order=0))


def willmore_proxy(U: NodalField, op, cfg: WillmoreConfig) -> float:
    """Difference-quotient Willmore value eps/(2 tt^2) ||V[U] - U||^2."""
    _check_operator(op, cfg)
    prob = _OuterProblem(U.spec, U.values, op, cfg)
    return prob.proxy(prob.state(U.values, order=0))


def outer_gradient(U_prev: NodalField, U: NodalField, op, cfg: WillmoreConfig) -> NodalField:
    """Exact gradient of outer_energy in U (zero outside the mask)."""
    if U_prev.spec != U.spec:
        raise ValueError("fields live on different grids")
    _check_operator(op, cfg)
    prob = _OuterProblem(U.spec, U_prev.values, op, cfg)
    return NodalField(U.spec, prob.gradient(prob.state(U.values, order=1)))


def outer_hvp(U_prev: NodalField, U: NodalField, P: NodalField, op, cfg: WillmoreConfig) -> NodalField:
    """Hessian-vector product of outer_energy; masked rows/columns are identity."""
    if U_prev.spec != U.spec or P.spec != U.spec:
        raise ValueError("fields live on different grids")
    _check_operator(op, cfg)
    prob = _OuterProblem(U.spec, U_prev.values, op, cfg)
    return NodalField(U.spec, prob.hessian_action(prob.state(U.values), P.values))


@dataclass
class StepDiagnostics:
    step: int
    energy: float
    proxy: float
    grad_norm: float
    newton_iterations: int
    cg_iterations: int
    converged: bool
    line_search_failed: bool
    energy_start: float
    armijo_ok: bool
    wall_time: float


@dataclass
class FlowRecord:
    step: int
    checksum: str
    field: NodalField | None
    diagnostics: StepDiagnostics


@dataclass
class FlowTrajectory:
    spec: GridSpec
    records: list[FlowRecord] = field(default_factory=list)

    @property
    def final_field(self) -> NodalField | None:
        return self.records[-1].field if self.records else None

    def proxies(self) -> np.ndarray:
        return np.array([r.diagnostics.proxy for r in self.records])

    def energies(self) -> np.ndarray:
        return np.array([r.diagnostics.energy for r in self.records])


def _checksum(values: np.ndarray) -> str:
    return hashlib.sha256(values.tobytes()).hexdigest()


def newton_cg_step(U_prev: NodalField, op, cfg: WillmoreConfig) -> tuple[NodalField, StepDiagnostics]:
    """One outer step: minimize E[U_prev, .] starting from U_prev.

    The returned field satisfies E[U_prev, out] <= E[U_prev, U_prev]; a
    failed line search returns the best iterate with the flag set.
    """
    _check_operator(op, cfg)
    t0 = time.perf_counter()
    spec = U_prev.spec
    prob = _OuterProblem(spec, U_prev.values, op, cfg)

    res = minimize_newton_cg(
        prob,
        U_prev.values,
        grad_tol=cfg.newton_grad_tol,
        max_iter=cfg.newton_max_iter,
        cg_rel_tol=cfg.cg_rel_tol,
        cg_max_iter=cfg.cg_max_iter,
        armijo_c1=cfg.armijo_c1,
        armijo_shrink=cfg.armijo_shrink,
        armijo_max_backtracks=cfg.armijo_max_backtracks,
        order=2 if cfg.hessian_mode == "full" else 1,
    )
    out = NodalField(spec, res.u)
    diag = StepDiagnostics(
        step=-1,
        energy=res.energy,
        proxy=prob.proxy(res.final_state),
        grad_norm=res.grad_norm,
        newton_iterations=res.iterations,
        cg_iterations=res.cg_iterations,
        converged=res.converged,
        line_search_failed=res.line_search_failed,
        energy_start=res.initial_energy,
        armijo_ok=all(s.armijo_ok for s in res.steps),
        wall_time=time.perf_counter() - t0,
    )
    return out, diag


def run_flow(
    U0: NodalField,
    steps: int,
    op,
    cfg: WillmoreConfig,
    sink=None,
    store_fields: bool = True,
) -> FlowTrajectory:
    """Iterate newton_cg_step; records diagnostics (and fields) per step.

    `sink(step_index, field, diagnostics)` is invoked for the initial state
    and after every accepted step.  Failed steps raise RuntimeError with
    the step index; the flow is deterministic given inputs and config.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    spec = U0.spec
    traj = FlowTrajectory(spec)
    prob = _OuterProblem(spec, U0.values, op, cfg)
    st0 = prob.state(U0.values, order=0)
    diag0 = StepDiagnostics(
        step=0,
        energy=prob.energy(st0),
        proxy=prob.proxy(st0),
        grad_norm=np.nan,
        newton_iterations=0,
        cg_iterations=0,
        converged=True,
        line_search_failed=False,
        energy_start=prob.energy(st0),
        armijo_ok=True,
        wall_time=0.0,
    )
    traj.records.append(FlowRecord(0, _checksum(U0.values), U0 if store_fields else None, diag0))
    if sink is not None:
        sink(0, U0, diag0)

    u = U0
    for k in range(1, steps + 1):
        u_next, diag = newton_cg_step(u, op, cfg)
        diag.step = k
        if diag.line_search_failed and diag.newton_iterations == 0:
            raise RuntimeError(f"flow step {k}: line search failed without progress")
        traj.records.append(
            FlowRecord(k, _checksum(u_next.values), u_next if store_fields else None, diag)
        )
        if sink is not None:
            sink(k, u_next, diag)
        u = u_next
    return traj


def apply_mask_constraint(update: NodalField, previous: NodalField, mask: NodalField) -> NodalField:
    """Merge an update with a previous iterate: nodes outside the mask are
    copied bit-exactly from `previous`, nodes inside take the update."""
    if update.spec != previous.spec or mask.spec != update.spec:
        raise ValueError("fields live on different grids")
    m = mask.values.astype(bool)
    return NodalField(update.spec, np.where(m, update.values, previous.values))


def mask_from_shape(spec: GridSpec, shape) -> NodalField:
    """Boolean field marking nodes strictly inside a shape as free DOFs."""
    sd = shape.sdf(spec.node_coords())
    return NodalField.from_grid(spec, (sd < 0.0).astype(np.float64))
