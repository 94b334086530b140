"""Matrix-free Newton with Armijo backtracking and conjugate gradients.

Shared by the outer minimizing-movement solver and the fully implicit
inner mean curvature step.  A problem object provides states (cached
per-iterate quantities), energy, gradient, and Hessian-vector products:

    state(u, order)        build iterate cache; order 0 = energy only,
                           1 = first derivatives, 2 = second derivatives
    ensure_order(st, k)    upgrade a cached state in place
    energy(st) -> float
    gradient(st) -> array
    hessian_action(st, p) -> array
    grad_scale -> float    gradient normalization (tolerances are tested
                           on ||grad|| / grad_scale, an O(1) quantity)
    precond                optional callable r -> M^-1 r for CG

The CG loop is the truncated variant: on encountering non-positive
curvature it returns the steepest descent direction (first iteration) or
the partial solution accumulated so far.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

__all__ = ["CgResult", "cg_solve", "NewtonStepRecord", "NewtonResult", "minimize_newton_cg"]


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    converged: bool
    negative_curvature: bool = False


def cg_solve(apply_h, b: np.ndarray, *, rel_tol: float, max_iter: int, precond=None) -> CgResult:
    """Solve H x = b for symmetric positive (semi)definite H, matrix-free."""
    b_norm = float(np.sqrt(np.dot(b, b)))
    x = np.zeros_like(b)
    if b_norm == 0.0:
        return CgResult(x, 0, True)
    tol = rel_tol * b_norm
    r = b.copy()
    y = precond(r) if precond is not None else r
    p = y.copy()
    rz = float(np.dot(r, y))
    for j in range(max_iter):
        hp = apply_h(p)
        php = float(np.dot(p, hp))
        if php <= 0.0:
            # Truncated exit on indefiniteness: fall back to the steepest
            # descent direction if no progress has been made yet.
            if j == 0:
                return CgResult(b.copy(), 1, False, negative_curvature=True)
            return CgResult(x, j, False, negative_curvature=True)
        alpha = rz / php
        x += alpha * p
        r -= alpha * hp
        r_norm = float(np.sqrt(np.dot(r, r)))
        if r_norm <= tol:
            return CgResult(x, j + 1, True)
        y = precond(r) if precond is not None else r
        rz_new = float(np.dot(r, y))
        p = y + (rz_new / rz) * p
        rz = rz_new
    return CgResult(x, max_iter, False)


@dataclass
class NewtonStepRecord:
    iteration: int
    energy_before: float
    energy_after: float
    grad_norm: float
    cg_iterations: int
    backtracks: int
    step_size: float
    slope: float
    armijo_ok: bool
    negative_curvature: bool


@dataclass
class NewtonResult:
    u: np.ndarray
    energy: float
    grad_norm: float
    iterations: int
    cg_iterations: int
    converged: bool
    line_search_failed: bool
    steps: list[NewtonStepRecord] = field(default_factory=list)
    wall_time: float = 0.0
    initial_energy: float = np.nan
    final_state: object = None


def minimize_newton_cg(
    problem,
    u0: np.ndarray,
    *,
    grad_tol: float,
    max_iter: int,
    cg_rel_tol: float,
    cg_max_iter: int,
    armijo_c1: float = 1e-4,
    armijo_shrink: float = 0.5,
    armijo_max_backtracks: int = 30,
    order: int = 2,
) -> NewtonResult:
    """Minimize problem's energy starting from u0.

    Every accepted step satisfies the Armijo inequality
    E(u + t p) <= E(u) + c1 t <grad, p>, so the energy never increases.
    Termination: normalized gradient norm <= grad_tol, the iteration
    budget, or a failed line search (the best iterate is returned with
    line_search_failed set).
    """
    t_start = time.perf_counter()
    scale = problem.grad_scale

    u = np.array(u0, dtype=np.float64, copy=True)
    st = problem.state(u, order=order)
    energy = problem.energy(st)
    initial_energy = energy
    steps: list[NewtonStepRecord] = []
    cg_total = 0
    converged = False
    ls_failed = False
    grad_norm = np.inf

    for it in range(1, max_iter + 1):
        g = problem.gradient(st)
        grad_norm = float(np.sqrt(np.mean(g * g))) / scale
        if grad_norm <= grad_tol:
            converged = True
            break

        cg = cg_solve(
            lambda p: problem.hessian_action(st, p),
            -g,
            rel_tol=cg_rel_tol,
            max_iter=cg_max_iter,
            precond=getattr(problem, "precond", None),
        )
        cg_total += cg.iterations
        p = cg.x
        slope = float(np.dot(g, p))
        if slope >= 0.0:
            p = -g
            slope = -float(np.dot(g, g))

        t = 1.0
        accepted = False
        backtracks = 0
        e_trial = energy
        st_trial = None
        for backtracks in range(armijo_max_backtracks + 1):
            u_trial = u + t * p
            st_trial = problem.state(u_trial, order=0)
            e_trial = problem.energy(st_trial)
            if e_trial <= energy + armijo_c1 * t * slope:
                accepted = True
                break
            t *= armijo_shrink
        if not accepted:
            ls_failed = True
            break

        steps.append(
            NewtonStepRecord(
                iteration=it,
                energy_before=energy,
                energy_after=e_trial,
                grad_norm=grad_norm,
                cg_iterations=cg.iterations,
                backtracks=backtracks,
                step_size=t,
                slope=slope,
                armijo_ok=True,
                negative_curvature=cg.negative_curvature,
            )
        )
        u = u_trial
        st = problem.ensure_order(st_trial, order)
        energy = e_trial
    else:
        # budget exhausted: report the gradient norm at the final iterate
        g = problem.gradient(st)
        grad_norm = float(np.sqrt(np.mean(g * g))) / scale
        converged = grad_norm <= grad_tol

    return NewtonResult(
        u=u,
        energy=energy,
        grad_norm=grad_norm,
        iterations=len(steps),
        cg_iterations=cg_total,
        converged=converged,
        line_search_failed=ls_failed,
        steps=steps,
        wall_time=time.perf_counter() - t_start,
        initial_energy=initial_energy,
        final_state=st,
    )
