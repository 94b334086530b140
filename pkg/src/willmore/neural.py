"""Learned one-step mean curvature flow operator.

The operator is a single compact periodic convolution followed by a scalar
multilayer perceptron applied pointwise,

    V[U] = F(K * U),

with hidden activation rho(s) = exp(-s^2) and a linear output layer.  It is
trained on the closed-form evolution of spheres: the loss is the mean
squared discrete L2 distance between V[U_r] and the profile of the shrunk
sphere U_{R(r, tau)}, minimized with Adam over mini-batches of radii.

Derivatives of the operator (needed by the outer Newton solver) are exact
forward-mode chains through the scalar network; gradients of the training
loss are exact reverse-mode chains, with the kernel gradient assembled by
FFT correlation.
"""

from __future__ import annotations

import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import (
    SPECTRAL_WIDTH_THRESHOLD,
    GridSpec,
    NodalField,
    StencilKernel,
    correlate_direct,
    embed_kernel,
)
from .reference import ConvergenceError, circle_radius_mcf
from .phase_field import sphere_phase_field

__all__ = [
    "DEFAULT_LAYER_SIZES",
    "MlpParams",
    "mlp_forward",
    "mlp_derivative",
    "mlp_second_derivative",
    "NeuralMcfOperator",
    "apply_operator",
    "operator_jvp",
    "operator_vjp",
    "training_loss",
    "TrainingConfig",
    "TrainingError",
    "TrainingResult",
    "train_operator",
    "train_operator_with_history",
    "train_progressive",
    "train_progressive_with_history",
    "save_checkpoint",
    "load_checkpoint",
]

DEFAULT_LAYER_SIZES = (32, 16, 8, 4, 2, 1)

CHECKPOINT_MAGIC = b"WNET"
CHECKPOINT_VERSION = 1


class TrainingError(ConvergenceError):
    """Training ended without reaching the requested loss target."""

    def __init__(self, message: str, final_loss: float):
        super().__init__(message)
        self.final_loss = final_loss


@dataclass
class MlpParams:
    """Weights and biases of the scalar network, first layer has fan-in 1."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, nonempty weight/bias lists")
        prev = 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64).reshape(-1)
            if w.ndim != 2 or w.shape[1] != prev or w.shape[0] != b.size:
                raise ValueError(f"layer {i + 1}: weight shape {w.shape} incompatible")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")
            self.weights[i] = w
            self.biases[i] = b
            prev = w.shape[0]
        if self.weights[-1].shape[0] != 1:
            raise ValueError("final layer must have a single output")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def zeros(cls, layer_sizes=DEFAULT_LAYER_SIZES) -> "MlpParams":
        sizes = (1,) + tuple(layer_sizes)
        return cls(
            [np.zeros((sizes[i + 1], sizes[i])) for i in range(len(layer_sizes))],
            [np.zeros(s) for s in layer_sizes],
        )

    @classmethod
    def random(cls, rng: np.random.Generator, layer_sizes=DEFAULT_LAYER_SIZES) -> "MlpParams":
        """Normal init with std 1/sqrt(fan_in), keeping preactivations O(1)."""
        sizes = (1,) + tuple(layer_sizes)
        ws, bs = [], []
        for i, out_size in enumerate(layer_sizes):
            std = 1.0 / np.sqrt(sizes[i])
            ws.append(rng.normal(0.0, std, size=(out_size, sizes[i])))
            bs.append(rng.normal(0.0, std, size=out_size))
        return cls(ws, bs)


def _as_batch(s):
    arr = np.asarray(s, dtype=np.float64)
    return arr, arr.reshape(1, -1)


def mlp_forward(mlp: MlpParams, s):
    """F(s): layer recursion with rho on hidden layers, linear output."""
    arr, a = _as_batch(s)
    last = mlp.num_layers - 1
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = w @ a + b[:, None]
        a = np.exp(-(z * z)) if l < last else z
    out = a[0]
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def mlp_with_derivatives(mlp: MlpParams, s, order: int = 2):
    """Forward-mode evaluation of (F, F', F'') along the scalar chain.

    Uses rho'(z) = -2 z exp(-z^2) and rho''(z) = (4 z^2 - 2) exp(-z^2).
    Returns arrays shaped like s; entries beyond `order` are None.
    """
    arr, a = _as_batch(s)
    da = np.ones_like(a)
    dda = np.zeros_like(a) if order >= 2 else None
    last = mlp.num_layers - 1
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = w @ a + b[:, None]
        dz = w @ da
        ddz = w @ dda if order >= 2 else None
        if l < last:
            e = np.exp(-(z * z))
            rp = -2.0 * z * e
            a = e
            if order >= 2:
                rpp = (4.0 * z * z - 2.0) * e
                dda = rpp * dz * dz + rp * ddz
            da = rp * dz
        else:
            a, da, dda = z, dz, ddz
    shape = arr.shape

    def _fin(x):
        return None if x is None else x[0].reshape(shape)

    return _fin(a), _fin(da), _fin(dda)


def mlp_derivative(mlp: MlpParams, s):
    """dF/ds, exact."""
    _, d1, _ = mlp_with_derivatives(mlp, s, order=1)
    out = d1
    return float(out.reshape(-1)[0]) if np.asarray(s).ndim == 0 else out


def mlp_second_derivative(mlp: MlpParams, s):
    """d^2F/ds^2, exact."""
    _, _, d2 = mlp_with_derivatives(mlp, s, order=2)
    return float(d2.reshape(-1)[0]) if np.asarray(s).ndim == 0 else d2


# ---------------------------------------------------------------------------
# The operator.


class _NeuralCtx:
    __slots__ = ("spec", "u", "s", "value", "fp", "fpp", "order")

    def __init__(self, spec, u, s, value, fp, fpp, order):
        self.spec = spec
        self.u = u
        self.s = s
        self.value = value
        self.fp = fp
        self.fpp = fpp
        self.order = order


@dataclass
class NeuralMcfOperator:
    """Trained pair (kernel, network) with the regime it was trained for."""

    kernel: StencilKernel
    mlp: MlpParams
    tau_tilde: float
    epsilon: float
    trained_grid: GridSpec | None = None
    _khat: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.tau_tilde > 0:
            raise ValueError("tau_tilde must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def spectral(self) -> bool:
        return self.kernel.n_K > SPECTRAL_WIDTH_THRESHOLD

    def check_grid(self, spec: GridSpec):
        if spec.d != self.kernel.d:
            raise ValueError(f"operator is {self.kernel.d}D, field is {spec.d}D")
        if self.kernel.n_K > spec.n:
            raise ValueError(f"kernel width {self.kernel.n_K} exceeds grid size {spec.n}")
        tg = self.trained_grid
        if tg is not None and (tg.d != spec.d or abs(tg.h - spec.h) > 1e-12 * tg.h):
            warnings.warn(
                f"operator was trained at h={tg.h:g} (d={tg.d}) but is applied at "
                f"h={spec.h:g} (d={spec.d}); accuracy is not covered by training",
                stacklevel=3,
            )

    def _khat_for(self, spec: GridSpec) -> np.ndarray:
        key = spec.n
        if key not in self._khat:
            self._khat[key] = np.fft.rfftn(embed_kernel(self.kernel, spec.n))
        return self._khat[key]

    def conv(self, spec: GridSpec, arr: np.ndarray) -> np.ndarray:
        """K * u on flat arrays."""
        grid_arr = arr.reshape(spec.shape)
        if self.spectral:
            uhat = np.fft.rfftn(grid_arr)
            uhat *= np.conj(self._khat_for(spec))
            out = np.fft.irfftn(uhat, s=spec.shape, axes=tuple(range(spec.d)))
        else:
            out = correlate_direct(self.kernel.as_grid(), grid_arr)
        return out.reshape(-1)

    def conv_adjoint(self, spec: GridSpec, arr: np.ndarray) -> np.ndarray:
        """Transpose of conv (kernel offsets negated)."""
        grid_arr = arr.reshape(spec.shape)
        if self.spectral:
            uhat = np.fft.rfftn(grid_arr)
            uhat *= self._khat_for(spec)
            out = np.fft.irfftn(uhat, s=spec.shape, axes=tuple(range(spec.d)))
        else:
            out = correlate_direct(self.kernel.reversed().as_grid(), grid_arr)
        return out.reshape(-1)

    # solver-facing protocol --------------------------------------------------

    def prepare(self, spec: GridSpec, u: np.ndarray, order: int = 2) -> _NeuralCtx:
        self.check_grid(spec)
        s = self.conv(spec, u)
        if order == 0:
            value = mlp_forward(self.mlp, s)
            fp = fpp = None
        else:
            value, fp, fpp = mlp_with_derivatives(self.mlp, s, order=order)
        return _NeuralCtx(spec, u, s, value, fp, fpp, order)

    def ensure_order(self, ctx: _NeuralCtx, order: int) -> _NeuralCtx:
        if ctx.order >= order:
            return ctx
        value, fp, fpp = mlp_with_derivatives(self.mlp, ctx.s, order=order)
        ctx.value, ctx.fp, ctx.fpp, ctx.order = value, fp, fpp, order
        return ctx

    def apply(self, spec: GridSpec, u: np.ndarray) -> np.ndarray:
        return self.prepare(spec, u, order=0).value

    def jvp(self, ctx: _NeuralCtx, p: np.ndarray) -> np.ndarray:
        return ctx.fp * self.conv(ctx.spec, p)

    def vjp(self, ctx: _NeuralCtx, w: np.ndarray) -> np.ndarray:
        return self.conv_adjoint(ctx.spec, ctx.fp * w)

    def second_adjoint(self, ctx: _NeuralCtx, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        return self.conv_adjoint(ctx.spec, ctx.fpp * self.conv(ctx.spec, p) * g)

    def residual_hessian_action(self, ctx: _NeuralCtx, p: np.ndarray, g: np.ndarray, full: bool) -> np.ndarray:
        """(DV^T - I)(DV - I) p, plus the curvature term of V when full."""
        kp = self.conv(ctx.spec, p)
        jp = ctx.fp * kp - p
        inner = ctx.fp * jp
        if full:
            inner = inner + ctx.fpp * kp * g
        return self.conv_adjoint(ctx.spec, inner) - jp

    def jacobian_symbol(self, ctx: _NeuralCtx) -> np.ndarray:
        """Scalar-coefficient Fourier symbol of DV (preconditioning aid)."""
        fbar = float(np.mean(ctx.fp))
        return fbar * np.conj(self._khat_for(ctx.spec))


def apply_operator(op: NeuralMcfOperator, U: NodalField) -> NodalField:
    """V[U] = F(K * U), evaluated pointwise."""
    return NodalField(U.spec, op.apply(U.spec, U.values))


def operator_jvp(op: NeuralMcfOperator, U: NodalField, P: NodalField) -> NodalField:
    """Directional derivative DV[U] P = F'(K*U) . (K*P)."""
    if U.spec != P.spec:
        raise ValueError("fields live on different grids")
    ctx = op.prepare(U.spec, U.values, order=1)
    return NodalField(U.spec, op.jvp(ctx, P.values))


def operator_vjp(op: NeuralMcfOperator, U: NodalField, W: NodalField) -> NodalField:
    """Adjoint derivative DV[U]^T W = adj(K) * (F'(K*U) . W)."""
    if U.spec != W.spec:
        raise ValueError("fields live on different grids")
    ctx = op.prepare(U.spec, U.values, order=1)
    return NodalField(U.spec, op.vjp(ctx, W.values))


def _sphere_pair(grid: GridSpec, r: float, eps: float, tau_tilde: float):
    center = tuple(o + 0.5 * grid.edge_length for o in grid.origin)
    target_r = circle_radius_mcf(r, tau_tilde, grid.d)
    if target_r <= 0:
        raise ValueError(f"radius {r} shrinks to zero within tau_tilde={tau_tilde}")
    u = sphere_phase_field(grid, r, center, eps)
    tgt = sphere_phase_field(grid, target_r, center, eps)
    return u, tgt


def training_loss(op: NeuralMcfOperator, radii, grid: GridSpec, eps: float) -> float:
    """Mean squared discrete L2 distance of one-step predictions on spheres."""
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    total = 0.0
    for r in radii:
        u, tgt = _sphere_pair(grid, float(r), eps, op.tau_tilde)
        resid = op.apply(grid, u.values) - tgt.values
        total += float(np.dot(resid, resid)) / grid.num_nodes
    return total / radii.size


# ---------------------------------------------------------------------------
# Training.


@dataclass
class TrainingConfig:
    """Hyperparameters of the sphere-evolution training procedure."""

    m: int = 100
    r_min: float = 0.05
    r_max: float = 0.4
    batch_size: int = 10
    learning_rate: float | tuple | list = 1e-3  # scalar, or one value per rung
    lr_decay: float = 1.0
    lr_decay_every: int = 0  # 0 disables the schedule
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    iterations: int | tuple | list = 20000  # scalar, or one value per rung
    seed: int = 0
    loss_target: float | tuple | list | None = None
    holdout_count: int = 16
    holdout_every: int = 200
    layer_sizes: tuple[int, ...] = DEFAULT_LAYER_SIZES
    resolutions: tuple[int, ...] | None = None
    kernel_widths: tuple[int, ...] | None = None

    def __post_init__(self):
        if not (0 < self.r_min < self.r_max):
            raise ValueError("need 0 < r_min < r_max")
        if not (1 <= self.batch_size <= self.m):
            raise ValueError("need 1 <= batch_size <= m")
        for it in np.atleast_1d(np.asarray(self.iterations)):
            if int(it) < 0:
                raise ValueError("iterations must be nonnegative")
        for lr in np.atleast_1d(np.asarray(self.learning_rate, dtype=float)):
            if lr < 0:
                raise ValueError("learning_rate must be nonnegative")
        if not (0 < self.lr_decay <= 1.0) or self.lr_decay_every < 0:
            raise ValueError("need 0 < lr_decay <= 1 and lr_decay_every >= 0")
        if self.holdout_count < 1 or self.holdout_every < 1:
            raise ValueError("holdout settings must be positive")

    @staticmethod
    def _pick(value, rung: int):
        if isinstance(value, (tuple, list)):
            return value[rung]
        return value

    def for_rung(self, rung: int) -> "TrainingConfig":
        """Resolve per-rung sequences to the scalars of one ladder rung."""
        from dataclasses import replace

        target = self.loss_target
        if isinstance(target, (tuple, list)):
            target = target[rung]
        return replace(
            self,
            learning_rate=float(self._pick(self.learning_rate, rung)),
            iterations=int(self._pick(self.iterations, rung)),
            loss_target=target,
        )

    def lr_at(self, iteration: int) -> float:
        """Piecewise-constant step size: decays by lr_decay every lr_decay_every."""
        if self.lr_decay_every <= 0 or self.lr_decay == 1.0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** (iteration // self.lr_decay_every)


@dataclass
class TrainingResult:
    operator: NeuralMcfOperator
    iterations_run: int
    minibatch_losses: np.ndarray
    holdout_history: list[tuple[int, float]]
    final_holdout_loss: float
    reached_target: bool
    elapsed: float


class _Trainer:
    """Adam on (kernel, theta); per-sample processing with reused buffers."""

    def __init__(self, cfg: TrainingConfig, grid: GridSpec, eps: float, tau_tilde: float, n_K: int, rng):
        if grid.d not in (2, 3):
            raise ValueError("training requires a 2D or 3D grid")
        if n_K % 2 == 0 or n_K > grid.n:
            raise ValueError(f"kernel width {n_K} invalid for n={grid.n}")
        half = 0.5 * grid.edge_length
        if cfg.r_max >= half:
            raise ValueError(f"r_max={cfg.r_max} does not fit inside the domain (half extent {half})")
        if cfg.r_max + 3.0 * eps > half:
            warnings.warn("largest training sphere comes within 3 eps of the periodic seam", stacklevel=3)
        self.cfg = cfg
        self.grid = grid
        self.eps = eps
        self.tau_tilde = tau_tilde
        self.n_K = n_K
        self.shape = grid.shape
        self.B = grid.num_nodes
        self.w = 1.0 / self.B

        self.radii = rng.uniform(cfg.r_min, cfg.r_max, cfg.m)
        self.fields, self.field_hats, self.targets = self._build_samples(self.radii)
        hold = np.linspace(cfg.r_min, cfg.r_max, cfg.holdout_count)
        self.holdout_fields, self.holdout_hats, self.holdout_targets = self._build_samples(hold)

        rad = (n_K - 1) // 2
        self.stencil_ix = np.ix_(*[(np.arange(-rad, rad + 1) % grid.n) for _ in range(grid.d)])

        # workspace: per-layer preactivations, activations, and backprop deltas
        sizes = cfg.layer_sizes
        self.z = [np.empty((s, self.B)) for s in sizes]
        self.a = [np.empty((s, self.B)) for s in sizes[:-1]] + [None]
        self.a[-1] = self.z[-1]  # linear output layer
        self.delta = [np.empty((s, self.B)) for s in sizes]
        self.resid = np.empty(self.B)
        self.ds_row = np.empty((1, self.B))
        self.khat_buf = None
        self.gk_full = np.empty(self.shape)

    def _build_samples(self, radii):
        fields, hats, targets = [], [], []
        for r in radii:
            u, tgt = _sphere_pair(self.grid, float(r), self.eps, self.tau_tilde)
            uu = u.values.copy()
            fields.append(uu)
            hats.append(np.fft.rfftn(uu.reshape(self.shape)))
            targets.append(tgt.values.copy())
        return fields, hats, targets

    def _conv_from_hat(self, uhat, khat_conj):
        prod = uhat * khat_conj
        return np.fft.irfftn(prod, s=self.shape, axes=tuple(range(self.grid.d))).reshape(-1)

    def _forward(self, s_flat, ws, bs):
        """Forward pass into the workspace; returns the output row (view)."""
        a_prev = s_flat.reshape(1, -1)
        last = len(ws) - 1
        for l, (wgt, bias) in enumerate(zip(ws, bs)):
            z = self.z[l]
            np.dot(wgt, a_prev, out=z)
            z += bias[:, None]
            if l < last:
                a = self.a[l]
                np.multiply(z, z, out=a)
                np.negative(a, out=a)
                np.exp(a, out=a)
                a_prev = a
            else:
                a_prev = z
        return a_prev[0]

    def _backward(self, s_flat, ws, g_ws, g_bs):
        """Reverse pass from delta[-1]; accumulates grads, returns ds row."""
        last = len(ws) - 1
        for l in range(last, -1, -1):
            a_prev = s_flat.reshape(1, -1) if l == 0 else self.a[l - 1]
            g_ws[l] += np.dot(self.delta[l], a_prev.T)
            g_bs[l] += self.delta[l].sum(axis=1)
            if l > 0:
                d_lower = self.delta[l - 1]
                np.dot(ws[l].T, self.delta[l], out=d_lower)
                # rho'(z) = -2 z exp(-z^2) = -2 * z * a
                d_lower *= self.z[l - 1]
                d_lower *= self.a[l - 1]
                d_lower *= -2.0
            else:
                np.dot(ws[l].T, self.delta[l], out=self.ds_row)
        return self.ds_row[0]

    def minibatch_step(self, idx, kernel_grid, ws, bs, g_kernel, g_ws, g_bs):
        """Loss and gradients for one mini-batch of sample indices."""
        khat = np.fft.rfftn(embed_kernel_grid(kernel_grid, self.grid.n))
        khat_conj = np.conj(khat)
        for g in g_ws:
            g[:] = 0.0
        for g in g_bs:
            g[:] = 0.0
        self.gk_full[:] = 0.0
        loss = 0.0
        coef = 2.0 * self.w / len(idx)
        for i in idx:
            s = self._conv_from_hat(self.field_hats[i], khat_conj)
            out = self._forward(s, ws, bs)
            np.subtract(out, self.targets[i], out=self.resid)
            loss += self.w * float(np.dot(self.resid, self.resid))
            np.multiply(self.resid, coef, out=self.delta[-1][0])
            ds = self._backward(s, ws, g_ws, g_bs)
            dshat = np.fft.rfftn(ds.reshape(self.shape))
            np.conj(dshat, out=dshat)
            dshat *= self.field_hats[i]
            self.gk_full += np.fft.irfftn(dshat, s=self.shape, axes=tuple(range(self.grid.d)))
        g_kernel[:] = self.gk_full[self.stencil_ix].reshape(-1)
        return loss / len(idx)

    def holdout_loss(self, kernel_grid, ws, bs) -> float:
        khat_conj = np.conj(np.fft.rfftn(embed_kernel_grid(kernel_grid, self.grid.n)))
        total = 0.0
        for uhat, tgt in zip(self.holdout_hats, self.holdout_targets):
            s = self._conv_from_hat(uhat, khat_conj)
            out = self._forward(s, ws, bs)
            np.subtract(out, tgt, out=self.resid)
            total += self.w * float(np.dot(self.resid, self.resid))
        return total / len(self.holdout_hats)


def embed_kernel_grid(kernel_grid: np.ndarray, n: int) -> np.ndarray:
    """Scatter a centered stencil array into an n^d grid at offsets mod n."""
    n_K = kernel_grid.shape[0]
    rad = (n_K - 1) // 2
    d = kernel_grid.ndim
    out = np.zeros((n,) * d)
    idx = [(np.arange(-rad, rad + 1) % n) for _ in range(d)]
    out[np.ix_(*idx)] = kernel_grid
    return out


def train_operator_with_history(
    cfg: TrainingConfig,
    grid: GridSpec,
    eps: float,
    tau_tilde: float,
    *,
    kernel_width: int | None = None,
    init_kernel: StencilKernel | None = None,
    init_mlp: MlpParams | None = None,
    seed_offset: int = 0,
    rung: int = 0,
) -> TrainingResult:
    """Adam training run returning the operator plus loss histories."""
    t0 = time.perf_counter()
    cfg = cfg.for_rung(rung)
    n_K = kernel_width
    if n_K is None:
        if cfg.kernel_widths:
            n_K = cfg.kernel_widths[0]
        else:
            n_K = grid.n // 8 + 1
    rng = np.random.default_rng(cfg.seed + seed_offset)
    trainer = _Trainer(cfg, grid, eps, tau_tilde, n_K, rng)

    if init_kernel is not None:
        if init_kernel.n_K != n_K or init_kernel.d != grid.d:
            raise ValueError("init kernel does not match the requested stencil")
        kernel_grid = init_kernel.as_grid().copy()
    else:
        kernel_grid = np.zeros((n_K,) * grid.d)
    mlp = init_mlp.copy() if init_mlp is not None else MlpParams.random(rng, cfg.layer_sizes)

    ws, bs = mlp.weights, mlp.biases
    g_kernel = np.zeros(n_K**grid.d)
    g_ws = [np.zeros_like(w) for w in ws]
    g_bs = [np.zeros_like(b) for b in bs]

    params = [kernel_grid.reshape(-1)] + ws + bs
    grads = [g_kernel] + g_ws + g_bs
    adam_m = [np.zeros_like(p) for p in params]
    adam_v = [np.zeros_like(p) for p in params]

    target = cfg.loss_target
    losses = np.empty(cfg.iterations)
    holdout_history: list[tuple[int, float]] = []
    reached = target is None
    iterations_run = 0

    for it in range(1, cfg.iterations + 1):
        idx = rng.choice(cfg.m, size=cfg.batch_size, replace=False)
        loss = trainer.minibatch_step(idx, kernel_grid, ws, bs, g_kernel, g_ws, g_bs)
        losses[it - 1] = loss
        b1t = 1.0 - cfg.beta1**it
        b2t = 1.0 - cfg.beta2**it
        lr = cfg.lr_at(it)
        for p, g, m, v in zip(params, grads, adam_m, adam_v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= lr * (m / b1t) / (np.sqrt(v / b2t) + cfg.adam_eps)
        iterations_run = it
        if it % cfg.holdout_every == 0 or it == cfg.iterations:
            hl = trainer.holdout_loss(kernel_grid, ws, bs)
            holdout_history.append((it, hl))
            if target is not None and hl <= target:
                reached = True
                break

    final_holdout = trainer.holdout_loss(kernel_grid, ws, bs)
    if not holdout_history or holdout_history[-1][0] != iterations_run:
        holdout_history.append((iterations_run, final_holdout))

    op = NeuralMcfOperator(
        kernel=StencilKernel(grid.d, n_K, kernel_grid.reshape(-1).copy()),
        mlp=MlpParams([w.copy() for w in ws], [b.copy() for b in bs]),
        tau_tilde=tau_tilde,
        epsilon=eps,
        trained_grid=grid,
    )
    elapsed = time.perf_counter() - t0
    if target is not None and not reached:
        raise TrainingError(
            f"loss target {target:g} not met within {cfg.iterations} iterations: "
            f"final held-out loss {final_holdout:.6e}",
            final_loss=final_holdout,
        )
    return TrainingResult(
        operator=op,
        iterations_run=iterations_run,
        minibatch_losses=losses[:iterations_run].copy(),
        holdout_history=holdout_history,
        final_holdout_loss=final_holdout,
        reached_target=reached,
        elapsed=elapsed,
    )


def train_operator(cfg: TrainingConfig, grid: GridSpec, eps: float, tau_tilde: float, **kwargs) -> NeuralMcfOperator:
    """Train on the configured grid; see train_operator_with_history."""
    return train_operator_with_history(cfg, grid, eps, tau_tilde, **kwargs).operator


def train_progressive_with_history(
    cfg: TrainingConfig,
    domain: GridSpec,
    eps: float,
    tau_tilde: float,
    resolutions=None,
) -> dict[int, TrainingResult]:
    """Coarse-to-fine curriculum: each rung starts from the previous kernel
    (bilinear upsampling) and the previous network parameters."""
    from .grid import upsample_kernel_bilinear

    resolutions = tuple(resolutions if resolutions is not None else (cfg.resolutions or ()))
    if not resolutions:
        raise ValueError("no resolution ladder given")
    if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
        raise ValueError("resolutions must be strictly increasing")
    widths = cfg.kernel_widths or tuple(n // 8 + 1 for n in resolutions)
    if len(widths) != len(resolutions):
        raise ValueError("kernel_widths must match the resolution ladder")

    results: dict[int, TrainingResult] = {}
    prev: TrainingResult | None = None
    for rung, (n, n_K) in enumerate(zip(resolutions, widths)):
        init_kernel = init_mlp = None
        if prev is not None:
            init_kernel = upsample_kernel_bilinear(prev.operator.kernel, n_K)
            init_mlp = prev.operator.mlp.copy()
        res = train_operator_with_history(
            cfg,
            domain.with_n(n),
            eps,
            tau_tilde,
            kernel_width=n_K,
            init_kernel=init_kernel,
            init_mlp=init_mlp,
            seed_offset=rung,
            rung=rung,
        )
        if prev is not None and res.final_holdout_loss > prev.final_holdout_loss:
            warnings.warn(
                f"held-out loss increased from rung n={resolutions[rung - 1]} "
                f"({prev.final_holdout_loss:.3e}) to rung n={n} ({res.final_holdout_loss:.3e})",
                stacklevel=2,
            )
        results[n] = res
        prev = res
    return results


def train_progressive(cfg: TrainingConfig, domain: GridSpec, eps: float, tau_tilde: float, resolutions=None) -> dict[int, NeuralMcfOperator]:
    """Map resolution -> trained operator over the ladder."""
    out = train_progressive_with_history(cfg, domain, eps, tau_tilde, resolutions)
    return {n: res.operator for n, res in out.items()}


# ---------------------------------------------------------------------------
# Checkpoint container ("WNET"): little-endian, version 1.
# Layout: magic, version u32, d u32, n_K u32, tau_tilde f64, epsilon f64,
# trained n u32, origin d*f64, edge_length f64, L u32, sizes L*u32,
# kernel weights, then per layer W_l (row-major) and b_l, all f64.


def save_checkpoint(op: NeuralMcfOperator, path) -> None:
    tg = op.trained_grid
    if tg is None:
        raise ValueError("operator has no training grid metadata to persist")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<III", CHECKPOINT_VERSION, op.kernel.d, op.kernel.n_K),
        struct.pack("<dd", op.tau_tilde, op.epsilon),
        struct.pack("<I", tg.n),
        np.asarray(tg.origin, dtype="<f8").tobytes(),
        struct.pack("<d", tg.edge_length),
        struct.pack("<I", op.mlp.num_layers),
        np.asarray(op.mlp.layer_sizes, dtype="<u4").tobytes(),
        op.kernel.weights.astype("<f8").tobytes(),
    ]
    for w, b in zip(op.mlp.weights, op.mlp.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, nbytes: int) -> bytes:
        if self.off + nbytes > len(self.buf):
            raise ValueError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.off : self.off + nbytes]
        self.off += nbytes
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def f64(self, count: int = 1):
        vals = struct.unpack(f"<{count}d", self.take(8 * count))
        return vals[0] if count == 1 else vals

    def f64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def load_checkpoint(path) -> NeuralMcfOperator:
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a WNET checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    d, n_K = r.u32(), r.u32()
    tau_tilde, epsilon = r.f64(), r.f64()
    n = r.u32()
    origin = tuple(np.frombuffer(r.take(8 * d), dtype="<f8"))
    edge = r.f64()
    num_layers = r.u32()
    sizes = r.u32(num_layers)
    sizes = (sizes,) if isinstance(sizes, int) else tuple(sizes)
    kernel = StencilKernel(d, n_K, r.f64_array(n_K**d))
    ws, bs = [], []
    prev = 1
    for s in sizes:
        ws.append(r.f64_array(s * prev).reshape(s, prev))
        bs.append(r.f64_array(s))
        prev = s
    if r.off != len(buf):
        raise ValueError(f"{path}: {len(buf) - r.off} trailing bytes, corrupt checkpoint")
    return NeuralMcfOperator(
        kernel=kernel,
        mlp=MlpParams(ws, bs),
        tau_tilde=tau_tilde,
        epsilon=epsilon,
        trained_grid=GridSpec(d, n, origin, edge),
    )
