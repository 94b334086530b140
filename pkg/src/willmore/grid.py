"""Regular periodic grids, nodal fields and compact stencil convolutions.

A field lives on the n^d distinct nodes of a cubic periodic grid; node
multi-index alpha maps to the physical point origin + alpha * h with
h = edge_length / n, and index n wraps back to index 0.  The discrete L2
norm is the root mean square over the distinct nodes,

    ||U|| = sqrt( n^-d * sum_alpha U_alpha^2 ),

so it is the physical L2(Omega) norm divided by sqrt(|Omega|).
Convolution kernels are compact centered stencils of odd width applied
with periodic wraparound; a direct summation path and an FFT path are
both provided and cross-checked in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "GridSpec",
    "NodalField",
    "StencilKernel",
    "discrete_l2_norm",
    "discrete_l2_dist",
    "physical_l2_norm",
    "convolve_periodic",
    "convolve_spectral",
    "convolve",
    "convolve_adjoint",
    "upsample_kernel_bilinear",
    "SPECTRAL_WIDTH_THRESHOLD",
]

# Kernels wider than this go through the FFT path in `convolve`.
SPECTRAL_WIDTH_THRESHOLD = 9


@dataclass(frozen=True)
class GridSpec:
    """Cubic periodic grid: n samples per axis on a d-dimensional box.

    `origin` is the physical coordinate of node index 0 on each axis and
    `edge_length` the extent per axis (all axes share n and edge_length).
    Solvers require d in {2, 3}; d=1 is accepted for grid-level operations.
    """

    d: int
    n: int
    origin: tuple[float, ...]
    edge_length: float

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.n < 2:
            raise ValueError(f"need at least 2 samples per axis, got {self.n}")
        if not self.edge_length > 0:
            raise ValueError("edge_length must be positive")
        origin = tuple(float(x) for x in np.atleast_1d(np.asarray(self.origin, dtype=float)))
        if len(origin) == 1 and self.d > 1:
            origin = origin * self.d
        if len(origin) != self.d:
            raise ValueError(f"origin must have {self.d} components, got {len(origin)}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "edge_length", float(self.edge_length))

    @property
    def h(self) -> float:
        """Grid spacing edge_length / n."""
        return self.edge_length / self.n

    @property
    def num_nodes(self) -> int:
        return self.n**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def volume(self) -> float:
        return self.edge_length**self.d

    def with_n(self, n: int) -> "GridSpec":
        """Same physical box, different resolution."""
        return GridSpec(self.d, n, self.origin, self.edge_length)

    def axis_coords(self, axis: int = 0) -> np.ndarray:
        return self.origin[axis] + self.h * np.arange(self.n)

    def node_coords(self) -> np.ndarray:
        """All node coordinates, shape (*grid_shape, d)."""
        axes = [self.axis_coords(i) for i in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)


@dataclass(frozen=True)
class NodalField:
    """Immutable sample vector of a grid function, lexicographic node order."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        if vals.size != self.spec.num_nodes:
            raise ValueError(
                f"expected {self.spec.num_nodes} values for n={self.spec.n}, d={self.spec.d}, "
                f"got {vals.size}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def as_grid(self) -> np.ndarray:
        """Read-only view shaped (n,)*d."""
        return self.values.reshape(self.spec.shape)

    @classmethod
    def from_grid(cls, spec: GridSpec, arr: np.ndarray) -> "NodalField":
        return cls(spec, np.asarray(arr).reshape(-1))

    def same_grid(self, other: "NodalField") -> bool:
        return self.spec == other.spec


@dataclass(frozen=True)
class StencilKernel:
    """Centered convolution stencil of odd width n_K per axis.

    Weights are stored lexicographically over offsets
    -(n_K-1)/2 ... +(n_K-1)/2 per axis, so weights.reshape((n_K,)*d)[i,...]
    holds the weight at offset i - (n_K-1)/2.
    """

    d: int
    n_K: int
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.n_K < 1 or self.n_K % 2 == 0:
            raise ValueError(f"stencil width must be odd and positive, got {self.n_K}")
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if w.size != self.n_K**self.d:
            raise ValueError(f"expected {self.n_K ** self.d} weights, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def radius(self) -> int:
        return (self.n_K - 1) // 2

    def as_grid(self) -> np.ndarray:
        return self.weights.reshape((self.n_K,) * self.d)

    @classmethod
    def delta(cls, d: int, n_K: int = 1) -> "StencilKernel":
        """Identity kernel: weight 1 at offset 0."""
        w = np.zeros((n_K,) * d)
        w[((n_K - 1) // 2,) * d] = 1.0
        return cls(d, n_K, w.reshape(-1))

    @classmethod
    def zeros(cls, d: int, n_K: int) -> "StencilKernel":
        return cls(d, n_K, np.zeros(n_K**d))

    def reversed(self) -> "StencilKernel":
        """Kernel with all offsets negated (the adjoint stencil)."""
        g = self.as_grid()
        return StencilKernel(self.d, self.n_K, g[(slice(None, None, -1),) * self.d].copy().reshape(-1))


def discrete_l2_norm(U: NodalField) -> float:
    """Root mean square over the n^d distinct nodes."""
    v = U.values
    return float(np.sqrt(np.dot(v, v) / v.size))


def discrete_l2_dist(U: NodalField, V: NodalField) -> float:
    """discrete_l2_norm(U - V); the fields must share a grid."""
    if U.spec != V.spec:
        raise ValueError("fields live on different grids")
    diff = U.values - V.values
    return float(np.sqrt(np.dot(diff, diff) / diff.size))


def physical_l2_norm(U: NodalField) -> float:
    """L2(Omega) norm, sqrt(h^d * sum U^2) = sqrt(|Omega|) * discrete_l2_norm."""
    return float(np.sqrt(U.spec.volume)) * discrete_l2_norm(U)


def _check_kernel_grid(K: StencilKernel, spec: GridSpec):
    if K.d != spec.d:
        raise ValueError(f"kernel dimension {K.d} does not match grid dimension {spec.d}")
    if K.n_K > spec.n:
        raise ValueError(f"kernel width {K.n_K} exceeds grid size {spec.n}")


def correlate_direct(weights_grid: np.ndarray, arr: np.ndarray) -> np.ndarray:
    """(K*U)_a = sum_b K_b U_{a+b} by direct summation with periodic wrap."""
    return ndimage.correlate(arr, weights_grid, mode="wrap")


def embed_kernel(K: StencilKernel, n: int) -> np.ndarray:
    """Scatter stencil weights into a full n^d array at offsets mod n."""
    grid = np.zeros((n,) * K.d)
    idx = [(np.arange(-K.radius, K.radius + 1) % n) for _ in range(K.d)]
    grid[np.ix_(*idx)] = K.as_grid()
    return grid


def kernel_rfft(K: StencilKernel, spec: GridSpec) -> np.ndarray:
    """rfftn of the kernel embedded on the grid (cache this for hot loops)."""
    _check_kernel_grid(K, spec)
    return np.fft.rfftn(embed_kernel(K, spec.n))


def correlate_spectral(arr: np.ndarray, khat: np.ndarray) -> np.ndarray:
    """Correlation via the FFT: irfftn( rfftn(U) * conj(khat) )."""
    shape = arr.shape
    uhat = np.fft.rfftn(arr)
    np.multiply(uhat, np.conj(khat), out=uhat)
    return np.fft.irfftn(uhat, s=shape, axes=tuple(range(arr.ndim)))


def convolve_periodic(K: StencilKernel, U: NodalField) -> NodalField:
    """Direct-sum periodic convolution (K*U)_a = sum_b K_b U_{a+b}."""
    _check_kernel_grid(K, U.spec)
    out = correlate_direct(K.as_grid(), U.as_grid())
    return NodalField.from_grid(U.spec, out)


def convolve_spectral(K: StencilKernel, U: NodalField) -> NodalField:
    """Same contract as convolve_periodic through DFT diagonalization."""
    khat = kernel_rfft(K, U.spec)
    out = correlate_spectral(U.as_grid(), khat)
    return NodalField.from_grid(U.spec, out)


def convolve(K: StencilKernel, U: NodalField) -> NodalField:
    """Dispatch: FFT path for wide kernels, direct summation otherwise."""
    if K.n_K > SPECTRAL_WIDTH_THRESHOLD:
        return convolve_spectral(K, U)
    return convolve_periodic(K, U)


def convolve_adjoint(K: StencilKernel, W: NodalField) -> NodalField:
    """Apply the transpose stencil: <K*U, W> = <U, adj(K)*W> node-wise."""
    return convolve(K.reversed(), W)


def _axis_interp_matrix(n_coarse: int, n_fine: int) -> np.ndarray:
    """Linear interpolation matrix (n_fine x n_coarse) between centered stencils.

    Fine offset g maps to coarse coordinate g * (n_coarse-1)/(n_fine-1);
    outside the coarse support the kernel extends by zero.
    """
    rc, rf = (n_coarse - 1) // 2, (n_fine - 1) // 2
    M = np.zeros((n_fine, n_coarse))
    ratio = 1.0 if n_fine == 1 else (n_coarse - 1) / (n_fine - 1)
    for row, g in enumerate(range(-rf, rf + 1)):
        c = g * ratio
        lo = int(np.floor(c))
        t = c - lo
        for j, wgt in ((lo, 1.0 - t), (lo + 1, t)):
            if wgt != 0.0 and -rc <= j <= rc:
                M[row, j + rc] += wgt
    return M


def upsample_kernel_bilinear(K: StencilKernel, target_n_K: int) -> StencilKernel:
    """Interpolate a stencil onto a finer centered stencil of odd width.

    Separable linear interpolation per axis (bilinear in 2D, trilinear in
    3D) with zero extension outside the coarse support; afterwards the
    weights are rescaled so the response to a constant field (the weight
    sum) is preserved exactly.
    """
    if target_n_K % 2 == 0:
        raise ValueError(f"target stencil width must be odd, got {target_n_K}")
    if target_n_K < K.n_K:
        raise ValueError(f"target width {target_n_K} is below the source width {K.n_K}")
    if target_n_K == K.n_K:
        return StencilKernel(K.d, K.n_K, K.weights.copy())

    M = _axis_interp_matrix(K.n_K, target_n_K)
    out = K.as_grid()
    for axis in range(K.d):
        out = np.tensordot(M, out, axes=(1, axis))
        out = np.moveaxis(out, 0, axis)

    total_coarse = float(K.weights.sum())
    total_fine = float(out.sum())
    if abs(total_fine) > 1e-12 * max(1.0, float(np.abs(K.weights).sum())):
        out *= total_coarse / total_fine
    return StencilKernel(K.d, target_n_K, out.reshape(-1))


def cyclic_shift(U: NodalField, shift: tuple[int, ...]) -> NodalField:
    """Cyclically shift a field by whole node offsets (testing helper)."""
    return NodalField.from_grid(U.spec, np.roll(U.as_grid(), shift, axis=tuple(range(U.spec.d))))
