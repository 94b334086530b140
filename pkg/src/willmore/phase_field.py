"""Double-well potential, optimal interface profiles, analytic signed
distance shapes, and the diffuse perimeter energy.

The interface profile used throughout is tanh(-3 s / (4 eps)) applied to
the signed distance s of a shape (negative inside), so the phase field is
+1 deep inside, -1 far outside, with a transition layer of width O(eps).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import GridSpec, NodalField

__all__ = [
    "PhaseFieldParams",
    "double_well",
    "double_well_prime",
    "double_well_second",
    "optimal_profile",
    "Shape",
    "Sphere",
    "Box",
    "cube",
    "ThickDisk",
    "Cross",
    "Capsule",
    "HalfSpace",
    "Union",
    "Intersection",
    "Difference",
    "tube_union",
    "shape_sdf",
    "phase_field_from_shape",
    "sphere_phase_field",
    "perimeter_energy",
]

MAX_COMPOSITION_DEPTH = 8


def double_well(v):
    """Psi(v) = 9/16 (1 - v^2)^2, wells at v = +-1."""
    v = np.asarray(v, dtype=float)
    q = 1.0 - v * v
    return 9.0 / 16.0 * q * q


def double_well_prime(v):
    """Psi'(v) = -9/4 v (1 - v^2)."""
    v = np.asarray(v, dtype=float)
    return -9.0 / 4.0 * v * (1.0 - v * v)


def double_well_second(v):
    """Psi''(v) = 9/4 (3 v^2 - 1); minimum -9/4 at v = 0."""
    v = np.asarray(v, dtype=float)
    return 9.0 / 4.0 * (3.0 * v * v - 1.0)


def optimal_profile(s, eps: float):
    """One-dimensional equilibrium profile tanh(-3 s / (4 eps))."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return np.tanh(-3.0 * np.asarray(s, dtype=float) / (4.0 * eps))


@dataclass(frozen=True)
class PhaseFieldParams:
    """Interface width parameter with a resolution diagnostic."""

    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def check_resolution(self, spec: GridSpec) -> None:
        """Warn when eps < 2h, the empirical stability edge."""
        if self.epsilon < 2.0 * spec.h:
            warnings.warn(
                f"eps={self.epsilon:g} is below 2h={2 * spec.h:g}; "
                "the interface is under-resolved and schemes may be unstable",
                stacklevel=2,
            )


# ---------------------------------------------------------------------------
# Signed distance shapes.  Primitives are exact; boolean combinations use
# min/max composition, an outer bound on the true signed distance, which is
# sufficient because the profile saturates within O(eps) of the interface.
# Sign convention: negative inside.


class Shape:
    depth = 1

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __or__(self, other: "Shape") -> "Union":
        return Union(self, other)

    def __sub__(self, other: "Shape") -> "Difference":
        return Difference(self, other)


def _pts(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return pts


@dataclass(frozen=True)
class Sphere(Shape):
    """Circle (2D) or sphere (3D)."""

    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def sdf(self, pts):
        pts = _pts(pts)
        return np.linalg.norm(pts - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Box(Shape):
    """Axis-aligned box given by center and positive half-extents."""

    center: tuple[float, ...]
    half_extents: tuple[float, ...]

    def __post_init__(self):
        he = tuple(float(x) for x in self.half_extents)
        if any(x <= 0 for x in he):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "half_extents", he)

    def sdf(self, pts):
        pts = _pts(pts)
        q = np.abs(pts - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


def cube(center: Sequence[float], half_width: float) -> Box:
    return Box(tuple(center), (float(half_width),) * len(tuple(center)))


@dataclass(frozen=True)
class ThickDisk(Shape):
    """Flat cylinder (disk of given radius and thickness), 3D, flat along `axis`."""

    center: tuple[float, ...]
    radius: float
    thickness: float
    axis: int = 2

    def __post_init__(self):
        if not (self.radius > 0 and self.thickness > 0):
            raise ValueError("radius and thickness must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def sdf(self, pts):
        pts = _pts(pts) - np.asarray(self.center)
        d = pts.shape[-1]
        plane = [i for i in range(d) if i != self.axis]
        dr = np.linalg.norm(pts[..., plane], axis=-1) - self.radius
        dz = np.abs(pts[..., self.axis]) - 0.5 * self.thickness
        outside = np.sqrt(np.maximum(dr, 0.0) ** 2 + np.maximum(dz, 0.0) ** 2)
        inside = np.minimum(np.maximum(dr, dz), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Capsule(Shape):
    """Tube around the segment p0 -> p1."""

    p0: tuple[float, ...]
    p1: tuple[float, ...]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "p0", tuple(float(c) for c in self.p0))
        object.__setattr__(self, "p1", tuple(float(c) for c in self.p1))

    def sdf(self, pts):
        pts = _pts(pts)
        a, b = np.asarray(self.p0), np.asarray(self.p1)
        ab = b - a
        denom = float(np.dot(ab, ab))
        t = np.clip(np.tensordot(pts - a, ab, axes=(-1, 0)) / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        return np.linalg.norm(pts - closest, axis=-1) - self.radius


@dataclass(frozen=True)
class HalfSpace(Shape):
    """Points x with dot(x, normal) <= offset are inside."""

    normal: tuple[float, ...]
    offset: float

    def __post_init__(self):
        nrm = np.asarray(self.normal, dtype=float)
        length = float(np.linalg.norm(nrm))
        if length == 0.0:
            raise ValueError("normal must be nonzero")
        object.__setattr__(self, "normal", tuple(nrm / length))
        object.__setattr__(self, "offset", float(self.offset) / length)

    def sdf(self, pts):
        return np.tensordot(_pts(pts), np.asarray(self.normal), axes=(-1, 0)) - self.offset


class _Composite(Shape):
    def __init__(self, *shapes: Shape):
        if not shapes:
            raise ValueError("composition needs at least one shape")
        self.shapes = tuple(shapes)
        self.depth = 1 + max(s.depth for s in shapes)
        if self.depth > MAX_COMPOSITION_DEPTH:
            raise ValueError(f"shape composition deeper than {MAX_COMPOSITION_DEPTH}")


class Union(_Composite):
    def sdf(self, pts):
        vals = [s.sdf(pts) for s in self.shapes]
        out = vals[0]
        for v in vals[1:]:
            out = np.minimum(out, v)
        return out


class Intersection(_Composite):
    def sdf(self, pts):
        vals = [s.sdf(pts) for s in self.shapes]
        out = vals[0]
        for v in vals[1:]:
            out = np.maximum(out, v)
        return out


class Difference(_Composite):
    """Base shape minus cutter (used for shapes with a cut-out corner)."""

    def __init__(self, base: Shape, cutter: Shape):
        super().__init__(base, cutter)

    def sdf(self, pts):
        base, cutter = self.shapes
        return np.maximum(base.sdf(pts), -cutter.sdf(pts))


class Cross(Shape):
    """Union of d axis-aligned bars through a common center (plus sign)."""

    def __init__(self, center: Sequence[float], arm_half_length: float, arm_half_width: float):
        center = tuple(float(c) for c in center)
        if not (arm_half_length > 0 and arm_half_width > 0):
            raise ValueError("arm dimensions must be positive")
        d = len(center)
        bars = []
        for axis in range(d):
            he = [arm_half_width] * d
            he[axis] = arm_half_length
            bars.append(Box(center, tuple(he)))
        self._union = Union(*bars)
        self.depth = self._union.depth
        self.center = center
        self.arm_half_length = arm_half_length
        self.arm_half_width = arm_half_width

    def sdf(self, pts):
        return self._union.sdf(pts)


def tube_union(segments: Sequence[tuple[Sequence[float], Sequence[float]]], radius: float) -> Union:
    """Union of capsules around the given segments, all with one radius."""
    return Union(*[Capsule(tuple(p0), tuple(p1), radius) for p0, p1 in segments])


def shape_sdf(shape: Shape, x) -> np.ndarray | float:
    """Signed distance of `shape` at a point (d,) or point batch (..., d)."""
    pts = _pts(x)
    out = shape.sdf(pts)
    if pts.ndim == 1:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Field construction and the diffuse perimeter.


def _warn_if_near_seam(spec: GridSpec, shape: Shape, eps: float):
    """Warn when the interface comes within 3 eps of the periodic seam."""
    coords = spec.node_coords()
    for axis in range(spec.d):
        seam = np.take(coords, 0, axis=axis).reshape(-1, spec.d)
        if np.min(shape.sdf(seam)) < 3.0 * eps:
            warnings.warn(
                "shape is closer than 3*eps to the periodic boundary; "
                "the profile will interact with its own periodic images",
                stacklevel=3,
            )
            return


def phase_field_from_shape(spec: GridSpec, shape: Shape, eps: float) -> NodalField:
    """Nodal optimal profile of a shape: +1 inside, -1 outside."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    sd = shape.sdf(spec.node_coords())
    _warn_if_near_seam(spec, shape, eps)
    return NodalField.from_grid(spec, np.tanh(-3.0 * sd / (4.0 * eps)))


def sphere_phase_field(spec: GridSpec, r: float, center: Sequence[float], eps: float) -> NodalField:
    """tanh(3 (r - |x - center|) / (4 eps)) sampled at the nodes."""
    if not r > 0:
        raise ValueError("radius must be positive")
    if not eps > 0:
        raise ValueError("eps must be positive")
    diff = spec.node_coords() - np.asarray(center, dtype=float)
    dist = np.linalg.norm(diff, axis=-1)
    return NodalField.from_grid(spec, np.tanh(3.0 * (r - dist) / (4.0 * eps)))


def perimeter_energy(U: NodalField, eps: float) -> float:
    """Diffuse interface energy 1/2 int eps |grad u|^2 + Psi(u)/eps.

    Quadrature: squared forward differences on the cell edges (periodic)
    for the gradient part, nodal values for the potential, cell volume
    h^d weights.  For an optimal-profile field this converges to the
    perimeter of the enclosed set.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    spec = U.spec
    u = U.as_grid()
    h = spec.h
    grad_sq = np.zeros_like(u)
    for axis in range(spec.d):
        diff = (np.roll(u, -1, axis=axis) - u) / h
        grad_sq += diff * diff
    integrand = 0.5 * (eps * grad_sq + double_well(u) / eps)
    return float(integrand.sum() * h**spec.d)
