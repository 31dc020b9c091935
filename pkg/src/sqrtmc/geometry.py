"""Anisotropic geometry of the nonnegative orthant in square-root coordinates.

Points are stored as s = sqrt(x) componentwise, which is the natural metric
for square-root diffusions and avoids cancellation near the boundary faces.
A cube of size ``rho`` around center ``s0`` spans, per axis,

    [0, (s0 + rho)^2)            if s0 <= rho   (boundary branch)
    [(s0 - rho)^2, (s0 + rho)^2) if s0 >  rho   (interior branch)

in x-space.  All intervals are closed-open so that subdivision tiles exactly.
Conversion to x-space happens only where a simulator needs it.

Everything here is immutable and pure; values can be shared freely across
worker threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

REL_TOL = 1e-12


class GeometryError(ValueError):
    """Invalid argument to a geometric constructor or operation."""


def _as_sqrt_array(values: Iterable[float]) -> np.ndarray:
    arr = np.asarray(tuple(values), dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise GeometryError("coordinates must form a non-empty 1-d sequence")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
        raise GeometryError("square-root coordinates must be finite and >= 0")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SqrtPoint:
    """A point of the orthant, stored as s_i = sqrt(x_i)."""

    s: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", _as_sqrt_array(self.s))

    @classmethod
    def from_x(cls, x: Iterable[float]) -> "SqrtPoint":
        arr = np.asarray(tuple(x), dtype=np.float64)
        if np.any(arr < 0.0):
            raise GeometryError("orthant points must be componentwise >= 0")
        return cls(np.sqrt(arr))

    @property
    def x(self) -> np.ndarray:
        return self.s * self.s

    @property
    def dim(self) -> int:
        return self.s.size

    def __iter__(self):
        return iter(self.s)

    def __repr__(self):
        return f"SqrtPoint(s={self.s.tolist()})"


def sqrt_distance(a: SqrtPoint, b: SqrtPoint) -> float:
    """max_i |sqrt(x_i) - sqrt(y_i)|, the native metric on the orthant."""
    if a.dim != b.dim:
        raise GeometryError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return float(np.max(np.abs(a.s - b.s)))


@dataclass(frozen=True)
class Interval:
    """One closed-open axis interval [lo, hi) generated by (s, rho)."""

    s: float
    rho: float
    lo: float
    hi: float

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def boundary(self) -> bool:
        """True when the generating center satisfies s <= rho."""
        return self.s <= self.rho

    @property
    def s_lo(self) -> float:
        return 0.0 if self.boundary else self.s - self.rho

    @property
    def s_hi(self) -> float:
        return self.s + self.rho

    def contains(self, x: float) -> bool:
        return self.lo <= x < self.hi

    def contains_s(self, s: float) -> bool:
        return self.s_lo <= s < self.s_hi if not self.boundary else 0.0 <= s < self.s_hi


def interval(s: float, rho: float) -> Interval:
    """Axis interval of the anisotropic cube family."""
    if not (rho > 0.0):
        raise GeometryError(f"rho must be positive, got {rho}")
    if s < 0.0 or not np.isfinite(s):
        raise GeometryError(f"center coordinate must be finite and >= 0, got {s}")
    lo = 0.0 if s <= rho else (s - rho) ** 2
    return Interval(s=float(s), rho=float(rho), lo=lo, hi=(s + rho) ** 2)


@dataclass(frozen=True, eq=False)
class AnisoCube:
    """Product of axis intervals around a center point, of size rho."""

    center: SqrtPoint
    rho: float

    def __post_init__(self):
        if not (self.rho > 0.0 and np.isfinite(self.rho)):
            raise GeometryError(f"cube size must be positive, got {self.rho}")
        if not self.contains(self.center):
            raise GeometryError("cube must contain its own center")

    @property
    def dim(self) -> int:
        return self.center.dim

    @property
    def intervals(self) -> tuple[Interval, ...]:
        return tuple(interval(float(s), self.rho) for s in self.center.s)

    def contains(self, p: SqrtPoint) -> bool:
        return cube_contains(self, p)

    def s_bounds(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(s_lo, s_hi, boundary_flag) arrays describing the s-space box."""
        c = self.center.s
        boundary = c <= self.rho
        lo = np.where(boundary, 0.0, c - self.rho)
        return lo, c + self.rho, boundary


def cube_contains(cube: AnisoCube, p: SqrtPoint) -> bool:
    """Membership test; half-open per axis, exact comparisons."""
    if p.dim != cube.dim:
        raise GeometryError(f"dimension mismatch: {p.dim} vs {cube.dim}")
    lo, hi, _ = cube.s_bounds()
    return bool(np.all(p.s >= lo) and np.all(p.s < hi))


def cube_measure(cube: AnisoCube) -> float:
    """Lebesgue measure in x-space: product of axis interval lengths."""
    return float(np.prod([iv.length for iv in cube.intervals]))


def truncated_width(cube: AnisoCube, axis: int, delta: float) -> float:
    """Axis width after cutting away the band x < delta**2."""
    if not (0.0 < delta < cube.rho):
        raise GeometryError(f"delta must lie in (0, rho), got {delta}")
    iv = cube.intervals[axis]
    return iv.hi - max(iv.lo, delta * delta)


@dataclass(frozen=True, eq=False)
class HyperCube:
    """Space-time box [t0, t0 + theta*rho**2) x AnisoCube."""

    t0: float
    theta: float
    cube: AnisoCube

    def __post_init__(self):
        if self.t0 < 0.0 or not np.isfinite(self.t0):
            raise GeometryError(f"time origin must be finite and >= 0, got {self.t0}")
        if not (0.0 < self.theta <= 1.0):
            raise GeometryError(f"theta must lie in (0, 1], got {self.theta}")

    @property
    def rho(self) -> float:
        return self.cube.rho

    @property
    def dim(self) -> int:
        return self.cube.dim

    @property
    def time_extent(self) -> float:
        return self.theta * self.rho * self.rho

    @property
    def t_end(self) -> float:
        return self.t0 + self.time_extent

    def contains(self, t: float, p: SqrtPoint) -> bool:
        return self.t0 <= t < self.t_end and cube_contains(self.cube, p)

    def measure(self) -> float:
        return self.time_extent * cube_measure(self.cube)

    def to_json(self) -> dict:
        return {
            "t0": self.t0,
            "theta": self.theta,
            "centers_sqrt": self.cube.center.s.tolist(),
            "rho": self.rho,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HyperCube":
        return hypercube(obj["t0"], obj["theta"], obj["centers_sqrt"], obj["rho"])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def hypercube(t0: float, theta: float, centers_sqrt: Sequence[float], rho: float) -> HyperCube:
    return HyperCube(t0=float(t0), theta=float(theta),
                     cube=AnisoCube(SqrtPoint(centers_sqrt), float(rho)))


def is_regular(obj: AnisoCube | HyperCube) -> bool:
    """Each center coordinate is exactly 0 or at least the cube size."""
    cube = obj.cube if isinstance(obj, HyperCube) else obj
    c = cube.center.s
    return bool(np.all((c == 0.0) | (c >= cube.rho)))


def rescale(q: HyperCube, r: float, t_offset: float = 0.0) -> HyperCube:
    """Image of q under (t0 + t, x) -> (t_offset + r*t, r*x)."""
    if not (r > 0.0 and np.isfinite(r)):
        raise GeometryError(f"rescale factor must be positive, got {r}")
    if t_offset < 0.0:
        raise GeometryError("time offset must be >= 0")
    root = np.sqrt(r)
    return hypercube(t_offset, q.theta, (q.cube.center.s * root).tolist(), q.rho * root)


def shift_shrink(q: HyperCube) -> HyperCube:
    """Replace a size-1 hypercube by a regular size-2/3 one inside it.

    Axis rule on the center: s in [0, 1/3) -> 0; s in [1/3, 1) -> s + 1/3;
    s >= 1 -> s.  The result contains K(center, 1/6) inside its half-size
    cube and sits inside q; both containments are asserted.
    """
    if abs(q.rho - 1.0) > REL_TOL:
        raise GeometryError("shift_shrink expects a size-1 hypercube; rescale first")
    s = q.cube.center.s
    shat = np.where(s < 1.0 / 3.0, 0.0, np.where(s < 1.0, s + 1.0 / 3.0, s))
    out = hypercube(q.t0, q.theta, shat.tolist(), 2.0 / 3.0)

    if not is_regular(out):
        raise GeometryError("shift_shrink produced a non-regular hypercube")
    inner = AnisoCube(q.cube.center, 1.0 / 6.0)
    target = AnisoCube(out.cube.center, 0.5)
    if not _cube_subset(inner, target) or not _cube_subset(out.cube, q.cube):
        raise GeometryError("shift_shrink containment postcondition failed")
    return out


def _cube_subset(inner: AnisoCube, outer: AnisoCube) -> bool:
    ilo, ihi, _ = inner.s_bounds()
    olo, ohi, _ = outer.s_bounds()
    return bool(np.all(ilo >= olo) and np.all(ihi <= ohi))
