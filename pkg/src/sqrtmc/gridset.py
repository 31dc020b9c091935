"""Rasterized subsets of a hypercube, used as hitting targets and for exact
measure arithmetic in the subdivision machinery.

Cells live on a uniform grid in (t, s)-space — uniform per axis in the
square-root coordinate — and are mapped back to (t, x) when measured, so a
cell's measure is dt * prod_i (s_hi_i^2 - s_lo_i^2).  Spatial resolutions are
quoted per unit size: an axis whose s-extent is 2*rho (interior branch) gets
twice the cells of a boundary axis, keeping the cell s-width equal to
rho / resolution on every axis.  With a power-of-3 spatial resolution and a
matching power-of-9 time resolution, subdivision planes land exactly on cell
boundaries and occupancies are exact integer-weighted sums.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, HyperCube


@dataclass(eq=False)
class GridSet:
    """A marked subset of ``base``, stored as a cell mask in (t, s)-space."""

    base: HyperCube
    mask: np.ndarray  # bool, shape (m_t, k_1, ..., k_n)
    _cell_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mask.ndim != self.base.dim + 1:
            raise GeometryError("mask rank must be 1 + spatial dimension")
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)

    # -- construction ------------------------------------------------------

    @classmethod
    def empty(cls, base: HyperCube, resolution: int, time_cells: int | None = None) -> "GridSet":
        if resolution < 1:
            raise GeometryError("resolution must be >= 1")
        m_t = int(time_cells) if time_cells is not None else resolution * resolution
        shape = (m_t, *cls._spatial_cells(base, resolution))
        return cls(base=base, mask=np.zeros(shape, dtype=bool))

    @classmethod
    def full(cls, base: HyperCube, resolution: int, time_cells: int | None = None) -> "GridSet":
        g = cls.empty(base, resolution, time_cells)
        g.mask[...] = True
        return g

    @staticmethod
    def _spatial_cells(base: HyperCube, resolution: int) -> tuple[int, ...]:
        lo, hi, _ = base.cube.s_bounds()
        cells = []
        for a, b in zip(lo, hi):
            # cell s-width rho/resolution; non-regular axes round up
            k = int(np.ceil((b - a) * resolution / base.rho - 1e-9))
            cells.append(max(k, 1))
        return tuple(cells)

    # -- grid description --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    @property
    def m_t(self) -> int:
        return self.mask.shape[0]

    @property
    def dt(self) -> float:
        return self.base.time_extent / self.m_t

    def s_edges(self, axis: int) -> np.ndarray:
        lo, hi, _ = self.base.cube.s_bounds()
        return np.linspace(lo[axis], hi[axis], self.shape[1 + axis] + 1)

    def axis_weights(self, axis: int) -> np.ndarray:
        """x-space measure of each cell slice along one spatial axis."""
        key = ("w", axis)
        if key not in self._cell_cache:
            e = self.s_edges(axis)
            self._cell_cache[key] = e[1:] ** 2 - e[:-1] ** 2
        return self._cell_cache[key]

    def spatial_resolution(self) -> int:
        """Cells per unit size (s-width of one cell is rho / resolution)."""
        lo, hi, _ = self.base.cube.s_bounds()
        return int(round(self.shape[1] * self.base.rho / (hi[0] - lo[0])))

    # -- measures ----------------------------------------------------------

    def measure_of(self, mask: np.ndarray) -> float:
        """Exact x-space measure of an arbitrary mask on this grid."""
        w = mask.astype(np.float64)
        for axis in reversed(range(self.base.dim)):
            w = np.tensordot(w, self.axis_weights(axis), axes=([-1], [0]))
        return float(np.sum(w) * self.dt)

    def measure(self) -> float:
        return self.measure_of(self.mask)

    def occupancy(self) -> float:
        return self.measure() / self.base.measure()

    # -- marking helpers ----------------------------------------------------

    def mark_time_slab(self, frac_lo: float, frac_hi: float) -> "GridSet":
        """Mark all cells with time fraction in [frac_lo, frac_hi)."""
        a = int(round(frac_lo * self.m_t))
        b = int(round(frac_hi * self.m_t))
        self.mask[a:b, ...] = True
        return self

    def mark_random(self, generator: np.random.Generator, density: float) -> "GridSet":
        self.mask |= generator.random(self.shape) < density
        return self

    def trim_to_measure(self, limit: float, generator: np.random.Generator) -> "GridSet":
        """Unmark random cells until measure() <= limit."""
        flat = self.mask.reshape(-1)
        idx = np.flatnonzero(flat)
        generator.shuffle(idx)
        cm = self._flat_cell_measures()
        run = self.measure()
        for i in idx:
            if run <= limit:
                break
            flat[i] = False
            run -= cm[i]
        return self

    def _flat_cell_measures(self) -> np.ndarray:
        key = "flat"
        if key not in self._cell_cache:
            w = np.full(self.m_t, self.dt)
            for axis in range(self.base.dim):
                w = np.multiply.outer(w, self.axis_weights(axis))
            self._cell_cache[key] = w.reshape(-1)
        return self._cell_cache[key]

    # -- membership for simulators ------------------------------------------

    def lookup_arrays(self) -> dict:
        """Uniform-grid description consumed by the path kernels."""
        lo, hi, _ = self.base.cube.s_bounds()
        dims = np.asarray(self.shape[1:], dtype=np.int64)
        ds = (hi - lo) / dims
        return {
            "t_lo": self.base.t0,
            "dt": self.dt,
            "m_t": self.m_t,
            "s_lo": np.asarray(lo, dtype=np.float64),
            "ds": np.asarray(ds, dtype=np.float64),
            "dims": dims,
            "mask": np.ascontiguousarray(self.mask.reshape(-1), dtype=np.uint8),
        }

    # -- serialization -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "base": self.base.to_json(),
            "shape": list(self.shape),
            "runs": _runs_from_flat(self.mask.reshape(-1)),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GridSet":
        base = HyperCube.from_json(obj["base"])
        shape = tuple(obj["shape"])
        flat = np.zeros(int(np.prod(shape)), dtype=bool)
        for a, b in obj["runs"]:
            flat[a:b] = True
        return cls(base=base, mask=flat.reshape(shape))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _runs_from_flat(flat: np.ndarray) -> list[list[int]]:
    """[start, stop) runs of True in a flat boolean array."""
    if flat.size == 0:
        return []
    padded = np.concatenate(([False], flat, [False]))
    d = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1)
    return [[int(a), int(b)] for a, b in zip(starts, stops)]
