"""Recursive regular subdivision, stopped-cube families, and dilation sets.

A regular hypercube splits into nine equal time slabs and, per spatial axis,
either two pieces (boundary axis, split at one third of the s-extent) or
three equal pieces (interior axis).  Every child is again regular, the
children tile the parent exactly, and with a power-of-3 grid resolution all
split planes land on cell boundaries, so occupancy ratios are exact
integer-weighted sums with no quadrature error.

``cz_decompose`` stops at the first subdivision cube whose occupancy ratio
reaches ``mu`` (classic Calderon-Zygmund stopping).  Two cube families come
out of the recursion and both are needed downstream:

* ``stopped``  - maximal cubes with occupancy >= mu whose parent is below mu;
  these witness the dichotomy's "large regular subcube" branch.
* ``parents``  - cubes below mu with at least one stopped child; each parent
  is contained in its own dilation box, which is what makes the covering
  inequality |Gamma| <= mu * |D1| an exact theorem on the grid.

Exact zero residual requires Gamma to be marked at subdivision-leaf
granularity: single cells on boundary axes, cell pairs on interior axes
(leaves span two cells there), with the time resolution equal to
9**depth.  Bases centered at the origin have only boundary axes, where any
cell mask qualifies.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, HyperCube, hypercube, is_regular
from .gridset import GridSet


class PreconditionError(ValueError):
    """A documented precondition of a verification routine was violated."""


class DecompositionError(RuntimeError):
    """The decomposition could not certify a statement it guarantees."""


# ---------------------------------------------------------------------------
# geometric subdivision
# ---------------------------------------------------------------------------

def subdivide(q: HyperCube) -> list[HyperCube]:
    """Split a regular hypercube into its regular children of size rho/3."""
    if not is_regular(q):
        raise GeometryError("subdivision is only defined for regular hypercubes")
    rho = q.rho
    child_rho = rho / 3.0
    slab = q.time_extent / 9.0

    axis_centers: list[tuple[float, ...]] = []
    for s in q.cube.center.s:
        if s == 0.0:
            axis_centers.append((0.0, 2.0 * rho / 3.0))
        else:
            axis_centers.append((s - 2.0 * rho / 3.0, s, s + 2.0 * rho / 3.0))

    out = []
    for j in range(9):
        t_child = q.t0 + j * slab
        for centers in itertools.product(*axis_centers):
            out.append(hypercube(t_child, q.theta, centers, child_rho))
    return out


# ---------------------------------------------------------------------------
# grid-aligned subdivision tree
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SubdivisionNode:
    """One cube of the subdivision tree, tied to its grid cell ranges."""

    hypercube: HyperCube
    level: int
    occupancy: float
    t_cells: tuple[int, int]
    s_cells: tuple[tuple[int, int], ...]
    boundary: tuple[bool, ...]
    children: list["SubdivisionNode"] = field(default_factory=list)

    @property
    def rho(self) -> float:
        return self.hypercube.rho

    def to_json(self) -> dict:
        return {
            "hypercube": self.hypercube.to_json(),
            "level": self.level,
            "occupancy": self.occupancy,
        }


class _GridArithmetic:
    """Exact box sums over the weighted occupancy grid of one GridSet."""

    def __init__(self, gamma: GridSet):
        self.gamma = gamma
        weighted = gamma.mask.astype(np.float64) * gamma.dt
        shape = gamma.shape
        for axis in range(gamma.base.dim):
            w = gamma.axis_weights(axis)
            expand = [1] * len(shape)
            expand[1 + axis] = shape[1 + axis]
            weighted = weighted * w.reshape(expand)
        for ax in range(weighted.ndim):
            weighted = weighted.cumsum(axis=ax)
        self.prefix = np.pad(weighted, [(1, 0)] * weighted.ndim)
        self.cum = [np.concatenate(([0.0], np.cumsum(np.full(gamma.m_t, gamma.dt))))]
        for axis in range(gamma.base.dim):
            self.cum.append(np.concatenate(([0.0], np.cumsum(gamma.axis_weights(axis)))))

    def gamma_measure(self, ranges: tuple[tuple[int, int], ...]) -> float:
        total = 0.0
        for corner in itertools.product(*ranges):
            lows = sum(c == a for c, (a, _) in zip(corner, ranges))
            total += (-1 if lows % 2 else 1) * self.prefix[corner]
        return float(total)

    def box_measure(self, ranges: tuple[tuple[int, int], ...]) -> float:
        out = 1.0
        for cum, (a, b) in zip(self.cum, ranges):
            out *= cum[b] - cum[a]
        return float(out)


def alignment_depth(gamma: GridSet) -> int:
    """Deepest level at which subdivision planes align with grid cells."""
    depth = 0
    while True:
        nxt = depth + 1
        if gamma.m_t % 9 ** nxt != 0:
            return depth
        if any(k % 3 ** nxt != 0 for k in gamma.shape[1:]):
            return depth
        depth = nxt


def _leaf_edges(k: int, is_boundary: bool, depth: int) -> np.ndarray:
    """Cell indices of the level-``depth`` leaf boundaries along one axis.

    Interior leaves span two boundary-leaf widths, so a boundary axis of k
    cells splits as [0, w, 3w, 5w, ..., k] with w = k / 3**depth, while an
    axis that is interior from the root splits uniformly every k / 3**depth.
    """
    w = k // 3 ** depth
    if is_boundary:
        return np.concatenate(([0], np.arange(w, k + 1, 2 * w)))
    return np.arange(0, k + 1, w)


def mark_random_leaves(gamma: GridSet, gen: np.random.Generator,
                       density: float) -> GridSet:
    """Mark whole subdivision leaves i.i.d. with the given density.

    Leaf-aligned masks are the class for which the stopped family covers
    Gamma exactly (zero residual): every leaf has occupancy 0 or 1.
    """
    depth = alignment_depth(gamma)
    base = gamma.base
    t_leaves = 9 ** depth
    t_group = gamma.m_t // t_leaves
    edges = [_leaf_edges(k, bool(s == 0.0), depth)
             for k, s in zip(gamma.shape[1:], base.cube.center.s)]
    counts = [e.size - 1 for e in edges]
    draw = gen.random((t_leaves, *counts)) < density
    mask = np.repeat(draw, t_group, axis=0)
    for ax, e in enumerate(edges):
        mask = np.repeat(mask, np.diff(e), axis=1 + ax)
    gamma.mask |= mask
    return gamma


@dataclass(eq=False)
class DecompositionResult:
    root: SubdivisionNode
    stopped: list[SubdivisionNode]
    parents: list[SubdivisionNode]
    residual: float
    gamma_measure: float
    base_measure: float
    mu: float
    max_level: int

    @property
    def root_occupancy(self) -> float:
        return self.root.occupancy

    def to_json(self) -> dict:
        return {
            "stopped_cubes": [n.to_json() for n in self.stopped],
            "residual": self.residual,
            "measures": {
                "gamma": self.gamma_measure,
                "base": self.base_measure,
                "root_occupancy": self.root_occupancy,
            },
            "mu": self.mu,
            "max_level": self.max_level,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def cz_decompose(gamma: GridSet, mu: float, max_level: int | None = None) -> DecompositionResult:
    """Stop subdivision at the first cube where Gamma occupies a mu-fraction.

    Recursion expands every child of a cube with occupancy below mu; children
    at or above mu are emitted as stopped cubes and not expanded.  A root at
    or above mu is returned as the single stopped cube.  The residual is the
    exact measure of Gamma outside the union of stopped cubes.
    """
    if not (0.0 < mu < 1.0):
        raise PreconditionError(f"mu must lie in (0, 1), got {mu}")
    base = gamma.base
    if not is_regular(base):
        raise PreconditionError("decomposition requires a regular base hypercube")
    depth = alignment_depth(gamma)
    if max_level is None:
        max_level = depth
    if max_level > depth:
        raise PreconditionError(
            f"max_level {max_level} exceeds grid alignment depth {depth}")

    grid = _GridArithmetic(gamma)
    n = base.dim
    boundary = tuple(bool(s == 0.0) for s in base.cube.center.s)
    root_ranges = ((0, gamma.m_t), *[(0, k) for k in gamma.shape[1:]])

    def occ(ranges) -> float:
        m = grid.box_measure(ranges)
        return grid.gamma_measure(ranges) / m if m > 0 else 0.0

    def make_node(level, t_rng, s_rngs, bnd) -> SubdivisionNode:
        rho = base.rho / 3 ** level
        centers = []
        for axis, ((a, b), is_b) in enumerate(zip(s_rngs, bnd)):
            if is_b:
                centers.append(0.0)
            else:
                e = gamma.s_edges(axis)
                centers.append(0.5 * (e[a] + e[b]))
        hc = hypercube(base.t0 + t_rng[0] * gamma.dt, base.theta, centers, rho)
        return SubdivisionNode(hc, level, occ((t_rng, *s_rngs)), t_rng, tuple(s_rngs), bnd)

    root = make_node(0, root_ranges[0], root_ranges[1:], boundary)
    stopped: list[SubdivisionNode] = []
    parents: list[SubdivisionNode] = []

    if root.occupancy >= mu:
        stopped.append(root)
    else:
        def expand(node: SubdivisionNode):
            ta, tb = node.t_cells
            step = (tb - ta) // 9
            t_ranges = [(ta + j * step, ta + (j + 1) * step) for j in range(9)]
            axis_parts = []
            for (a, b), is_b in zip(node.s_cells, node.boundary):
                w = b - a
                if is_b:
                    axis_parts.append([((a, a + w // 3), True), ((a + w // 3, b), False)])
                else:
                    axis_parts.append([((a + j * w // 3, a + (j + 1) * w // 3), False)
                                       for j in range(3)])
            saw_stopped = False
            for t_rng in t_ranges:
                for combo in itertools.product(*axis_parts):
                    s_rngs = [c[0] for c in combo]
                    bnd = tuple(c[1] for c in combo)
                    child = make_node(node.level + 1, t_rng, s_rngs, bnd)
                    node.children.append(child)
                    if child.occupancy >= mu:
                        stopped.append(child)
                        saw_stopped = True
                    elif child.level < max_level and child.occupancy > 0.0:
                        expand(child)
            if saw_stopped:
                parents.append(node)

        if max_level >= 1 and root.occupancy > 0.0:
            expand(root)

    covered = np.zeros(gamma.shape, dtype=bool)
    for node in stopped:
        sl = (slice(*node.t_cells), *[slice(a, b) for a, b in node.s_cells])
        covered[sl] = True
    residual = gamma.measure_of(gamma.mask & ~covered)

    return DecompositionResult(
        root=root, stopped=stopped, parents=parents, residual=residual,
        gamma_measure=grid.gamma_measure(root_ranges),
        base_measure=grid.box_measure(root_ranges), mu=mu, max_level=max_level)


# ---------------------------------------------------------------------------
# dilation sets
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DilationSets:
    """Rasterized unions of the two dilation boxes of a cube family.

    ``d1`` lives on the base grid (its boxes are clipped to the base
    hypercube); ``d2`` lives on a time-extended grid with ``n_back`` extra
    rows before the base's time origin.
    """

    gamma: GridSet
    d1: np.ndarray
    d2: np.ndarray
    n_back: int
    eta: float

    def d1_measure(self) -> float:
        return self.gamma.measure_of(self.d1)

    def _ext_measure(self, mask: np.ndarray) -> float:
        w = mask.astype(np.float64)
        for axis in reversed(range(self.gamma.base.dim)):
            w = np.tensordot(w, self.gamma.axis_weights(axis), axes=([-1], [0]))
        return float(np.sum(w) * self.gamma.dt)

    def d2_measure(self) -> float:
        return self._ext_measure(self.d2)

    def d2_inside_base(self) -> float:
        return self._ext_measure(self.d2[self.n_back:])

    def d2_outside_base(self) -> float:
        return self._ext_measure(self.d2[:self.n_back])


def _cell_range(lo: float, hi: float, origin: float, width: float, n_cells: int) -> tuple[int, int]:
    """Cells whose center lies in [lo, hi); exact for grid-aligned edges."""
    a = int(np.ceil((lo - origin) / width - 0.5))
    b = int(np.ceil((hi - origin) / width - 0.5))
    return max(a, 0), min(b, n_cells)


def _as_hypercube(obj) -> HyperCube:
    return obj.hypercube if isinstance(obj, SubdivisionNode) else obj


def build_dilations(family, gamma: GridSet, eta: float) -> DilationSets:
    """Union the per-cube dilation boxes and rasterize them onto the grid.

    For a cube at (t, x) of size rho, the first box is the base cube
    intersected with (t - 3*theta*rho^2, t + 4*theta*rho^2) x K(x, 3*rho);
    the second is (t - theta*rho^2 - 4*theta*rho^2/eta, t - theta*rho^2)
    crossed with K(x, 3*rho) clipped to the base's spatial cube.
    """
    if not (eta > 0.0):
        raise PreconditionError(f"eta must be positive, got {eta}")
    base = gamma.base
    cubes = [_as_hypercube(c) for c in family]
    theta = base.theta

    back = 0.0
    for q in cubes:
        ext = theta * q.rho ** 2
        back = max(back, base.t0 - (q.t0 - ext - 4.0 * ext / eta))
    n_back = int(np.ceil(back / gamma.dt - 1e-9)) if cubes else 0

    d1 = np.zeros(gamma.shape, dtype=bool)
    d2 = np.zeros((n_back + gamma.m_t, *gamma.shape[1:]), dtype=bool)

    base_lo, base_hi, _ = base.cube.s_bounds()
    dims = gamma.shape[1:]
    ds = [(hi - lo) / k for lo, hi, k in zip(base_lo, base_hi, dims)]
    t_origin_ext = base.t0 - n_back * gamma.dt

    for q in cubes:
        ext = theta * q.rho ** 2
        s_ranges = []
        for axis, s in enumerate(q.cube.center.s):
            r3 = 3.0 * q.rho
            s_lo = 0.0 if s <= r3 else s - r3
            s_ranges.append(_cell_range(s_lo, s + r3, base_lo[axis], ds[axis], dims[axis]))
        sl_sp = tuple(slice(a, b) for a, b in s_ranges)

        ta, tb = _cell_range(q.t0 - 3.0 * ext, q.t0 + 4.0 * ext,
                             base.t0, gamma.dt, gamma.m_t)
        d1[(slice(ta, tb), *sl_sp)] = True

        ta, tb = _cell_range(q.t0 - ext - 4.0 * ext / eta, q.t0 - ext,
                             t_origin_ext, gamma.dt, n_back + gamma.m_t)
        d2[(slice(ta, tb), *sl_sp)] = True

    return DilationSets(gamma=gamma, d1=d1, d2=d2, n_back=n_back, eta=eta)


# ---------------------------------------------------------------------------
# verification of the covering statements
# ---------------------------------------------------------------------------

_REL_SLACK = 1e-9


def verify_a(gamma: GridSet, mu: float, max_level: int | None = None) -> tuple[bool, dict]:
    """Check |Gamma| <= mu * |D1| for the dilated parent family.

    Precondition: |Gamma| <= mu * |base|.  The dilation family is the set of
    parents of stopped cubes (each parent sits inside its own dilation box),
    or the root itself when the root is already stopped.
    """
    gm = gamma.measure()
    qm = gamma.base.measure()
    if gm > mu * qm * (1.0 + _REL_SLACK):
        raise PreconditionError(
            f"verify_a requires |Gamma| <= mu|Q|; got {gm} > {mu * qm}")
    result = cz_decompose(gamma, mu, max_level)
    family = result.parents if result.parents else result.stopped
    if not family:
        return True, {"gamma": gm, "d1": 0.0, "base": qm, "n_cubes": 0}
    dil = build_dilations(family, gamma, eta=1.0)
    d1 = dil.d1_measure()
    ok = gm <= mu * d1 * (1.0 + _REL_SLACK) + 1e-15
    return bool(ok), {"gamma": gm, "d1": d1, "base": qm, "n_cubes": len(family)}


def verify_b(family, gamma: GridSet, eta: float) -> tuple[bool, float, dict]:
    """Check |D1| <= (1 + eta) * |D2| up to rasterization slack."""
    dil = build_dilations(family, gamma, eta)
    d1, d2 = dil.d1_measure(), dil.d2_measure()
    tol = 2.0 / gamma.spatial_resolution()
    if d2 == 0.0:
        return d1 == 0.0, (np.inf if d1 > 0 else 0.0), {"d1": d1, "d2": d2, "tol": tol}
    ratio = d1 / ((1.0 + eta) * d2)
    return bool(ratio <= 1.0 + tol), float(ratio), {"d1": d1, "d2": d2, "tol": tol}


@dataclass(eq=False)
class DichotomyReport:
    branch: int
    eta: float
    mu: float
    mu_prime: float
    d2_in_base: float
    d2_out_base: float
    branch1_bound: float
    rho_bound: float
    cube: SubdivisionNode | None

    def to_json(self) -> dict:
        out = {
            "branch": self.branch,
            "eta": self.eta,
            "mu": self.mu,
            "mu_prime": self.mu_prime,
            "d2_in_base": self.d2_in_base,
            "d2_out_base": self.d2_out_base,
            "branch1_bound": self.branch1_bound,
            "rho_bound": self.rho_bound,
        }
        if self.cube is not None:
            out["cube"] = self.cube.to_json()
        return out


def dichotomy(gamma: GridSet, mu_prime: float, mu: float,
              max_level: int | None = None) -> DichotomyReport:
    """Certify one horn of the measure dichotomy.

    Either the part of D2 inside the base has measure at least
    mu**(-1/4) * mu' * |base| (branch 1), or some stopped cube of occupancy
    >= mu has size at least (1 - sqrt(mu)) * sqrt(mu') / 4 relative to the
    base (branch 2).  Exactly one branch is asserted: branch 1 whenever its
    measured inequality holds, branch 2 otherwise.
    """
    if not (0.0 < mu_prime < mu < 1.0):
        raise PreconditionError(f"need 0 < mu' < mu < 1, got {mu_prime}, {mu}")
    gm = gamma.measure()
    qm = gamma.base.measure()
    if gm < mu_prime * qm * (1.0 - _REL_SLACK):
        raise PreconditionError(
            f"dichotomy requires |Gamma| >= mu'|Q|; got {gm} < {mu_prime * qm}")

    eta = mu ** -0.25 - 1.0
    rho_bound = 0.25 * (1.0 - np.sqrt(mu)) * np.sqrt(mu_prime) * gamma.base.rho
    result = cz_decompose(gamma, mu, max_level)

    if result.root_occupancy >= mu:
        return DichotomyReport(branch=2, eta=eta, mu=mu, mu_prime=mu_prime,
                               d2_in_base=np.nan, d2_out_base=np.nan,
                               branch1_bound=mu ** -0.25 * mu_prime * qm,
                               rho_bound=rho_bound, cube=result.root)

    dil = build_dilations(result.stopped, gamma, eta)
    d2_in = dil.d2_inside_base()
    d2_out = dil.d2_outside_base()
    bound1 = mu ** -0.25 * mu_prime * qm

    if d2_in >= bound1:
        return DichotomyReport(branch=1, eta=eta, mu=mu, mu_prime=mu_prime,
                               d2_in_base=d2_in, d2_out_base=d2_out,
                               branch1_bound=bound1, rho_bound=rho_bound, cube=None)

    big = [n for n in result.stopped if n.rho >= rho_bound * (1.0 - _REL_SLACK)]
    if not big:
        raise DecompositionError(
            "neither dichotomy branch certifiable: no stopped cube of size "
            f">= {rho_bound} and |D2 in base| = {d2_in} < {bound1}")
    cube = max(big, key=lambda n: (n.rho, -n.t_cells[0]))
    return DichotomyReport(branch=2, eta=eta, mu=mu, mu_prime=mu_prime,
                           d2_in_base=d2_in, d2_out_base=d2_out,
                           branch1_bound=bound1, rho_bound=rho_bound, cube=cube)
