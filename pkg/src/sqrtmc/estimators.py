"""Monte Carlo estimators and statistical checks for the orthant diffusion.

Hitting probabilities with Wilson intervals, stopped Feynman-Kac values,
oscillation-decay and Holder-modulus fits, martingale (Dynkin) checks,
ergodic time averages with Wasserstein diagnostics, and tail tables.

Conventions fixed here once:

* Probability estimates carry Wilson 95% intervals (valid near 0 and 1);
  mean-type estimates carry normal intervals with the sample standard error.
* The Feynman-Kac pair (u, f) satisfies Lu + f = 0: the value read off a
  stopped path is g at the stop plus the running integral of f, and the
  martingale check therefore integrates minus the generator of its probe.
* All estimators key their randomness by absolute path index, so reports
  are reproducible for any worker count.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from . import kernels, parallel, rng
from .coeffs import (CoefficientField, SmoothProbe, check_inv_conditions,
                     generator_apply)
from .geometry import AnisoCube, GeometryError, HyperCube, SqrtPoint
from .gridset import GridSet
from .sde import (BatchStepper, Scheme, SimConfig, exact_cir_vector_step,
                  simulate_stopped_batch)

SCHEMA_VERSION = 1
_Z95 = 1.959963984540054
_sum_lock = threading.Lock()


class EstimatorError(ValueError):
    pass


class InsufficientDataError(EstimatorError):
    pass


def wilson_interval(successes: int, n: int, z: float = _Z95) -> tuple[float, float]:
    if n <= 0:
        raise EstimatorError("need at least one path")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1.0 - p) / n + z * z / (4 * n * n)) / denom
    return float(max(0.0, center - half)), float(min(1.0, center + half))


@dataclass(frozen=True)
class EstimateReport:
    """Binomial point estimate with Wilson 95% interval."""

    estimate: float
    ci_low: float
    ci_high: float
    n_paths: int
    n_hits: int
    seed: int
    meta: dict = dc_field(default_factory=dict)

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "type": "estimate",
                "estimate": self.estimate, "ci_low": self.ci_low,
                "ci_high": self.ci_high, "n_paths": self.n_paths,
                "n_hits": self.n_hits, "seed": self.seed, "meta": self.meta}


@dataclass(frozen=True)
class ValueReport:
    """Mean estimate with standard error and normal 95% interval."""

    estimate: float
    se: float
    ci_low: float
    ci_high: float
    n_paths: int
    seed: int
    meta: dict = dc_field(default_factory=dict)

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "type": "value",
                "estimate": self.estimate, "se": self.se, "ci_low": self.ci_low,
                "ci_high": self.ci_high, "n_paths": self.n_paths,
                "seed": self.seed, "meta": self.meta}


def _binomial_report(hits: int, n: int, seed: int, **meta) -> EstimateReport:
    lo, hi = wilson_interval(hits, n)
    return EstimateReport(estimate=hits / n, ci_low=lo, ci_high=hi,
                          n_paths=n, n_hits=hits, seed=seed, meta=meta)


# ---------------------------------------------------------------------------
# hitting probabilities
# ---------------------------------------------------------------------------

def est_hit_prob(field: CoefficientField, q: HyperCube, gamma: GridSet | None,
                 start: tuple[float, np.ndarray], n_paths: int, h: float,
                 seed: int, workers: int = 1,
                 stream_label: int = rng.LABEL_EULER) -> EstimateReport:
    """P[path hits the target before leaving the hypercube]."""
    cfg = SimConfig(h=h, horizon=q.time_extent, seed=seed,
                    path_count=n_paths, workers=workers)
    kind, _, _ = simulate_stopped_batch(cfg, field, q, gamma, start, stream_label)
    hits = int(np.sum(kind == kernels.STOP_HIT))
    return _binomial_report(hits, n_paths, seed, start_t=start[0],
                            start_x=np.asarray(start[1]).tolist())


def start_grid(cube: AnisoCube, points_per_axis: int = 3,
               margin: float = 0.95) -> list[np.ndarray]:
    """Deterministic start points spanning the cube, including the corner
    s = 0 on every boundary axis."""
    lo, hi, boundary = cube.s_bounds()
    axes = []
    for a, b, is_b in zip(lo, hi, boundary):
        if is_b:
            axes.append(np.linspace(0.0, margin * (b - a), points_per_axis))
        else:
            c = 0.5 * (a + b)
            half = margin * 0.5 * (b - a)
            axes.append(np.linspace(c - half, c + half, points_per_axis))
    return [np.array([s * s for s in combo])
            for combo in itertools.product(*axes)]


def est_uniform_hit(field: CoefficientField, q: HyperCube, gamma: GridSet | None,
                    n_paths: int, h: float, seed: int, workers: int = 1,
                    points_per_axis: int = 3, t_start: float | None = None,
                    starts: Sequence[np.ndarray] | None = None,
                    ) -> tuple[dict, list[dict]]:
    """Hitting-probability sweep over a start grid in K(x0, rho/6).

    Returns the minimum Wilson lower bound over the grid (the desk-scale
    stand-in for a uniform positive constant) plus the per-start table.
    """
    small = AnisoCube(q.cube.center, q.rho / 6.0)
    t0 = q.t0 if t_start is None else t_start
    table = []
    if starts is None:
        starts = start_grid(small, points_per_axis)
    for i, x in enumerate(starts):
        if not small.contains(SqrtPoint.from_x(x)):
            raise EstimatorError(f"start {x} outside K(x0, rho/6)")
        rep = est_hit_prob(field, q, gamma, (t0, x), n_paths, h, seed,
                           workers, stream_label=rng.LABEL_EULER + 16 + i)
        table.append({"start": x.tolist(), "estimate": rep.estimate,
                      "ci_low": rep.ci_low, "ci_high": rep.ci_high})
    min_row = min(table, key=lambda r: r["ci_low"])
    summary = {"min_lower_bound": min_row["ci_low"],
               "argmin_start": min_row["start"], "n_starts": len(table),
               "n_paths": n_paths, "seed": seed}
    return summary, table


def est_small_cube(field: CoefficientField, q1: HyperCube, x: np.ndarray,
                   l: float, c: float, t: float, y: np.ndarray,
                   n_paths: int, h: float, seed: int, *,
                   beta: float, r: float, eps: float, alpha: float,
                   workers: int = 1) -> EstimateReport:
    """P[X_t lands in K(x, 3cl/4) without leaving the unit hypercube first].

    The start y must lie in K(x, beta*l) ∩ K(x0, r) and t in
    [eps*l^2, alpha*l^2].  The report records which variant's preconditions
    held: 'interior' when c*l <= min_i sqrt(x_i), 'general' otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (0.0 < c <= 1.0 and beta > 1.0 and alpha > eps > 0.0 and 0.5 <= r < 1.0):
        raise EstimatorError("parameter constraints violated")
    if not (0.0 < l < 1.0):
        raise EstimatorError(f"cube size l must lie in (0, 1), got {l}")
    sp_x = SqrtPoint.from_x(x)
    inner = AnisoCube(sp_x, l)
    lo_i, hi_i, _ = inner.s_bounds()
    lo_o, hi_o, _ = q1.cube.s_bounds()
    if np.any(lo_i < lo_o) or np.any(hi_i > hi_o):
        raise EstimatorError("K(x, l) is not contained in the base cube")
    if not (eps * l * l <= t <= alpha * l * l):
        raise EstimatorError(f"t={t} outside [eps l^2, alpha l^2]")
    if not AnisoCube(sp_x, beta * l).contains(SqrtPoint.from_x(y)):
        raise EstimatorError("start y outside K(x, beta l)")
    if not AnisoCube(q1.cube.center, r).contains(SqrtPoint.from_x(y)):
        raise EstimatorError("start y outside K(x0, r)")
    variant = "interior" if c * l <= float(np.min(np.sqrt(x))) else "general"

    target = AnisoCube(sp_x, 0.75 * c * l)
    t_lo, t_hi, _ = target.s_bounds()
    cfg = SimConfig(h=h, horizon=q1.time_extent, seed=seed,
                    path_count=n_paths, workers=workers)
    clipped = _clip_time(q1, t)
    kind, _, x_stop = simulate_stopped_batch(cfg, field, clipped, None, (q1.t0, y),
                                             stream_label=rng.LABEL_EULER + 8)
    s_stop = np.sqrt(x_stop)
    in_target = np.all((s_stop >= t_lo) & (s_stop < t_hi), axis=1)
    good = (kind == kernels.STOP_HORIZON) & in_target
    return _binomial_report(int(np.sum(good)), n_paths, seed,
                            variant=variant, t=t, l=l, c=c)


def _clip_time(q: HyperCube, t_end: float) -> HyperCube:
    """Same spatial cube, time clipped to [t0, t0 + t_end)."""
    if not (0.0 < t_end <= q.time_extent):
        raise EstimatorError("clip time outside the hypercube's extent")
    theta = q.theta * t_end / q.time_extent
    from .geometry import hypercube
    return hypercube(q.t0, theta, q.cube.center.s.tolist(), q.rho)


# ---------------------------------------------------------------------------
# Feynman-Kac evaluation
# ---------------------------------------------------------------------------

def feynman_kac_eval(field: CoefficientField, q: HyperCube,
                     g: Callable[[float, np.ndarray], np.ndarray],
                     f: Callable[[float, np.ndarray], np.ndarray] | None,
                     point: tuple[float, np.ndarray], n_paths: int, h: float,
                     seed: int, workers: int = 1,
                     stream_label: int = rng.LABEL_EULER + 32) -> ValueReport:
    """u(t, x) = E[g(tau, X_tau)] + E[int_t^tau f(r, X_r) dr], tau the first
    exit from the hypercube (side faces or time end)."""
    t_start, x_start = point
    x_start = np.asarray(x_start, dtype=np.float64)
    if not q.contains(t_start, SqrtPoint.from_x(x_start)):
        raise EstimatorError(f"evaluation point ({t_start}, {x_start}) outside the hypercube")

    key = rng.stream_key(seed, stream_label)
    stepper = BatchStepper(field)
    lo, hi, _ = q.cube.s_bounds()
    t_end = q.t_end
    values = np.empty(n_paths, dtype=np.float64)

    def worker(block, sl):
        ids = np.arange(sl.start, sl.stop, dtype=np.uint64)
        m = ids.size
        xcur = np.array(np.broadcast_to(x_start, (m, field.dim)))
        integral = np.zeros(m)
        val = np.zeros(m)
        active = np.ones(m, dtype=bool)
        n_steps = max(1, int(np.ceil((t_end - t_start) / h - 1e-9)))
        for k in range(n_steps):
            rows = np.flatnonzero(active)
            if rows.size == 0:
                break
            t_now = t_start + k * h
            if f is not None:
                integral[rows] += h * np.asarray(f(t_now, xcur[rows]), dtype=np.float64)
            t_next = t_start + (k + 1) * h
            xcur[rows] = stepper.step(xcur[rows], stepper.normals(key, ids[rows], k), h)
            xa = xcur[rows]
            if k == n_steps - 1:
                stop_t = min(t_next, t_end)
                val[rows] = np.asarray(g(stop_t, xa), dtype=np.float64) + integral[rows]
                active[rows] = False
            else:
                s = np.sqrt(xa)
                out = ~np.all((s >= lo) & (s < hi), axis=1)
                if np.any(out):
                    sel = rows[out]
                    val[sel] = np.asarray(g(t_next, xa[out]), dtype=np.float64) + integral[sel]
                    active[sel] = False
        values[sl] = val

    parallel.run_blocks(n_paths, worker, workers)
    est = float(np.mean(values))
    se = float(np.std(values, ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return ValueReport(estimate=est, se=se, ci_low=est - _Z95 * se,
                       ci_high=est + _Z95 * se, n_paths=n_paths, seed=seed,
                       meta={"t": t_start, "x": x_start.tolist()})


# ---------------------------------------------------------------------------
# oscillation decay and Holder fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OscReport:
    scales: list[float]
    osc: list[float]
    osc_se: list[float]
    nu_hat: float | None
    alpha_hat: float | None
    c_hat: float | None
    r_squared: float | None
    status: str
    seed: int

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "type": "osc_decay",
                "scales": self.scales, "osc": self.osc, "osc_se": self.osc_se,
                "nu_hat": self.nu_hat, "alpha_hat": self.alpha_hat,
                "c_hat": self.c_hat, "r_squared": self.r_squared,
                "status": self.status, "seed": self.seed}


def _eval_grid(q: HyperCube, points_per_axis: int) -> list[tuple[float, np.ndarray]]:
    """Deterministic evaluation points: uniform fractions of the (t, s) box,
    corners in sqrt-coordinates included (pulled 5% inside the open faces)."""
    fr = np.linspace(0.05, 0.95, points_per_axis)
    lo, hi, _ = q.cube.s_bounds()
    t_vals = q.t0 + fr * q.time_extent
    axes = [lo[i] + fr * (hi[i] - lo[i]) for i in range(q.dim)]
    pts = []
    for t in t_vals:
        for combo in itertools.product(*axes):
            s = np.asarray(combo)
            pts.append((float(t), s * s))
    return pts


def est_osc_decay(field: CoefficientField, cubes: Sequence[HyperCube],
                  g, f, n_paths: int, h: float, seed: int, workers: int = 1,
                  points_per_axis: int = 4) -> OscReport:
    """Oscillation of the stopped-boundary-value function over nested cubes.

    The function is defined once, on the largest cube, and evaluated by
    Feynman-Kac runs from each grid point of every sub-cube; the per-scale
    oscillation is max - min over that sub-cube's grid.  The decay exponent
    is the least-squares slope of log osc against log scale; nu_hat is the
    one-step contraction read off a scale pair with ratio 6 when present.
    """
    cubes = list(cubes)
    if len(cubes) < 2:
        raise EstimatorError("need at least two nested cubes")
    big = cubes[0]
    for small in cubes[1:]:
        if small.rho >= big.rho:
            raise EstimatorError("cubes must be ordered largest first")

    f_sup = 0.0
    osc, osc_se = [], []
    label = rng.LABEL_EULER + 64
    for ci, q in enumerate(cubes):
        vals, ses = [], []
        for pi, point in enumerate(_eval_grid(q, points_per_axis)):
            rep = feynman_kac_eval(field, big, g, f, point, n_paths, h, seed,
                                   workers, stream_label=label + 1024 * ci + pi)
            vals.append(rep.estimate)
            ses.append(rep.se)
            if f is not None:
                f_sup = max(f_sup, float(np.max(np.abs(f(point[0],
                            point[1][None, :])))))
        osc.append(float(np.max(vals) - np.min(vals)))
        osc_se.append(float(np.median(ses)))

    noise_floor = 3.0 * float(np.median(osc_se))
    usable = [(q.rho, o) for q, o in zip(cubes, osc) if o > noise_floor]
    if len(usable) < 2:
        return OscReport([q.rho for q in cubes], osc, osc_se, None, None, None,
                         None, "inconclusive", seed)

    nu_hat = None
    for qa, oa in zip(cubes, osc):
        for qb, ob in zip(cubes, osc):
            if abs(qa.rho / qb.rho - 6.0) < 1e-9 and oa > noise_floor:
                nu_hat = (ob - qa.rho ** 2 * f_sup) / oa

    lr = np.log([r for r, _ in usable])
    lo_ = np.log([o for _, o in usable])
    slope, intercept = np.polyfit(lr, lo_, 1)
    pred = slope * lr + intercept
    ss_res = float(np.sum((lo_ - pred) ** 2))
    ss_tot = float(np.sum((lo_ - np.mean(lo_)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else None
    return OscReport([q.rho for q in cubes], osc, osc_se, nu_hat,
                     float(slope), float(np.exp(intercept)), r2, "ok", seed)


@dataclass(frozen=True)
class HolderFit:
    alpha_hat: float
    c_hat: float
    n_pairs: int
    residual_rms: float

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "type": "holder_fit",
                "alpha_hat": self.alpha_hat, "c_hat": self.c_hat,
                "n_pairs": self.n_pairs, "residual_rms": self.residual_rms}


def fit_holder(values: Sequence[tuple[float, np.ndarray, float]],
               noise_floor: float = 0.0) -> HolderFit:
    """Least-squares modulus fit over point pairs.

    ``values`` holds (t, x, u) triples; the regression is log|u_i - u_j|
    against log(|t_i - t_j|^(1/2) + max_k |sqrt(x_i) - sqrt(x_j)|_k) over
    pairs whose value difference exceeds the noise floor.
    """
    xs, ys = [], []
    for (t1, x1, u1), (t2, x2, u2) in itertools.combinations(values, 2):
        du = abs(u1 - u2)
        d = np.sqrt(abs(t1 - t2)) + float(np.max(np.abs(np.sqrt(x1) - np.sqrt(x2))))
        if du > noise_floor and d > 0.0:
            xs.append(np.log(d))
            ys.append(np.log(du))
    if len(xs) < 4:
        raise InsufficientDataError(f"only {len(xs)} usable pairs (need >= 4)")
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = np.asarray(ys) - (slope * np.asarray(xs) + intercept)
    return HolderFit(alpha_hat=float(slope), c_hat=float(np.exp(intercept)),
                     n_pairs=len(xs), residual_rms=float(np.sqrt(np.mean(resid ** 2))))


# ---------------------------------------------------------------------------
# martingale (Dynkin) check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MartingaleReport:
    checkpoints: list[float]
    deviations: list[float]
    ses: list[float]
    max_deviation: float
    max_dev_se: float
    passed: bool
    seed: int

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "type": "martingale",
                "checkpoints": self.checkpoints, "deviations": self.deviations,
                "ses": self.ses, "max_deviation": self.max_deviation,
                "max_dev_se": self.max_dev_se, "passed": self.passed,
                "seed": self.seed}


def martingale_check(field: CoefficientField, u_batch, source_batch,
                     q: HyperCube, start: tuple[float, np.ndarray],
                     checkpoints: Sequence[float], n_paths: int, h: float,
                     seed: int, workers: int = 1,
                     probe: SmoothProbe | None = None) -> MartingaleReport:
    """Deviation of E[u(t + s^tau, X_{s^tau}) + int_0^{s^tau} source] from
    its start value across checkpoints; a stopped-path martingale when
    source = -Lu.  Pass iff the worst deviation stays below 4 standard
    errors.  ``u_batch(t, X)`` and ``source_batch(t, X)`` are vectorized;
    when a SmoothProbe is supplied, source_batch is cross-checked against
    the generator at the start point.
    """
    t_start, x_start = start
    x_start = np.asarray(x_start, dtype=np.float64)
    if probe is not None and source_batch is not None:
        want = -generator_apply(field, probe, t_start, x_start)
        got = float(source_batch(t_start, x_start[None, :])[0])
        if abs(want - got) > 1e-8 * (1.0 + abs(want)):
            raise EstimatorError("source_batch disagrees with -generator(probe)")

    checkpoints = sorted(float(s) for s in checkpoints)
    if not checkpoints or checkpoints[0] <= 0:
        raise EstimatorError("checkpoints must be positive")
    if t_start + checkpoints[-1] > q.t_end + 1e-12:
        raise EstimatorError("checkpoints extend past the hypercube horizon")

    key = rng.stream_key(seed, rng.LABEL_EULER + 96)
    stepper = BatchStepper(field)
    lo, hi, _ = q.cube.s_bounds()
    ckpt_steps = [int(round(s / h)) for s in checkpoints]
    if len(set(ckpt_steps)) != len(ckpt_steps):
        raise EstimatorError("checkpoints collide on the step grid")
    n_steps = ckpt_steps[-1]
    n_blocks = len(rng.block_slices(n_paths))
    block_sums = np.zeros((n_blocks, len(checkpoints), 2))

    def worker(block, sl):
        ids = np.arange(sl.start, sl.stop, dtype=np.uint64)
        m = ids.size
        x = np.array(np.broadcast_to(x_start, (m, field.dim)))
        integral = np.zeros(m)
        frozen_val = np.zeros(m)
        active = np.ones(m, dtype=bool)
        local = np.zeros((len(checkpoints), 2))
        for k in range(n_steps):
            rows = np.flatnonzero(active)
            if rows.size:
                t_now = t_start + k * h
                if source_batch is not None:
                    integral[rows] += h * np.asarray(
                        source_batch(t_now, x[rows]), dtype=np.float64)
                x[rows] = stepper.step(x[rows], stepper.normals(key, ids[rows], k), h)
                t_next = t_start + (k + 1) * h
                s = np.sqrt(x[rows])
                out = ~np.all((s >= lo) & (s < hi), axis=1)
                if np.any(out):
                    sel = rows[out]
                    frozen_val[sel] = (np.asarray(u_batch(t_next, x[sel]),
                                                  dtype=np.float64) + integral[sel])
                    active[sel] = False
            if k + 1 in ckpt_steps:
                j = ckpt_steps.index(k + 1)
                t_next = t_start + (k + 1) * h
                vals = frozen_val.copy()
                if np.any(active):
                    vals[active] = (np.asarray(u_batch(t_next, x[active]),
                                               dtype=np.float64) + integral[active])
                local[j, 0] = np.sum(vals)
                local[j, 1] = np.sum(vals * vals)
        block_sums[block] = local

    parallel.run_blocks(n_paths, worker, workers)
    m0 = float(u_batch(t_start, x_start[None, :])[0])
    sums = block_sums[:, :, 0].sum(axis=0)
    sums_sq = block_sums[:, :, 1].sum(axis=0)
    means = sums / n_paths
    variances = np.maximum(sums_sq / n_paths - means ** 2, 0.0)
    ses = np.sqrt(variances / n_paths)
    deviations = np.abs(means - m0)
    worst = int(np.argmax(deviations))
    passed = bool(deviations[worst] < 4.0 * ses[worst])
    return MartingaleReport(checkpoints=list(checkpoints),
                            deviations=deviations.tolist(), ses=ses.tolist(),
                            max_deviation=float(deviations[worst]),
                            max_dev_se=float(ses[worst]), passed=passed, seed=seed)


# ---------------------------------------------------------------------------
# invariant measure and tails
# ---------------------------------------------------------------------------

def wasserstein1(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 1-d W1 distance between empirical laws (sorted-sample form)."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.concatenate((a, b))
    grid.sort()
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.sum(np.abs(fa - fb)[:-1] * np.diff(grid)))


def wasserstein1_nd(a: np.ndarray, b: np.ndarray) -> float:
    """Max over coordinates of per-coordinate W1 (a lower bound in n > 1)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return max(wasserstein1(a[:, i], b[:, i]) for i in range(a.shape[1]))


def _batch_means_se(samples: np.ndarray, n_batches: int = 32) -> float:
    k = samples.size
    if k < 2 * n_batches:
        return float(np.std(samples, ddof=1) / np.sqrt(k))
    size = k // n_batches
    means = samples[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(n_batches))


@dataclass(frozen=True)
class InvariantReport:
    starts: list[list[float]]
    means: list[list[float]]
    variances: list[list[float]]
    quantiles: dict
    mean_se: list[float]
    w1_pairwise: list[list[float]]
    w1_reference: float | None
    burn_in: float
    horizon: float
    thinning: float
    n_samples: int
    seed: int

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "type": "invariant",
                "starts": self.starts, "means": self.means,
                "variances": self.variances, "quantiles": self.quantiles,
                "mean_se": self.mean_se, "w1_pairwise": self.w1_pairwise,
                "w1_reference": self.w1_reference, "burn_in": self.burn_in,
                "horizon": self.horizon, "thinning": self.thinning,
                "n_samples": self.n_samples, "seed": self.seed}


def est_invariant(field: CoefficientField, burn_in: float, horizon: float,
                  thinning: float, starts: Sequence[np.ndarray], seed: int,
                  h: float = 1e-3, reference: np.ndarray | None = None,
                  check_points: np.ndarray | None = None) -> InvariantReport:
    """Long-run time averages per start (Krylov-Bogoliubov style), with
    pairwise W1 distances between the empirical laws as the uniqueness
    diagnostic.  Uses the exact sampler for decoupled square-root presets,
    full-truncation Euler otherwise."""
    if not (horizon > burn_in >= 0.0 and thinning > 0.0):
        raise EstimatorError("need horizon > burn_in >= 0 and thinning > 0")
    if check_points is None:
        check_points = np.linspace(0.0, 10.0, 21)[:, None] * np.ones(field.dim)
    cond = check_inv_conditions(field, check_points)
    if not cond.passed:
        raise EstimatorError(f"field violates invariant-measure bounds: {cond.margins}")

    n_samples = int(np.floor((horizon - burn_in) / thinning))
    if n_samples < 2:
        raise EstimatorError("horizon too short for the requested thinning")
    per_start = []
    for si, x0 in enumerate(starts):
        x0 = np.asarray(x0, dtype=np.float64)
        gen = rng.block_generator(seed, rng.LABEL_EXACT, 1000 + si)
        samples = np.empty((n_samples, field.dim))
        x = x0[None, :].copy()
        if field.kind == "cir":
            x = exact_cir_vector_step(field, x, burn_in, gen) if burn_in > 0 else x
            for k in range(n_samples):
                x = exact_cir_vector_step(field, x, thinning, gen)
                samples[k] = x[0]
        else:
            stepper = BatchStepper(field)
            key = rng.stream_key(seed, rng.LABEL_EULER + 128 + si)
            steps_per = max(1, int(round(thinning / h)))
            burn_steps = int(round(burn_in / h))
            ids = np.array([0], dtype=np.uint64)
            kk = 0
            for _ in range(burn_steps):
                x = stepper.step(x, stepper.normals(key, ids, kk), h)
                kk += 1
            for k in range(n_samples):
                for _ in range(steps_per):
                    x = stepper.step(x, stepper.normals(key, ids, kk), h)
                    kk += 1
                samples[k] = x[0]
        per_start.append(samples)

    means = [s.mean(axis=0).tolist() for s in per_start]
    variances = [s.var(axis=0, ddof=1).tolist() for s in per_start]
    mean_se = [_batch_means_se(s[:, 0]) for s in per_start]
    qs = [0.05, 0.25, 0.5, 0.75, 0.95]
    quantiles = {str(q): [np.quantile(s[:, 0], q) for s in per_start] for q in qs}
    w1 = [[wasserstein1_nd(a, b) for b in per_start] for a in per_start]
    w1_ref = None
    if reference is not None:
        ref = np.asarray(reference, dtype=np.float64)
        ref = ref[:, None] if ref.ndim == 1 else ref
        w1_ref = max(wasserstein1_nd(s, ref) for s in per_start)
    return InvariantReport(
        starts=[np.asarray(s).tolist() for s in starts], means=means,
        variances=variances, quantiles=quantiles, mean_se=mean_se,
        w1_pairwise=w1, w1_reference=w1_ref, burn_in=burn_in, horizon=horizon,
        thinning=thinning, n_samples=n_samples, seed=seed)


@dataclass(frozen=True)
class TailReport:
    level: float
    times: list[float]
    probabilities: list[float]
    ses: list[float]
    sup_probability: float
    n_paths: int
    seed: int

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "type": "tail",
                "level": self.level, "times": self.times,
                "probabilities": self.probabilities, "ses": self.ses,
                "sup_probability": self.sup_probability,
                "n_paths": self.n_paths, "seed": self.seed}


def tail_check(field: CoefficientField, start: np.ndarray, level: float,
               t_grid: Sequence[float], n_paths: int, seed: int,
               h: float = 1e-3, workers: int = 1) -> TailReport:
    """Empirical exceedance table P[|X_t| > level] over a time grid."""
    t_grid = sorted(float(t) for t in t_grid)
    if t_grid and t_grid[0] <= 0:
        raise EstimatorError("grid times must be positive")
    x0 = np.asarray(start, dtype=np.float64)
    probs = np.zeros(len(t_grid))

    if field.kind == "cir":
        exceed = np.zeros(len(t_grid))

        def worker(block, sl):
            gen = rng.block_generator(seed, rng.LABEL_EXACT, 2000 + block)
            m = sl.stop - sl.start
            x = np.array(np.broadcast_to(x0, (m, field.dim)))
            prev = 0.0
            for j, t in enumerate(t_grid):
                x = exact_cir_vector_step(field, x, t - prev, gen)
                prev = t
                with _sum_lock:
                    exceed[j] += np.sum(np.linalg.norm(x, axis=1) > level)

        parallel.run_blocks(n_paths, worker, workers)
        probs = exceed / n_paths
    else:
        from .sde import sample_marginal
        for j, t in enumerate(t_grid):
            cfg = SimConfig(h=h, horizon=t, seed=seed, path_count=n_paths,
                            workers=workers)
            x = sample_marginal(cfg, field, t, x0,
                                stream_label=rng.LABEL_EULER + 160 + j)
            probs[j] = float(np.mean(np.linalg.norm(x, axis=1) > level))

    ses = np.sqrt(np.maximum(probs * (1 - probs), 1e-300) / n_paths)
    return TailReport(level=level, times=list(t_grid),
                      probabilities=probs.tolist(), ses=ses.tolist(),
                      sup_probability=float(np.max(probs)) if t_grid else 0.0,
                      n_paths=n_paths, seed=seed)
