"""Boundary-safe path simulation and first-hit/first-exit detection.

Two schemes: full-truncation Euler (any coefficient field; negative
excursions are clamped to zero after the full update) and exact transition
sampling for decoupled mean-reverting square-root models, realized as a
Poisson-mixed Gamma draw from the noncentral chi-square law.  The exact
sampler is the oracle the Euler scheme is validated against.

Hit/exit events are detected at grid times only: at each time the hit test
runs before the exit test, the time horizon is classified separately, and an
exiting path's recorded state is the first grid state outside the cube.  The
resulting O(sqrt(h)) stopping bias is a documented property of the method,
not of any particular backend.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import kernels, parallel, rng
from .coeffs import CoefficientField
from .geometry import GeometryError, HyperCube, SqrtPoint
from .gridset import GridSet


class Scheme(str, Enum):
    FT_EULER = "full-truncation-euler"
    EXACT_CIR = "exact-cir"


class StopKind(str, Enum):
    HIT = "hit"
    EXIT = "exit"
    HORIZON = "horizon"


_KIND_BY_CODE = {kernels.STOP_HORIZON: StopKind.HORIZON,
                 kernels.STOP_HIT: StopKind.HIT,
                 kernels.STOP_EXIT: StopKind.EXIT}


@dataclass(frozen=True)
class SimConfig:
    h: float
    horizon: float
    scheme: Scheme = Scheme.FT_EULER
    seed: int = 0
    path_count: int = 1
    workers: int = 1

    def __post_init__(self):
        if not (self.h > 0.0 and self.horizon >= self.h):
            raise GeometryError("need 0 < h <= horizon")
        if self.path_count < 1 or self.workers < 1:
            raise GeometryError("path_count and workers must be >= 1")


@dataclass(frozen=True)
class StoppedSample:
    stop_kind: StopKind
    stop_time: float
    stop_state: np.ndarray
    path_id: int


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray   # (k+1,)
    states: np.ndarray  # (k+1, paths, n)

    def __post_init__(self):
        if np.any(self.states < 0.0):
            raise GeometryError("trajectory left the orthant")


# ---------------------------------------------------------------------------
# single-step operations
# ---------------------------------------------------------------------------

def step_ft_euler(state: np.ndarray, field: CoefficientField, h: float,
                  normals: np.ndarray) -> np.ndarray:
    """One full-truncation Euler update of a single state."""
    x = np.asarray(state, dtype=np.float64)
    if np.any(x < 0.0):
        raise GeometryError("state must lie in the orthant")
    z = np.asarray(normals, dtype=np.float64)
    sig = np.asarray(field.sigma(x), dtype=np.float64)
    drift = np.asarray(field.b(x), dtype=np.float64)
    out = x + drift * h + np.sqrt(x) * (sig @ z) * np.sqrt(h)
    return np.maximum(out, 0.0)


def exact_cir_step(x, kappa: float, m: float, sigma2: float, h: float,
                   gen: np.random.Generator):
    """Exact transition draw of dX = kappa (m - X) dt + sqrt(sigma2 X) dW.

    The conditional law of 2 c X_h is a noncentral chi-square, sampled as a
    Gamma with Poisson-mixed shape: c = 2 kappa / (sigma2 (1 - exp(-kappa h))),
    shape = 2 kappa m / sigma2 + Poisson(c x exp(-kappa h)), scale = 1/c.
    """
    if not (kappa > 0.0 and m >= 0.0 and sigma2 > 0.0 and h > 0.0):
        raise GeometryError("need kappa > 0, m >= 0, sigma2 > 0, h > 0")
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0):
        raise GeometryError("state must be >= 0")
    c = 2.0 * kappa / (sigma2 * -np.expm1(-kappa * h))
    counts = gen.poisson(c * x * np.exp(-kappa * h))
    shape = 2.0 * kappa * m / sigma2 + counts
    return gen.gamma(shape) / c


def exact_cir_vector_step(field: CoefficientField, x: np.ndarray, dt: float,
                          gen: np.random.Generator) -> np.ndarray:
    """Exact transition of a decoupled square-root model, axis by axis."""
    if field.kind != "cir":
        raise GeometryError("exact sampling requires a decoupled cir preset")
    p = field.params
    out = np.empty_like(x)
    for i in range(field.dim):
        out[..., i] = exact_cir_step(x[..., i], float(p["kappa"][i]),
                                     float(p["mean"][i]), float(p["sigma2"][i]),
                                     dt, gen)
    return out


# ---------------------------------------------------------------------------
# batch stepping for arbitrary fields
# ---------------------------------------------------------------------------

class BatchStepper:
    """Vectorized stepping for preset fields, row-wise for generic ones."""

    def __init__(self, field: CoefficientField):
        self.field = field
        self.spec = field.kernel_spec()
        self.n = field.dim

    def step(self, x: np.ndarray, z: np.ndarray, h: float) -> np.ndarray:
        if self.spec is not None:
            from . import _kernels_py
            return _kernels_py.euler_step(self.spec, x, z, h)
        out = np.empty_like(x)
        for r in range(x.shape[0]):
            out[r] = step_ft_euler(x[r], self.field, h, z[r])
        return out

    def normals(self, key: int, path_ids: np.ndarray, k: int) -> np.ndarray:
        base = np.uint64(k * self.n)
        return np.stack([rng.normals(key, path_ids, base + np.uint64(j))
                         for j in range(self.n)], axis=-1)


def _q_lookup(q: HyperCube) -> dict:
    lo, hi, _ = q.cube.s_bounds()
    return {"t0": q.t0, "t_end": q.t_end,
            "s_lo": np.asarray(lo, dtype=np.float64),
            "s_hi": np.asarray(hi, dtype=np.float64)}


# ---------------------------------------------------------------------------
# stopped simulation
# ---------------------------------------------------------------------------

def simulate_stopped_batch(config: SimConfig, field: CoefficientField,
                           q: HyperCube, gamma: GridSet | None,
                           start: tuple[float, np.ndarray],
                           stream_label: int = rng.LABEL_EULER,
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Arrays (kind, stop_time, stop_state) over config.path_count paths."""
    t_start, x_start = start
    x_start = np.asarray(x_start, dtype=np.float64)
    if not q.contains(t_start, SqrtPoint.from_x(x_start)):
        raise GeometryError(f"start ({t_start}, {x_start.tolist()}) outside the hypercube")
    if gamma is not None and gamma.base is not q and gamma.base.dumps() != q.dumps():
        raise GeometryError("target grid must live on the simulated hypercube")

    n = field.dim
    n_paths = config.path_count
    key = rng.stream_key(config.seed, stream_label)
    q_geom = _q_lookup(q)
    gamma_arrays = gamma.lookup_arrays() if gamma is not None else None

    kind = np.empty(n_paths, dtype=np.int8)
    t_stop = np.empty(n_paths, dtype=np.float64)
    x_stop = np.empty((n_paths, n), dtype=np.float64)

    spec = field.kernel_spec()
    if spec is not None and config.scheme == Scheme.FT_EULER:
        def worker(block, sl):
            ids = np.arange(sl.start, sl.stop, dtype=np.uint64)
            k_b, t_b, x_b = kernels.euler_stopped(
                spec, x_start, t_start, config.h, q_geom, gamma_arrays, key, ids)
            kind[sl], t_stop[sl], x_stop[sl] = k_b, t_b, x_b
    elif config.scheme == Scheme.EXACT_CIR:
        if field.kind != "cir":
            raise GeometryError("exact-cir scheme requires a cir preset")

        def worker(block, sl):
            gen = rng.block_generator(config.seed, stream_label, block)
            k_b, t_b, x_b = _stopped_exact(field, x_start, t_start, config.h,
                                           q_geom, gamma_arrays, gen, sl.stop - sl.start)
            kind[sl], t_stop[sl], x_stop[sl] = k_b, t_b, x_b
    else:
        def worker(block, sl):
            ids = np.arange(sl.start, sl.stop, dtype=np.uint64)
            k_b, t_b, x_b = _stopped_generic(field, x_start, t_start, config.h,
                                             q_geom, gamma_arrays, key, ids)
            kind[sl], t_stop[sl], x_stop[sl] = k_b, t_b, x_b

    parallel.run_blocks(n_paths, worker, config.workers)
    return kind, t_stop, x_stop


def simulate_stopped(config: SimConfig, field: CoefficientField, q: HyperCube,
                     gamma: GridSet | None, start: tuple[float, np.ndarray],
                     stream_label: int = rng.LABEL_EULER) -> StoppedSample:
    """Single-path convenience wrapper (path 0 of the configured stream)."""
    one = SimConfig(h=config.h, horizon=config.horizon, scheme=config.scheme,
                    seed=config.seed, path_count=1, workers=1)
    kind, t_stop, x_stop = simulate_stopped_batch(one, field, q, gamma, start,
                                                  stream_label)
    return StoppedSample(_KIND_BY_CODE[int(kind[0])], float(t_stop[0]),
                         x_stop[0].copy(), 0)


def _stopped_loop_python(stepper, x, t_start, h, q_geom, gamma_arrays, draw):
    """Shared stop-detection loop; ``draw(k, active_rows)`` yields normals."""
    from ._kernels_py import (STOP_EXIT, STOP_HIT, STOP_HORIZON, _gamma_lookup,
                              _outside_q)
    n_paths = x.shape[0]
    kind = np.full(n_paths, STOP_HORIZON, dtype=np.int8)
    t_stop = np.full(n_paths, t_start, dtype=np.float64)
    x_stop = x.copy()
    active = np.ones(n_paths, dtype=bool)
    t_end = q_geom["t_end"]

    if gamma_arrays is not None:
        hit0 = _gamma_lookup(gamma_arrays, t_start, x)
        kind[hit0] = STOP_HIT
        active &= ~hit0

    n_steps = max(1, int(np.ceil((t_end - t_start) / h - 1e-9)))
    for k in range(n_steps):
        if not np.any(active):
            break
        t = t_start + (k + 1) * h
        last = k == n_steps - 1
        rows = np.flatnonzero(active)
        x[rows] = stepper(x[rows], draw(k, rows), h)
        xa = x[rows]
        if gamma_arrays is not None and t < t_end:
            hit = _gamma_lookup(gamma_arrays, t, xa)
        else:
            hit = np.zeros(rows.size, dtype=bool)
        if last:
            done = np.ones(rows.size, dtype=bool)
            ev_kind = np.where(hit, STOP_HIT, STOP_HORIZON)
            ev_time = np.where(hit, t, min(t, t_end))
        else:
            out = _outside_q(q_geom, xa)
            done = hit | out
            ev_kind = np.where(hit, STOP_HIT, STOP_EXIT)
            ev_time = np.full(rows.size, t)
        sel = rows[done]
        kind[sel] = ev_kind[done]
        t_stop[sel] = ev_time[done]
        x_stop[sel] = xa[done]
        active[sel] = False
    return kind, t_stop, x_stop


def _stopped_generic(field, x_start, t_start, h, q_geom, gamma_arrays, key, ids):
    stepper = BatchStepper(field)
    x = np.array(np.broadcast_to(x_start, (ids.size, field.dim)), dtype=np.float64)

    def draw(k, rows):
        return stepper.normals(key, ids[rows], k)

    return _stopped_loop_python(stepper.step, x, t_start, h, q_geom, gamma_arrays, draw)


def _stopped_exact(field, x_start, t_start, h, q_geom, gamma_arrays, gen, n_paths):
    x = np.array(np.broadcast_to(x_start, (n_paths, field.dim)), dtype=np.float64)

    def stepper(xa, z_unused, hh):
        return exact_cir_vector_step(field, xa, hh, gen)

    return _stopped_loop_python(stepper, x, t_start, h, q_geom, gamma_arrays,
                                lambda k, rows: None)


# ---------------------------------------------------------------------------
# marginals and rescaling pairs
# ---------------------------------------------------------------------------

def sample_marginal(config: SimConfig, field: CoefficientField, t: float,
                    start: np.ndarray, n_paths: int | None = None,
                    stream_label: int = rng.LABEL_EULER) -> np.ndarray:
    """End states at time t; deterministic in (seed, n_paths), any workers."""
    n_paths = config.path_count if n_paths is None else n_paths
    x0 = np.asarray(start, dtype=np.float64)
    n = field.dim
    out = np.empty((n_paths, n), dtype=np.float64)

    if t == 0.0:
        out[:] = x0
        return out

    if config.scheme == Scheme.EXACT_CIR:
        if field.kind != "cir":
            raise GeometryError("exact-cir scheme requires a cir preset")

        def worker(block, sl):
            gen = rng.block_generator(config.seed, stream_label, block)
            x = np.array(np.broadcast_to(x0, (sl.stop - sl.start, n)))
            out[sl] = exact_cir_vector_step(field, x, t, gen)
    else:
        n_steps = int(round(t / config.h))
        if abs(n_steps * config.h - t) > 1e-9 * max(t, 1.0):
            raise GeometryError(f"time {t} is not a multiple of the step {config.h}")
        spec = field.kernel_spec()
        key = rng.stream_key(config.seed, stream_label)
        if spec is not None:
            def worker(block, sl):
                ids = np.arange(sl.start, sl.stop, dtype=np.uint64)
                out[sl] = kernels.euler_marginal(spec, x0, config.h, n_steps, key, ids)
        else:
            def worker(block, sl):
                ids = np.arange(sl.start, sl.stop, dtype=np.uint64)
                stepper = BatchStepper(field)
                x = np.array(np.broadcast_to(x0, (ids.size, n)))
                for k in range(n_steps):
                    x = stepper.step(x, stepper.normals(key, ids, k), config.h)
                out[sl] = x

    parallel.run_blocks(n_paths, worker, config.workers)
    return out


def rescaled_pair(config: SimConfig, field: CoefficientField, rho2: float,
                  t: float, start: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Samples of X_t and rho^2 * X~_{t/rho^2}; laws agree for constant fields."""
    if field.kind != "constant":
        raise GeometryError("rescaling invariance requires a constant-coefficient field")
    if rho2 <= 0.0:
        raise GeometryError("rho2 must be positive")
    x0 = np.asarray(start, dtype=np.float64)
    a = sample_marginal(config, field, t, x0, stream_label=rng.LABEL_RESCALE)
    scaled_cfg = SimConfig(h=config.h / rho2, horizon=max(t / rho2, config.h / rho2),
                           scheme=config.scheme, seed=config.seed,
                           path_count=config.path_count, workers=config.workers)
    b = sample_marginal(scaled_cfg, field, t / rho2, x0 / rho2,
                        stream_label=rng.LABEL_RESCALE + 1)
    return a, rho2 * b


# ---------------------------------------------------------------------------
# trajectory recording and dumps
# ---------------------------------------------------------------------------

def record_trajectories(config: SimConfig, field: CoefficientField,
                        start: np.ndarray, n_steps: int,
                        stream_label: int = rng.LABEL_EULER) -> Trajectory:
    x0 = np.asarray(start, dtype=np.float64)
    n = field.dim
    n_paths = config.path_count
    states = np.empty((n_steps + 1, n_paths, n), dtype=np.float64)
    states[0] = x0
    key = rng.stream_key(config.seed, stream_label)

    def worker(block, sl):
        ids = np.arange(sl.start, sl.stop, dtype=np.uint64)
        stepper = BatchStepper(field)
        x = np.array(np.broadcast_to(x0, (ids.size, n)))
        for k in range(n_steps):
            x = stepper.step(x, stepper.normals(key, ids, k), config.h)
            states[k + 1, sl] = x

    parallel.run_blocks(n_paths, worker, config.workers)
    times = np.arange(n_steps + 1, dtype=np.float64) * config.h
    return Trajectory(times=times, states=states)


def dump_trajectory(traj: Trajectory, base_path: str | Path,
                    csv_threshold: int = 100_000) -> list[Path]:
    """Columnar binary dump (little-endian float64) plus a JSON sidecar;
    a CSV copy is added for small runs."""
    base = Path(base_path)
    written = []
    steps, paths, n = traj.states.shape
    bin_path = base.with_suffix(".bin")
    traj.states.astype("<f8").tofile(bin_path)
    written.append(bin_path)
    sidecar = {
        "n": n, "paths": paths, "steps": steps,
        "h": float(traj.times[1] - traj.times[0]) if steps > 1 else 0.0,
        "dtype": "<f8", "layout": "C order (step, path, axis)",
    }
    json_path = base.with_suffix(".json")
    json_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2))
    written.append(json_path)
    if steps * paths * n <= csv_threshold:
        csv_path = base.with_suffix(".csv")
        with csv_path.open("w") as fh:
            fh.write("t,path," + ",".join(f"x{i + 1}" for i in range(n)) + "\n")
            for k in range(steps):
                for p in range(paths):
                    row = ",".join(repr(float(v)) for v in traj.states[k, p])
                    fh.write(f"{traj.times[k]!r},{p},{row}\n")
        written.append(csv_path)
    return written
