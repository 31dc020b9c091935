"""Pure-NumPy path kernels (fallback backend).

Same contract as the compiled extension: full-truncation Euler stepping of
preset coefficient fields, vectorized over paths, with per-path
counter-based noise so results are independent of batching and worker
count.  Stop kinds: 0 horizon, 1 hit, 2 exit.
"""

from __future__ import annotations

import numpy as np

from . import rng

BACKEND = "python"

STOP_HORIZON = 0
STOP_HIT = 1
STOP_EXIT = 2


def _step_normals(key: int, path_ids: np.ndarray, k: int, n: int) -> np.ndarray:
    base = np.uint64(k * n)
    cols = [rng.normals(key, path_ids, base + np.uint64(j)) for j in range(n)]
    return np.stack(cols, axis=-1)


def _drift(spec: dict, x: np.ndarray) -> np.ndarray:
    if spec["kind"] == "constant":
        return np.broadcast_to(spec["b"], x.shape)
    return spec["kappa"] * (spec["mean"] - x)


def _diffuse(spec: dict, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    if spec["kind"] == "constant":
        return np.sqrt(x) * (z @ spec["sig"].T)
    return np.sqrt(x) * spec["sig"] * z


def euler_step(spec: dict, x: np.ndarray, z: np.ndarray, h: float) -> np.ndarray:
    """One full-truncation Euler update on a batch of states."""
    out = x + _drift(spec, x) * h + _diffuse(spec, x, z) * np.sqrt(h)
    return np.maximum(out, 0.0)


def euler_marginal(spec: dict, x0: np.ndarray, h: float, n_steps: int,
                   key: int, path_ids: np.ndarray) -> np.ndarray:
    """End states after n_steps full-truncation Euler steps."""
    n = spec["n"]
    x = np.array(np.broadcast_to(x0, (path_ids.size, n)), dtype=np.float64)
    ids = np.asarray(path_ids, dtype=np.uint64)
    for k in range(n_steps):
        x = euler_step(spec, x, _step_normals(key, ids, k, n), h)
    return x


def _gamma_lookup(gamma: dict, t: float, x: np.ndarray) -> np.ndarray:
    """Membership of (t, x_rows) in the rasterized target set."""
    n_rows = x.shape[0]
    it = int(np.floor((t - gamma["t_lo"]) / gamma["dt"]))
    if not 0 <= it < gamma["m_t"]:
        return np.zeros(n_rows, dtype=bool)
    s = np.sqrt(x)
    idx = np.floor((s - gamma["s_lo"]) / gamma["ds"]).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < gamma["dims"]), axis=1)
    flat = np.zeros(n_rows, dtype=np.int64)
    mult = 1
    for axis in range(x.shape[1] - 1, -1, -1):
        flat += np.where(ok, idx[:, axis], 0) * mult
        mult *= int(gamma["dims"][axis])
    flat += it * mult
    out = np.zeros(n_rows, dtype=bool)
    out[ok] = gamma["mask"][flat[ok]].astype(bool)
    return out


def _outside_q(q: dict, x: np.ndarray) -> np.ndarray:
    s = np.sqrt(x)
    inside = np.all((s >= q["s_lo"]) & (s < q["s_hi"]), axis=1)
    return ~inside


def euler_stopped(spec: dict, x0: np.ndarray, t_start: float, h: float,
                  q: dict, gamma: dict | None, key: int,
                  path_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run paths to the first of {hit target, exit cube, time horizon}.

    At each grid time the hit test precedes the exit test, so simultaneous
    detections resolve as hits.  Returns (kind, stop_time, stop_state).
    """
    n = spec["n"]
    ids = np.asarray(path_ids, dtype=np.uint64)
    n_paths = ids.size
    x = np.array(np.broadcast_to(x0, (n_paths, n)), dtype=np.float64)

    kind = np.full(n_paths, STOP_HORIZON, dtype=np.int8)
    t_stop = np.full(n_paths, t_start, dtype=np.float64)
    x_stop = x.copy()
    active = np.ones(n_paths, dtype=bool)

    t_end = q["t_end"]
    if gamma is not None:
        hit0 = _gamma_lookup(gamma, t_start, x)
        kind[hit0] = STOP_HIT
        active &= ~hit0

    n_steps = max(1, int(np.ceil((t_end - t_start) / h - 1e-9)))
    for k in range(n_steps):
        if not np.any(active):
            break
        t = t_start + (k + 1) * h
        last = k == n_steps - 1
        act_idx = np.flatnonzero(active)
        x[act_idx] = euler_step(spec, x[act_idx],
                                _step_normals(key, ids[act_idx], k, n), h)
        xa = x[act_idx]

        if gamma is not None and t < t_end:
            hit = _gamma_lookup(gamma, t, xa)
        else:
            hit = np.zeros(act_idx.size, dtype=bool)

        if last:
            done = np.ones(act_idx.size, dtype=bool)
            ev_kind = np.where(hit, STOP_HIT, STOP_HORIZON)
            ev_time = np.where(hit, t, min(t, t_end))
        else:
            out = _outside_q(q, xa)
            done = hit | out
            ev_kind = np.where(hit, STOP_HIT, STOP_EXIT)
            ev_time = np.full(act_idx.size, t)

        if np.any(done):
            stopped = act_idx[done]
            kind[stopped] = ev_kind[done]
            t_stop[stopped] = ev_time[done]
            x_stop[stopped] = xa[done]
            active[stopped] = False
    return kind, t_stop, x_stop
