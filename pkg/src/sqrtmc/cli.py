"""Experiment runner: config ingestion, subcommand dispatch, deterministic
seeding, result emission.

One JSON config describes the model, the geometry, and the experiment;
``--seed``/``--workers``/``--out`` override single fields.  Results are
written as canonical JSON (sorted keys) whose content is byte-identical for
any worker count; a ``generated_at`` stamp is the only volatile field and is
excluded from the embedded config digest.

Exit codes: 0 all declared pass-criteria hold, 1 a statistical criterion
failed (report still written), 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import czdecomp, estimators, kernels, rng, sde
from .coeffs import (CoefficientField, check_condition_cprime,
                     check_inv_conditions, field_from_json)
from .estimators import EstimatorError
from .geometry import AnisoCube, GeometryError, HyperCube, SqrtPoint, hypercube
from .gridset import GridSet

SUBCOMMANDS = ("validate", "simulate", "hitprob", "smallcube", "czd",
               "holder", "martingale", "invariant", "rescale-check")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def load_config(path: str | Path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    cfg.setdefault("seed", 0)
    cfg.setdefault("workers", 1)
    cfg.setdefault("formats", ["json"])
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def build_field(cfg: dict) -> CoefficientField:
    try:
        return field_from_json(cfg["model"])
    except (KeyError, GeometryError) as exc:
        raise ConfigError(f"bad model description: {exc}") from None


def build_geometry(cfg: dict) -> HyperCube:
    g = cfg.get("geometry")
    if g is None:
        raise ConfigError("config is missing the geometry block")
    try:
        return HyperCube.from_json(g)
    except (KeyError, GeometryError) as exc:
        raise ConfigError(f"bad geometry: {exc}") from None


def build_gamma(spec: dict | None, q: HyperCube, seed: int) -> GridSet | None:
    if spec is None:
        return None
    kind = spec.get("kind")
    res = int(spec.get("resolution", 27))
    time_cells = spec.get("time_cells")
    if kind == "empty":
        return GridSet.empty(q, res, time_cells)
    if kind == "full":
        return GridSet.full(q, res, time_cells)
    if kind == "time_slab":
        g = GridSet.empty(q, res, time_cells)
        return g.mark_time_slab(float(spec["frac_lo"]), float(spec.get("frac_hi", 1.0)))
    if kind == "density":
        g = GridSet.empty(q, res, time_cells)
        gen = rng.block_generator(seed, rng.LABEL_GRIDSET, int(spec.get("stream", 0)))
        g.mark_random(gen, float(spec["p"]))
        if "max_occupancy" in spec:
            g.trim_to_measure(float(spec["max_occupancy"]) * q.measure(), gen)
        return g
    if kind == "leaf_density":
        g = GridSet.empty(q, res, time_cells)
        gen = rng.block_generator(seed, rng.LABEL_GRIDSET, int(spec.get("stream", 0)))
        czdecomp.mark_random_leaves(g, gen, float(spec["p"]))
        if "max_occupancy" in spec and g.occupancy() > float(spec["max_occupancy"]):
            raise ConfigError("random gamma exceeded the occupancy cap; lower p")
        return g
    if kind == "runs":
        return GridSet.from_json(spec)
    raise ConfigError(f"unknown gamma kind: {kind!r}")


# named boundary data / sources for config files
def _named_g(name: str):
    table = {
        "one": lambda t, X: np.ones(len(X)),
        "sqrt_axis0": lambda t, X: np.sqrt(X[:, 0]),
        "axis0": lambda t, X: X[:, 0],
    }
    if name not in table:
        raise ConfigError(f"unknown boundary data {name!r}")
    return table[name]


def _named_f(name: str | None):
    if name in (None, "zero"):
        return None
    if name == "one":
        return lambda t, X: np.ones(len(X))
    if isinstance(name, str) and name.startswith("const:"):
        v = float(name.split(":", 1)[1])
        return lambda t, X: np.full(len(X), v)
    raise ConfigError(f"unknown source term {name!r}")


def _martingale_probe(field: CoefficientField, name: str):
    """Vectorized (u, source = -Lu) pairs for 1-d preset fields, plus the
    pointwise probe used for the generator cross-check."""
    from .coeffs import spatial_probe
    if field.dim != 1:
        raise ConfigError("bundled martingale probes are one-dimensional")

    def batch_drift(X):
        if field.kind == "constant":
            return np.broadcast_to(field.params["b"], X.shape)
        if field.kind == "cir":
            return field.params["kappa"] * (field.params["mean"] - X)
        return np.stack([field.b(x) for x in X])

    a00 = float(np.asarray(field.a(np.ones(1)))[0, 0])  # presets: constant a

    if name == "square_axis0":
        u_batch = lambda t, X: X[:, 0] ** 2
        source = lambda t, X: -(a00 * X[:, 0] + 2.0 * X[:, 0] * batch_drift(X)[:, 0])
        probe = spatial_probe(lambda x: x[0] ** 2,
                              lambda x: np.array([2.0 * x[0]]),
                              lambda x: np.array([[2.0]]))
    elif name == "linear_axis0":
        u_batch = lambda t, X: X[:, 0]
        source = lambda t, X: -batch_drift(X)[:, 0]
        probe = spatial_probe(lambda x: x[0],
                              lambda x: np.array([1.0]),
                              lambda x: np.array([[0.0]]))
    else:
        raise ConfigError(f"unknown probe {name!r}")
    return u_batch, source, probe


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate(subcommand: str, cfg: dict) -> list[str]:
    """Schema and semantic checks, no simulation.  Returns diagnostics."""
    diags: list[str] = []
    if subcommand not in SUBCOMMANDS:
        return [f"unknown subcommand {subcommand!r}"]
    try:
        field = build_field(cfg)
    except ConfigError as exc:
        return [str(exc)]
    exp = cfg.get("experiment", {})
    needs_geometry = subcommand in ("simulate", "hitprob", "smallcube", "czd",
                                    "holder", "martingale")
    q = None
    if needs_geometry:
        try:
            q = build_geometry(cfg)
        except ConfigError as exc:
            return [str(exc)]
        if q.dim != field.dim:
            diags.append("geometry and model dimensions differ")

    if subcommand == "hitprob":
        if "gamma" not in exp:
            diags.append("hitprob requires experiment.gamma")
        if "start" in exp:
            t0, x0 = exp["start"]
            try:
                if not q.contains(float(t0), SqrtPoint.from_x(x0)):
                    diags.append(f"start {exp['start']} lies outside the hypercube")
            except GeometryError as exc:
                diags.append(str(exc))
        elif not exp.get("uniform"):
            diags.append("hitprob requires experiment.start or experiment.uniform")
        if exp.get("uniform"):
            small = AnisoCube(q.cube.center, q.rho / 6.0)
            for x0 in exp["uniform"].get("starts", []):
                if not small.contains(SqrtPoint.from_x(x0)):
                    diags.append(f"uniform start {x0} outside K(x0, rho/6)")
    elif subcommand == "smallcube":
        for key in ("x", "l", "c", "t", "y", "beta", "r", "eps", "alpha"):
            if key not in exp:
                diags.append(f"smallcube requires experiment.{key}")
    elif subcommand == "czd":
        if exp.get("mode") not in ("decompose", "verify_a", "verify_b", "dichotomy"):
            diags.append("czd requires experiment.mode in decompose/verify_a/verify_b/dichotomy")
        if q is not None and not czdecomp.is_regular(q):
            diags.append("czd requires a regular base hypercube")
    elif subcommand == "invariant":
        cond = check_inv_conditions(field, np.linspace(0, 10, 21)[:, None]
                                    * np.ones(field.dim))
        if not cond.passed:
            bad = {k: v for k, v in cond.margins.items() if v < 0}
            diags.append(f"model violates invariant-measure coefficient bounds: {bad}")
    elif subcommand == "martingale":
        try:
            _martingale_probe(field, exp.get("probe", "square_axis0"))
        except ConfigError as exc:
            diags.append(str(exc))
    elif subcommand == "rescale-check":
        if field.kind != "constant":
            diags.append("rescale-check requires a constant-coefficient model")

    if subcommand in ("hitprob", "martingale") and q is not None:
        rep = check_condition_cprime(field, q.cube, grid_density=8)
        if not rep.passed:
            bad = {k: round(v, 6) for k, v in rep.margins.items() if v < 0}
            diags.append(f"model fails the quantitative cube condition on K: {bad}")
    return diags


# ---------------------------------------------------------------------------
# runners (one per subcommand)
# ---------------------------------------------------------------------------

def _run_simulate(field, cfg, q):
    exp = cfg["experiment"]
    config = sde.SimConfig(h=float(exp["h"]), horizon=float(exp["steps"]) * float(exp["h"]),
                           seed=cfg["seed"], path_count=int(exp["n_paths"]),
                           workers=cfg["workers"])
    traj = sde.record_trajectories(config, field, np.asarray(exp["start"], dtype=float),
                                   int(exp["steps"]))
    out = {"passed": True, "paths": int(exp["n_paths"]), "steps": int(exp["steps"]),
           "final_mean": traj.states[-1].mean(axis=0).tolist()}
    return out, True, traj


def _run_hitprob(field, cfg, q):
    exp = cfg["experiment"]
    gamma = build_gamma(exp.get("gamma"), q, cfg["seed"])
    n_paths = int(exp["n_paths"])
    h = float(exp["h"])
    if exp.get("uniform"):
        starts = exp["uniform"].get("starts")
        summary, table = estimators.est_uniform_hit(
            field, q, gamma, n_paths, h, cfg["seed"], cfg["workers"],
            points_per_axis=int(exp["uniform"].get("points_per_axis", 3)),
            starts=[np.asarray(s, dtype=float) for s in starts] if starts else None)
        threshold = float(exp.get("min_lower_bound", 0.0))
        passed = summary["min_lower_bound"] > threshold
        out = {"uniform": summary, "table": table, "threshold": threshold,
               "passed": passed}
        return out, passed, table
    t0, x0 = exp["start"]
    rep = estimators.est_hit_prob(field, q, gamma, (float(t0), np.asarray(x0, dtype=float)),
                                  n_paths, h, cfg["seed"], cfg["workers"])
    threshold = float(exp.get("min_lower_bound", -1.0))
    passed = rep.ci_low > threshold
    return {"report": rep.to_json(), "passed": passed}, passed, None


def _run_smallcube(field, cfg, q):
    exp = cfg["experiment"]
    rep = estimators.est_small_cube(
        field, q, np.asarray(exp["x"], dtype=float), float(exp["l"]),
        float(exp["c"]), float(exp["t"]), np.asarray(exp["y"], dtype=float),
        int(exp["n_paths"]), float(exp["h"]), cfg["seed"],
        beta=float(exp["beta"]), r=float(exp["r"]), eps=float(exp["eps"]),
        alpha=float(exp["alpha"]), workers=cfg["workers"])
    passed = rep.ci_low > float(exp.get("min_lower_bound", 0.0))
    return {"report": rep.to_json(), "passed": passed}, passed, None


def _run_czd(field, cfg, q):
    exp = cfg["experiment"]
    mode = exp["mode"]
    mu = float(exp["mu"])
    instances = int(exp.get("instances", 1))
    results = []
    ok_all = True
    for i in range(instances):
        spec = dict(exp["gamma"])
        spec.setdefault("stream", i)
        if spec.get("kind") == "density" and mode == "verify_a":
            spec.setdefault("max_occupancy", mu)
        gamma = build_gamma(spec, q, cfg["seed"])
        if mode == "decompose":
            res = czdecomp.cz_decompose(gamma, mu, exp.get("max_level"))
            results.append(res.to_json())
        elif mode == "verify_a":
            ok, measures = czdecomp.verify_a(gamma, mu)
            ok_all &= ok
            results.append({"ok": ok, "measures": measures})
        elif mode == "verify_b":
            res = czdecomp.cz_decompose(gamma, mu, exp.get("max_level"))
            ok, ratio, meas = czdecomp.verify_b(res.stopped, gamma, float(exp["eta"]))
            ok_all &= ok
            results.append({"ok": ok, "ratio": ratio, "measures": meas})
        else:
            rep = czdecomp.dichotomy(gamma, float(exp["mu_prime"]), mu)
            ok = rep.branch in (1, 2)
            if rep.branch == 2:
                ok &= rep.cube.rho >= rep.rho_bound * (1 - 1e-9)
                ok &= rep.cube.occupancy >= mu
            ok_all &= ok
            results.append(rep.to_json())
    return {"mode": mode, "instances": results, "passed": bool(ok_all)}, bool(ok_all), None


def _run_holder(field, cfg, q):
    exp = cfg["experiment"]
    scales = [float(s) for s in exp.get("scales", [1.0, 0.5, 0.25])]
    anchor = exp.get("anchor", "terminal")
    cubes = []
    for s in sorted(scales, reverse=True):
        rho = q.rho * s
        if anchor == "terminal":
            t0 = q.t_end - q.theta * rho * rho
        else:
            t0 = q.t0
        cubes.append(hypercube(t0, q.theta, q.cube.center.s.tolist(), rho))
    g = _named_g(exp.get("g", "sqrt_axis0"))
    f = _named_f(exp.get("f"))
    rep = estimators.est_osc_decay(field, cubes, g, f, int(exp["n_paths"]),
                                   float(exp["h"]), cfg["seed"], cfg["workers"],
                                   points_per_axis=int(exp.get("points_per_axis", 4)))
    passed = rep.status == "ok"
    if passed and exp.get("require_decreasing", True):
        passed = all(a > b for a, b in zip(rep.osc, rep.osc[1:]))
    lo_a, hi_a = exp.get("alpha_range", (0.0, 1.0))
    if passed and rep.alpha_hat is not None:
        passed = lo_a < rep.alpha_hat < hi_a
    if passed and rep.r_squared is not None:
        passed = rep.r_squared > float(exp.get("min_r_squared", 0.9))
    fit = None
    if exp.get("fit_pairs"):
        pts = []
        for ci, qq in enumerate(cubes):
            for pi, point in enumerate(estimators._eval_grid(qq, int(exp.get("points_per_axis", 4)))):
                v = estimators.feynman_kac_eval(
                    field, cubes[0], g, f, point, int(exp["n_paths"]), float(exp["h"]),
                    cfg["seed"], cfg["workers"],
                    stream_label=rng.LABEL_EULER + 64 + 1024 * ci + pi)
                pts.append((point[0], point[1], v.estimate))
        fit = estimators.fit_holder(pts, noise_floor=3.0 * float(np.median(rep.osc_se)))
    out = {"osc": rep.to_json(), "passed": bool(passed)}
    if fit is not None:
        out["holder_fit"] = fit.to_json()
    return out, bool(passed), rep


def _run_martingale(field, cfg, q):
    exp = cfg["experiment"]
    u_batch, source, probe = _martingale_probe(field, exp.get("probe", "square_axis0"))
    if exp.get("negative_control"):
        source, probe = None, None
    t0, x0 = exp.get("start", (q.t0, (q.cube.center.s ** 2).tolist()))
    rep = estimators.martingale_check(
        field, u_batch, source, q, (float(t0), np.asarray(x0, dtype=float)),
        [float(s) for s in exp["checkpoints"]], int(exp["n_paths"]),
        float(exp["h"]), cfg["seed"], cfg["workers"], probe=probe)
    passed = rep.passed if not exp.get("negative_control") else not rep.passed
    return {"report": rep.to_json(), "passed": bool(passed)}, bool(passed), rep


def _run_invariant(field, cfg, q_unused):
    exp = cfg["experiment"]
    rep = estimators.est_invariant(
        field, float(exp["burn_in"]), float(exp["horizon"]), float(exp["thinning"]),
        [np.asarray(s, dtype=float) for s in exp["starts"]], cfg["seed"],
        h=float(exp.get("h", 1e-3)))
    expect = exp.get("expect", {})
    passed = True
    if "mean" in expect:
        tol = float(expect.get("mean_tol_se", 3.0))
        passed &= all(abs(m[0] - expect["mean"]) <= tol * se
                      for m, se in zip(rep.means, rep.mean_se))
    if "variance" in expect:
        rel = float(expect.get("var_rel_tol", 0.1))
        passed &= all(abs(v[0] - expect["variance"]) <= rel * expect["variance"]
                      for v in rep.variances)
    if "w1_max" in expect:
        off = [rep.w1_pairwise[i][j] for i in range(len(rep.means))
               for j in range(len(rep.means)) if i != j]
        passed &= all(w <= float(expect["w1_max"]) for w in off)
    out = {"report": rep.to_json(), "passed": None}
    tail_cfg = exp.get("tail")
    if tail_cfg:
        tail = estimators.tail_check(
            field, np.asarray(tail_cfg.get("start", exp["starts"][0]), dtype=float),
            float(tail_cfg["level"]), [float(t) for t in tail_cfg["t_grid"]],
            int(tail_cfg["n_paths"]), cfg["seed"], workers=cfg["workers"])
        passed &= tail.sup_probability <= float(tail_cfg.get("eps", 1.0))
        out["tail"] = tail.to_json()
    out["passed"] = bool(passed)
    return out, bool(passed), rep


def _run_rescale(field, cfg, q_unused):
    from scipy.stats import ks_2samp
    exp = cfg["experiment"]
    config = sde.SimConfig(h=float(exp["h"]), horizon=float(exp["t"]),
                           seed=cfg["seed"], path_count=int(exp["n_paths"]),
                           workers=cfg["workers"])
    a, b = sde.rescaled_pair(config, field, float(exp["rho2"]), float(exp["t"]),
                             np.asarray(exp["start"], dtype=float))
    stat = float(ks_2samp(a[:, 0], b[:, 0]).statistic)
    n = int(exp["n_paths"])
    critical = 1.358 * np.sqrt(2.0 / n)
    passed = stat < critical
    out = {"ks_statistic": stat, "critical_95": critical, "n_paths": n,
           "passed": bool(passed)}
    return out, bool(passed), None


_RUNNERS = {
    "simulate": _run_simulate,
    "hitprob": _run_hitprob,
    "smallcube": _run_smallcube,
    "czd": _run_czd,
    "holder": _run_holder,
    "martingale": _run_martingale,
    "invariant": _run_invariant,
    "rescale-check": _run_rescale,
}


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def emit(result: dict, subcommand: str, cfg: dict, out_dir: Path,
         formats: list[str], extra=None) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    payload = dict(result)
    payload["subcommand"] = subcommand
    payload["config_digest"] = config_digest(cfg)
    payload["backend"] = kernels.backend_name()
    payload["schema_version"] = estimators.SCHEMA_VERSION
    payload["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    json_path = out_dir / f"{subcommand}.json"
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    written.append(json_path)

    if "csv" in formats:
        rows = None
        header = None
        if subcommand == "hitprob" and isinstance(extra, list):
            header = ["start", "estimate", "ci_low", "ci_high"]
            rows = [[json.dumps(r["start"]), r["estimate"], r["ci_low"], r["ci_high"]]
                    for r in extra]
        elif subcommand == "holder" and extra is not None:
            header = ["scale", "osc", "osc_se"]
            rows = list(zip(extra.scales, extra.osc, extra.osc_se))
        elif subcommand == "invariant" and "tail" in result:
            header = ["t", "probability", "se"]
            t = result["tail"]
            rows = list(zip(t["times"], t["probabilities"], t["ses"]))
        if rows is not None:
            csv_path = out_dir / f"{subcommand}.csv"
            with csv_path.open("w") as fh:
                fh.write(",".join(header) + "\n")
                for row in rows:
                    fh.write(",".join(str(v) for v in row) + "\n")
            written.append(csv_path)

    if subcommand == "simulate" and extra is not None:
        written += sde.dump_trajectory(extra, out_dir / "trajectory")
    return written


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def run(subcommand: str, cfg: dict, out_dir: Path) -> int:
    diags = validate(subcommand, cfg)
    if diags:
        for d in diags:
            print(f"config error: {d}", file=sys.stderr)
        return 2
    if subcommand == "validate":
        print("config ok")
        return 0
    field = build_field(cfg)
    q = build_geometry(cfg) if "geometry" in cfg else None
    try:
        result, passed, extra = _RUNNERS[subcommand](field, cfg, q)
    except (EstimatorError, GeometryError, czdecomp.PreconditionError,
            ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except czdecomp.DecompositionError as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        return 1
    files = emit(result, subcommand, cfg, out_dir, cfg.get("formats", ["json"]), extra)
    for fpath in files:
        print(f"wrote {fpath}")
    if not passed:
        print(f"{subcommand}: declared pass-criteria FAILED", file=sys.stderr)
        return 1
    print(f"{subcommand}: pass")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sqrtmc",
        description="Monte Carlo experiments for square-root diffusions on the orthant")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--workers", type=int, default=None,
                        help="worker threads (default: config, env SQRTMC_WORKERS)")
    parser.add_argument("--out", default=None,
                        help="output directory (default: env SQRTMC_OUT or ./out)")
    parser.add_argument("--format", default=None, help="comma list, e.g. json,csv")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.workers is not None:
        cfg["workers"] = args.workers
    elif os.environ.get("SQRTMC_WORKERS"):
        cfg["workers"] = int(os.environ["SQRTMC_WORKERS"])
    if args.format:
        cfg["formats"] = args.format.split(",")
    out_dir = Path(args.out or os.environ.get("SQRTMC_OUT", "out"))
    return run(args.subcommand, cfg, out_dir)


if __name__ == "__main__":
    sys.exit(main())
