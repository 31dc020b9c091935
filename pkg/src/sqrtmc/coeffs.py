"""Coefficient fields (a, b, sigma) of the orthant diffusion, the generator,
and quantitative condition checkers.

A field packages the diffusion matrix function a(x) (symmetric, with
sigma(x) a factor satisfying sigma sigma^T = a), the drift b(x), and the
ellipticity/drift bound ``lam`` >= 1.  Coefficient callables take a single
orthant point (length-n array) and must be pure: they are called from
concurrent workers without locking.

Presets (constant, decoupled square-root/CIR, almost-diagonal perturbation)
are constructible from a JSON description and expose the structure needed by
the compiled simulation kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import AnisoCube, GeometryError


class FactorizationError(ValueError):
    """Matrix square-root factorization failed (input not SPD)."""


def sqrt_factor(a: np.ndarray) -> np.ndarray:
    """Lower-triangular sigma with sigma @ sigma.T == a (Cholesky)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise FactorizationError("expected a square matrix")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-14):
        raise FactorizationError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"matrix is not positive definite: {exc}") from None


@dataclass(eq=False)
class CoefficientField:
    """Data (a, b, sigma, lam) of one orthant diffusion model."""

    dim: int
    a: Callable[[np.ndarray], np.ndarray]
    b: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    lam: float
    kind: str = "generic"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lam < 1.0:
            raise GeometryError(f"lambda bound must be >= 1, got {self.lam}")

    def validate_at(self, points: Sequence[np.ndarray], rtol: float = 1e-10) -> None:
        """Assert sigma sigma^T == a and symmetry at sample points."""
        for x in points:
            a = self.a(np.asarray(x, dtype=np.float64))
            s = self.sigma(np.asarray(x, dtype=np.float64))
            if not np.allclose(a, a.T, rtol=rtol, atol=1e-13):
                raise FactorizationError(f"a({x}) is not symmetric")
            if not np.allclose(s @ s.T, a, rtol=rtol, atol=1e-13):
                raise FactorizationError(f"sigma sigma^T != a at {x}")

    # structure consumed by the fast simulation kernels; None => generic path
    def kernel_spec(self) -> dict | None:
        if self.kind == "constant":
            return {"kind": "constant", "n": self.dim,
                    "b": np.asarray(self.params["b"], dtype=np.float64),
                    "sig": np.asarray(self.params["sig"], dtype=np.float64)}
        if self.kind == "cir":
            return {"kind": "cir", "n": self.dim,
                    "kappa": np.asarray(self.params["kappa"], dtype=np.float64),
                    "mean": np.asarray(self.params["mean"], dtype=np.float64),
                    "sig": np.sqrt(np.asarray(self.params["sigma2"], dtype=np.float64))}
        return None

    def to_json(self) -> dict:
        if self.kind == "generic":
            raise GeometryError("generic fields are programmatic-only")
        out = {"kind": self.kind, "lambda": self.lam}
        for k, v in self.params.items():
            if k == "sig":
                continue
            out[k] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
        return out


def constant_field(a: Sequence[Sequence[float]], b: Sequence[float], lam: float) -> CoefficientField:
    a_mat = np.asarray(a, dtype=np.float64)
    b_vec = np.asarray(b, dtype=np.float64)
    sig = sqrt_factor(a_mat)
    n = b_vec.size
    return CoefficientField(
        dim=n,
        a=lambda x, _a=a_mat: _a,
        b=lambda x, _b=b_vec: _b,
        sigma=lambda x, _s=sig: _s,
        lam=float(lam),
        kind="constant",
        params={"a": a_mat, "b": b_vec, "sig": sig},
    )


def cir_field(kappa: Sequence[float], mean: Sequence[float], sigma2: Sequence[float],
              lam: float) -> CoefficientField:
    """Decoupled mean-reverting square-root model: b_i = kappa_i (m_i - x_i)."""
    kap = np.asarray(kappa, dtype=np.float64)
    m = np.asarray(mean, dtype=np.float64)
    s2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(kap <= 0.0) or np.any(m < 0.0) or np.any(s2 <= 0.0):
        raise GeometryError("need kappa > 0, mean >= 0, sigma2 > 0")
    n = kap.size
    a_mat = np.diag(s2)
    sig = np.diag(np.sqrt(s2))
    return CoefficientField(
        dim=n,
        a=lambda x, _a=a_mat: _a,
        b=lambda x, _k=kap, _m=m: _k * (_m - np.asarray(x)),
        sigma=lambda x, _s=sig: _s,
        lam=float(lam),
        kind="cir",
        params={"kappa": kap, "mean": m, "sigma2": s2, "sig": sig},
    )


def almost_diagonal_field(diag: Sequence[float], eps: float, b: Sequence[float],
                          lam: float) -> CoefficientField:
    """Diagonal diffusion plus a small bounded state-dependent coupling."""
    d = np.asarray(diag, dtype=np.float64)
    b_vec = np.asarray(b, dtype=np.float64)
    n = d.size
    if eps < 0.0 or eps >= 0.5 * float(np.min(d)) / max(n - 1, 1):
        raise GeometryError("coupling eps too large for positive definiteness")

    def a_fun(x):
        s = np.sqrt(np.maximum(np.asarray(x, dtype=np.float64), 0.0))
        off = eps * np.sin(np.outer(s, s))
        np.fill_diagonal(off, 0.0)
        return np.diag(d) + off

    return CoefficientField(
        dim=n,
        a=a_fun,
        b=lambda x, _b=b_vec: _b,
        sigma=lambda x: sqrt_factor(a_fun(x)),
        lam=float(lam),
        kind="almost_diagonal",
        params={"diag": d, "eps": float(eps), "b": b_vec},
    )


def field_from_json(obj: dict) -> CoefficientField:
    kind = obj.get("kind")
    lam = obj.get("lambda", 1.0)
    if kind == "constant":
        return constant_field(obj["a"], obj["b"], lam)
    if kind == "cir":
        return cir_field(obj["kappa"], obj["mean"], obj["sigma2"], lam)
    if kind == "almost_diagonal":
        return almost_diagonal_field(obj["diag"], obj["eps"], obj["b"], lam)
    raise GeometryError(f"unknown model kind: {kind!r}")


# ---------------------------------------------------------------------------
# generator and probes
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SmoothProbe:
    """A C^{1,2} test function with its analytic derivatives."""

    u: Callable[[float, np.ndarray], float]
    du_dt: Callable[[float, np.ndarray], float]
    grad: Callable[[float, np.ndarray], np.ndarray]
    hessian: Callable[[float, np.ndarray], np.ndarray]

    def check_derivatives(self, t: float, x: np.ndarray, rtol: float = 1e-6) -> None:
        """Compare supplied derivatives against central finite differences."""
        x = np.asarray(x, dtype=np.float64)
        h = 1e-5
        dt_fd = (self.u(t + h, x) - self.u(t - h, x)) / (2 * h)
        if abs(dt_fd - self.du_dt(t, x)) > rtol * (1.0 + abs(dt_fd)):
            raise GeometryError("du_dt does not match finite differences")
        g = self.grad(t, x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h
            fd = (self.u(t, x + e) - self.u(t, x - e)) / (2 * h)
            if abs(fd - g[i]) > rtol * (1.0 + abs(fd)):
                raise GeometryError(f"grad[{i}] does not match finite differences")


def generator_apply(field: CoefficientField, probe: SmoothProbe,
                    t: float, x: np.ndarray) -> float:
    """Apply the parabolic generator:
    du/dt + (1/2) sum_ij a_ij sqrt(x_i x_j) d2u/dx_i dx_j + sum_i b_i du/dx_i.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0):
        raise GeometryError("generator is defined on the orthant only")
    s = np.sqrt(x)
    a = np.asarray(field.a(x), dtype=np.float64)
    h = np.asarray(probe.hessian(t, x), dtype=np.float64)
    second = 0.5 * float(np.sum(a * np.outer(s, s) * h))
    first = float(np.dot(np.asarray(field.b(x), dtype=np.float64), probe.grad(t, x)))
    return probe.du_dt(t, x) + second + first


def spatial_probe(u, grad, hessian) -> SmoothProbe:
    """Probe for a time-independent function of x."""
    return SmoothProbe(
        u=lambda t, x: u(x),
        du_dt=lambda t, x: 0.0,
        grad=lambda t, x: grad(x),
        hessian=lambda t, x: hessian(x),
    )


# ---------------------------------------------------------------------------
# condition checkers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ConditionReport:
    name: str
    passed: bool
    margins: dict

    def to_json(self) -> dict:
        return {"name": self.name, "passed": self.passed, "margins": self.margins}


def _grid_points(cube: AnisoCube, density: int) -> np.ndarray:
    """Sample grid over the cube, uniform per axis in s, boundary included."""
    lo, hi, _ = cube.s_bounds()
    axes = [np.linspace(a, b, density, endpoint=False) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    s = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    return s * s  # back to x-space


def check_ellipticity(field: CoefficientField, cube: AnisoCube, grid_density: int = 32) -> ConditionReport:
    """lam^-1 I <= a(x) <= lam I and |b(x)| <= lam on a grid over the cube."""
    lam = field.lam
    pts = _grid_points(cube, grid_density)
    lo_margin = np.inf
    hi_margin = np.inf
    drift_margin = np.inf
    for x in pts:
        ev = np.linalg.eigvalsh(np.asarray(field.a(x), dtype=np.float64))
        lo_margin = min(lo_margin, ev[0] - 1.0 / lam)
        hi_margin = min(hi_margin, lam - ev[-1])
        drift_margin = min(drift_margin, lam - float(np.linalg.norm(field.b(x))))
    margins = {"eig_lower": float(lo_margin), "eig_upper": float(hi_margin),
               "drift_norm": float(drift_margin)}
    return ConditionReport("ellipticity", all(v >= 0.0 for v in margins.values()), margins)


def check_condition_cprime(field: CoefficientField, cube: AnisoCube,
                           grid_density: int = 32) -> ConditionReport:
    """Quantitative non-degeneracy plus inward drift near each boundary face.

    On K(x0, rho): eigenvalues of a within [lam^-1, lam], |b| <= lam, and for
    every axis i, b_i(x) >= lam^-1 wherever sqrt(x_i) falls in
    [0, rho] ∩ [max(sqrt(x0_i) - rho, 0), sqrt(x0_i) + rho].
    """
    ell = check_ellipticity(field, cube, grid_density)
    lam = field.lam
    rho = cube.rho
    pts = _grid_points(cube, grid_density)
    s_pts = np.sqrt(pts)
    margins = dict(ell.margins)
    for i, c in enumerate(cube.center.s):
        band_lo = max(c - rho, 0.0)
        band_hi = min(c + rho, rho)
        in_band = (s_pts[:, i] >= band_lo) & (s_pts[:, i] <= band_hi)
        if not np.any(in_band):
            margins[f"boundary_drift_{i}"] = np.inf
            continue
        worst = min(float(field.b(x)[i]) for x in pts[in_band])
        margins[f"boundary_drift_{i}"] = worst - 1.0 / lam
    passed = all(v >= 0.0 for v in margins.values())
    return ConditionReport("condition_cprime", passed, margins)


def check_inv_conditions(field: CoefficientField, points: np.ndarray) -> ConditionReport:
    """Coefficient bounds for invariant-measure existence/uniqueness:
    lam I >= a(x) >= lam^-1 I and lam >= b_i(x) >= -lam * x_i on the sample.
    """
    lam = field.lam
    eig_lo = np.inf
    eig_hi = np.inf
    b_hi = np.inf
    b_lo = np.inf
    for x in np.atleast_2d(np.asarray(points, dtype=np.float64)):
        ev = np.linalg.eigvalsh(np.asarray(field.a(x), dtype=np.float64))
        eig_lo = min(eig_lo, ev[0] - 1.0 / lam)
        eig_hi = min(eig_hi, lam - ev[-1])
        b = np.asarray(field.b(x), dtype=np.float64)
        b_hi = min(b_hi, float(np.min(lam - b)))
        b_lo = min(b_lo, float(np.min(b + lam * x)))
    margins = {"eig_lower": float(eig_lo), "eig_upper": float(eig_hi),
               "drift_upper": float(b_hi), "drift_lower": float(b_lo)}
    return ConditionReport("inv_measure_bounds", all(v >= 0.0 for v in margins.values()), margins)
