"""Counter-based random numbers for reproducible parallel Monte Carlo.

Every variate is a pure function of ``(seed, stream, counter)``, so path
``p`` can be regenerated in isolation and results never depend on how paths
are sharded across workers.  The generator is a keyed chain of splitmix64
finalizer rounds; uniforms come from the top 53 bits and normals from the
AS241 inverse of the standard normal CDF, so the compiled kernels can
reproduce the exact same streams with scalar arithmetic.

Gamma/Poisson draws (needed by the exact square-root-process sampler) use
NumPy's Philox generator instead, keyed per fixed-size path block; the block
size is a module constant and must never depend on the worker count.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_SEED_SALT = 0x5143414D4F524E54

#: Paths are grouped into blocks of this size for library-backed draws
#: (gamma/Poisson).  Part of the stream definition: changing it changes
#: every result, so it is deliberately not configurable.
BLOCK_SIZE = 4096

# Stream labels, one per consumer of randomness.  Estimator sweeps offset
# these by a per-call index so simultaneous runs never share a stream.
LABEL_EULER = 0x01
LABEL_EXACT = 0x02
LABEL_GRIDSET = 0x03
LABEL_RESCALE = 0x04


def mix64_scalar(z: int) -> int:
    """One splitmix64 finalizer round on a Python int (mod 2**64)."""
    z = (z + _GAMMA) & _MASK64
    z ^= z >> 30
    z = (z * _MIX1) & _MASK64
    z ^= z >> 27
    z = (z * _MIX2) & _MASK64
    z ^= z >> 31
    return z


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(_GAMMA)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


def stream_key(seed: int, label: int) -> int:
    """Derive the 64-bit key of a named stream family."""
    return mix64_scalar(mix64_scalar((seed ^ _SEED_SALT) & _MASK64) ^ (label & _MASK64))


def raw_uint64(key: int, stream, counter) -> np.ndarray:
    """Counter-based 64-bit words; ``stream``/``counter`` broadcast."""
    s = np.asarray(stream, dtype=np.uint64)
    c = np.asarray(counter, dtype=np.uint64)
    return _mix64(_mix64(np.uint64(key) ^ s) ^ c)


def uniforms(key: int, stream, counter) -> np.ndarray:
    """Doubles strictly inside (0, 1), one per (stream, counter) pair."""
    bits = raw_uint64(key, stream, counter)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


# AS241 coefficients for the inverse standard normal CDF (double precision).
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _poly(coeffs, r):
    acc = np.full_like(r, coeffs[7])
    for c in coeffs[6::-1]:
        acc = acc * r + c
    return acc


def norm_ppf(p: np.ndarray) -> np.ndarray:
    """Inverse standard normal CDF (Wichura's AS241, ~1e-15 accurate)."""
    p = np.asarray(p, dtype=np.float64)
    q = p - 0.5
    out = np.empty_like(p)

    central = np.abs(q) <= 0.425
    r = 0.180625 - q * q
    with np.errstate(invalid="ignore"):
        out = np.where(central, q * _poly(_A, r) / _poly(_B, r), 0.0)

    tail = ~central
    if np.any(tail):
        pt = p[tail]
        qt = q[tail]
        rt = np.where(qt < 0.0, pt, 1.0 - pt)
        rt = np.sqrt(-np.log(rt))
        near = rt <= 5.0
        rn = np.where(near, rt - 1.6, rt - 5.0)
        val = np.where(near,
                       _poly(_C, rn) / _poly(_D, rn),
                       _poly(_E, rn) / _poly(_F, rn))
        out[tail] = np.where(qt < 0.0, -val, val)
    return out


def normals(key: int, stream, counter) -> np.ndarray:
    """Standard normal variates, one uniform consumed per normal."""
    return norm_ppf(uniforms(key, stream, counter))


def block_generator(seed: int, label: int, block_index: int) -> np.random.Generator:
    """Philox generator for one path block, keyed independently of workers."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, label) ^ block_index))


def block_slices(n: int):
    """Fixed decomposition of ``range(n)`` into BLOCK_SIZE chunks."""
    return [(b, slice(b * BLOCK_SIZE, min((b + 1) * BLOCK_SIZE, n)))
            for b in range((n + BLOCK_SIZE - 1) // BLOCK_SIZE)]
