# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled path kernels: scalar per-path loops mirroring _kernels_py.

The counter-based generator and the inverse-CDF normal transform are
re-implemented here with identical arithmetic, so both backends draw the
same streams for the same (seed, path, counter) triples.
"""

import numpy as np

from libc.math cimport ceil, log, sqrt

BACKEND = "cython"

STOP_HORIZON = 0
STOP_HIT = 1
STOP_EXIT = 2

cdef signed char C_HORIZON = 0
cdef signed char C_HIT = 1
cdef signed char C_EXIT = 2

cdef extern from *:
    """
    #include <stdint.h>
    static inline uint64_t sqmc_mix64(uint64_t z) {
        z += 0x9E3779B97F4A7C15ULL;
        z ^= z >> 30; z *= 0xBF58476D1CE4E5B9ULL;
        z ^= z >> 27; z *= 0x94D049BB133111EBULL;
        z ^= z >> 31;
        return z;
    }
    """
    unsigned long long sqmc_mix64(unsigned long long z) nogil


cdef inline double _uniform(unsigned long long key, unsigned long long stream,
                            unsigned long long ctr) nogil:
    cdef unsigned long long bits = sqmc_mix64(sqmc_mix64(key ^ stream) ^ ctr)
    return ((bits >> 11) + 0.5) * (1.0 / 9007199254740992.0)


cdef double _ppnd16(double p) nogil:
    cdef double q = p - 0.5
    cdef double r, num, den
    if q <= 0.425 and q >= -0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    if q < 0.0:
        r = p
    else:
        r = 1.0 - p
    r = sqrt(-log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    if q < 0.0:
        return -num / den
    return num / den


cdef inline double _normal(unsigned long long key, unsigned long long stream,
                           unsigned long long ctr) nogil:
    return _ppnd16(_uniform(key, stream, ctr))


cdef bint _in_gamma(double t_lo, double dt, long m_t, double[::1] s_lo,
                    double[::1] ds, long[::1] dims, unsigned char[::1] mask,
                    double t, double[:] x, int n) nogil:
    cdef long it = <long> ((t - t_lo) / dt)
    if (t - t_lo) < 0 or it < 0 or it >= m_t:
        return False
    cdef long flat = 0, mult = 1, cell
    cdef int i
    cdef double si
    for i in range(n - 1, -1, -1):
        si = sqrt(x[i])
        cell = <long> ((si - s_lo[i]) / ds[i])
        if (si - s_lo[i]) < 0 or cell < 0 or cell >= dims[i]:
            return False
        flat += cell * mult
        mult *= dims[i]
    flat += it * mult
    return mask[flat] != 0


def euler_marginal(spec, x0, double h, int n_steps, key, path_ids):
    cdef int kind_code = 0 if spec["kind"] == "constant" else 1
    cdef int n = spec["n"]
    if n > 16:
        raise ValueError("compiled kernels support at most 16 axes")
    cdef unsigned long long k64 = <unsigned long long> key
    ids_arr = np.ascontiguousarray(path_ids, dtype=np.uint64)
    cdef unsigned long long[::1] ids = ids_arr
    cdef Py_ssize_t n_paths = ids.shape[0]
    x_arr = np.array(np.broadcast_to(x0, (n_paths, n)), dtype=np.float64, order="C")
    cdef double[:, ::1] x = x_arr

    cdef double[::1] cb, ck, cm, cs
    cdef double[:, ::1] sig
    if kind_code == 0:
        cb = np.ascontiguousarray(spec["b"], dtype=np.float64)
        sig = np.ascontiguousarray(spec["sig"], dtype=np.float64)
        ck = cb; cm = cb; cs = cb  # unused
    else:
        ck = np.ascontiguousarray(spec["kappa"], dtype=np.float64)
        cm = np.ascontiguousarray(spec["mean"], dtype=np.float64)
        cs = np.ascontiguousarray(spec["sig"], dtype=np.float64)
        cb = ck
        sig = np.zeros((1, 1))

    cdef double sqrt_h = sqrt(h)
    cdef Py_ssize_t p
    cdef int k, i, j
    cdef double z[16]
    cdef double xi, d
    with nogil:
        for p in range(n_paths):
            for k in range(n_steps):
                for j in range(n):
                    z[j] = _normal(k64, ids[p], <unsigned long long> (k * n + j))
                if kind_code == 0:
                    for i in range(n):
                        d = 0.0
                        for j in range(n):
                            d += sig[i, j] * z[j]
                        xi = x[p, i] + cb[i] * h + sqrt(x[p, i]) * d * sqrt_h
                        x[p, i] = xi if xi > 0.0 else 0.0
                else:
                    for i in range(n):
                        xi = x[p, i] + ck[i] * (cm[i] - x[p, i]) * h \
                            + sqrt(x[p, i]) * cs[i] * z[i] * sqrt_h
                        x[p, i] = xi if xi > 0.0 else 0.0
    return x_arr


def euler_stopped(spec, x0, double t_start, double h, q, gamma, key, path_ids):
    cdef int kind_code = 0 if spec["kind"] == "constant" else 1
    cdef int n = spec["n"]
    if n > 16:
        raise ValueError("compiled kernels support at most 16 axes")
    cdef unsigned long long k64 = <unsigned long long> key
    ids_arr = np.ascontiguousarray(path_ids, dtype=np.uint64)
    cdef unsigned long long[::1] ids = ids_arr
    cdef Py_ssize_t n_paths = ids.shape[0]
    x_arr = np.array(np.broadcast_to(x0, (n_paths, n)), dtype=np.float64, order="C")
    cdef double[:, ::1] x = x_arr

    cdef double[::1] cb, ck, cm, cs
    cdef double[:, ::1] sig
    if kind_code == 0:
        cb = np.ascontiguousarray(spec["b"], dtype=np.float64)
        sig = np.ascontiguousarray(spec["sig"], dtype=np.float64)
        ck = cb; cm = cb; cs = cb
    else:
        ck = np.ascontiguousarray(spec["kappa"], dtype=np.float64)
        cm = np.ascontiguousarray(spec["mean"], dtype=np.float64)
        cs = np.ascontiguousarray(spec["sig"], dtype=np.float64)
        cb = ck
        sig = np.zeros((1, 1))

    cdef double[::1] q_slo = np.ascontiguousarray(q["s_lo"], dtype=np.float64)
    cdef double[::1] q_shi = np.ascontiguousarray(q["s_hi"], dtype=np.float64)
    cdef double t_end = q["t_end"]

    cdef bint has_gamma = gamma is not None
    cdef double g_tlo = 0.0, g_dt = 1.0
    cdef long g_mt = 0
    cdef double[::1] g_slo, g_ds
    cdef long[::1] g_dims
    cdef unsigned char[::1] g_mask
    if has_gamma:
        g_tlo = gamma["t_lo"]; g_dt = gamma["dt"]; g_mt = gamma["m_t"]
        g_slo = np.ascontiguousarray(gamma["s_lo"], dtype=np.float64)
        g_ds = np.ascontiguousarray(gamma["ds"], dtype=np.float64)
        g_dims = np.ascontiguousarray(gamma["dims"], dtype=np.int64)
        g_mask = np.ascontiguousarray(gamma["mask"], dtype=np.uint8)
    else:
        g_slo = np.zeros(1); g_ds = np.ones(1)
        g_dims = np.ones(1, dtype=np.int64)
        g_mask = np.zeros(1, dtype=np.uint8)

    kind_arr = np.full(n_paths, STOP_HORIZON, dtype=np.int8)
    t_arr = np.full(n_paths, t_start, dtype=np.float64)
    stop_arr = x_arr.copy()
    cdef signed char[::1] kind = kind_arr
    cdef double[::1] t_stop = t_arr
    cdef double[:, ::1] x_stop = stop_arr

    cdef long n_steps = <long> ceil((t_end - t_start) / h - 1e-9)
    if n_steps < 1:
        n_steps = 1
    cdef double sqrt_h = sqrt(h)
    cdef Py_ssize_t p
    cdef long k
    cdef int i, j
    cdef double z[16]
    cdef double xi, d, t, si
    cdef bint hit, inside, last

    with nogil:
        for p in range(n_paths):
            # initial hit check at the start time
            if has_gamma and _in_gamma(g_tlo, g_dt, g_mt, g_slo, g_ds, g_dims,
                                       g_mask, t_start, x[p, :], n):
                kind[p] = C_HIT
                continue
            for k in range(n_steps):
                t = t_start + (k + 1) * h
                last = k == n_steps - 1
                for j in range(n):
                    z[j] = _normal(k64, ids[p], <unsigned long long> (k * n + j))
                if kind_code == 0:
                    for i in range(n):
                        d = 0.0
                        for j in range(n):
                            d += sig[i, j] * z[j]
                        xi = x[p, i] + cb[i] * h + sqrt(x[p, i]) * d * sqrt_h
                        x[p, i] = xi if xi > 0.0 else 0.0
                else:
                    for i in range(n):
                        xi = x[p, i] + ck[i] * (cm[i] - x[p, i]) * h \
                            + sqrt(x[p, i]) * cs[i] * z[i] * sqrt_h
                        x[p, i] = xi if xi > 0.0 else 0.0

                hit = False
                if has_gamma and t < t_end:
                    hit = _in_gamma(g_tlo, g_dt, g_mt, g_slo, g_ds, g_dims,
                                    g_mask, t, x[p, :], n)
                if hit:
                    kind[p] = C_HIT
                    t_stop[p] = t
                    for i in range(n):
                        x_stop[p, i] = x[p, i]
                    break
                if last:
                    kind[p] = C_HORIZON
                    t_stop[p] = t if t < t_end else t_end
                    for i in range(n):
                        x_stop[p, i] = x[p, i]
                    break
                inside = True
                for i in range(n):
                    si = sqrt(x[p, i])
                    if si < q_slo[i] or si >= q_shi[i]:
                        inside = False
                        break
                if not inside:
                    kind[p] = C_EXIT
                    t_stop[p] = t
                    for i in range(n):
                        x_stop[p, i] = x[p, i]
                    break
    return kind_arr, t_arr, stop_arr
