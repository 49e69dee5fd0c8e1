# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dual-ascent iteration for the entropy perturbation.

Same contract as ``purc_ta._fallback.iterate``. Per-type work runs in an
OpenMP ``prange``; every cross-type reduction is done per link (or serially)
in type order, so results do not depend on the thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport expm1, log1p, pow, fabs

cnp.import_array()

ctypedef cnp.int64_t idx_t

cdef extern from *:
    """
    #ifdef _OPENMP
    #include <omp.h>
    #define OPENMP_ENABLED 1
    static int default_threads(void) { return omp_get_max_threads(); }
    #else
    #define OPENMP_ENABLED 0
    static int default_threads(void) { return 1; }
    #endif
    """
    bint OPENMP_ENABLED
    int default_threads() nogil


cdef double MAX_EXPONENT = 30.0


def openmp_enabled():
    return OPENMP_ENABLED


def iterate(double[:, ::1] eta, double[:, ::1] eta_tilde, double[::1] tstar,
            double[:, ::1] x, const idx_t[::1] tail, const idx_t[::1] head,
            const double[::1] t0, const double[::1] cap, const double[::1] beta,
            const double[::1] power, const double[::1] q, const double[::1] theta,
            const double[::1] zweight, const idx_t[::1] orig, const idx_t[::1] dest,
            bint clip, bint scaled,
            double step, double momentum, double gamma2, double theta_ref,
            int threads=0, perturbation=None, incidence=None):
    cdef Py_ssize_t n_types = eta.shape[0]
    cdef Py_ssize_t n_nodes = eta.shape[1]
    cdef Py_ssize_t n_links = tail.shape[0]
    cdef Py_ssize_t w, e, v, i, j, k
    cdef int nthreads = threads if threads > 0 else 0

    grad_arr = np.zeros((n_types, n_nodes))
    den_arr = np.zeros((n_types, n_nodes))
    fsum_arr = np.zeros(n_types)
    mult_arr = np.zeros(n_types)
    r1_arr = np.zeros(n_types)
    clamp_arr = np.zeros(n_types, dtype=np.int64)
    tx_arr = np.zeros(n_links)
    integ_arr = np.zeros(n_links)
    skip_arr = np.zeros(n_links, dtype=np.int64)
    cdef double[:, ::1] grad = grad_arr
    cdef double[:, ::1] den = den_arr
    cdef double[::1] fsum = fsum_arr
    cdef double[::1] mult = mult_arr
    cdef double[::1] r1 = r1_arr
    cdef idx_t[::1] nclamp = clamp_arr
    cdef double[::1] tx = tx_arr
    cdef double[::1] integ = integ_arr
    cdef idx_t[::1] skipped = skip_arr

    cdef double y, xe, diff, fs, mu, acc, d, new, c
    cdef double X, S, xw, U, dU, tn, ratio
    cdef idx_t nc

    if nthreads == 0:
        nthreads = default_threads()

    # per-type: load, node balance, curvature sums, objectives, potential update
    for w in prange(n_types, nogil=True, schedule="static", num_threads=nthreads):
        fs = 0.0
        mu = 0.0
        nc = 0
        c = theta[w]
        for e in range(n_links):
            i = tail[e]
            j = head[e]
            diff = eta[w, i] - eta[w, j]
            y = diff - c * tstar[e]
            if y > MAX_EXPONENT:
                y = MAX_EXPONENT
                nc = nc + 1
            if y > 0.0:
                xe = expm1(y)
                if clip and xe > 1.0:
                    xe = 1.0
            else:
                xe = 0.0
            x[w, e] = xe
            grad[w, j] += xe
            grad[w, i] -= xe
            den[w, j] += 1.0 + xe
            den[w, i] += 1.0 + xe
            if xe > 0.0:
                fs = fs + (1.0 + xe) * log1p(xe) - xe
                mu = mu + diff * xe
        grad[w, orig[w]] += 1.0
        grad[w, dest[w]] -= 1.0
        mu = mu + eta[w, dest[w]] - eta[w, orig[w]]
        acc = 0.0
        for v in range(n_nodes):
            acc = acc + fabs(grad[w, v])
        fsum[w] = fs
        mult[w] = mu
        r1[w] = acc
        nclamp[w] = nc
        for v in range(n_nodes):
            if v == dest[w]:
                continue
            if scaled:
                if den[w, v] > 0.0:
                    d = step * grad[w, v] / den[w, v]
                else:
                    d = 0.0
            else:
                d = step * q[w] * grad[w, v]
            new = eta[w, v] + d
            eta[w, v] = new + momentum * (new - eta_tilde[w, v])
            eta_tilde[w, v] = new

    # per-link: aggregate in type order, Newton step on the time fixed point
    for e in prange(n_links, nogil=True, schedule="static", num_threads=nthreads):
        X = 0.0
        S = 0.0
        for k in range(n_types):
            xw = x[k, e]
            if xw > 0.0:
                X = X + q[k] * xw
                S = S + q[k] * theta[k] * (1.0 + xw)
        ratio = pow(X / cap[e], power[e])
        tx[e] = t0[e] * (1.0 + beta[e] * ratio)
        integ[e] = t0[e] * (X + beta[e] * ratio * X / (power[e] + 1.0))
        U = tx[e] - tstar[e]
        if X > 0.0:
            dU = -(t0[e] * beta[e] * power[e] * ratio / X) * S - 1.0
        else:
            dU = -1.0
        if fabs(dU) < 1e-12:
            skipped[e] = 1
        else:
            tn = tstar[e] - gamma2 * U / dU
            if tn < t0[e]:
                tn = t0[e]
            tstar[e] = tn

    cdef double total = 0.0, r1_sum = 0.0, z = 0.0, g = 0.0, r2 = 0.0
    cdef idx_t n_clamped = 0, n_skipped = 0
    for w in range(n_types):
        total += q[w]
        r1_sum += q[w] * r1[w]
        z += zweight[w] * q[w] * fsum[w]
        g += zweight[w] * q[w] * mult[w]
        n_clamped += nclamp[w]
    acc = 0.0
    for e in range(n_links):
        acc += integ[e]
        r2 += fabs(tx[e] - tstar[e])
        n_skipped += skipped[e]
    z += theta_ref * acc
    g = z - g
    return (int(n_clamped), int(n_skipped),
            r1_sum / total / n_nodes if total > 0 else 0.0,
            r2 / n_links if n_links > 0 else 0.0, z, g)
