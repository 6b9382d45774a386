# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Semantics match ``_fallback.py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport acos, sin, sqrt, exp, log, fabs, M_PI, INFINITY

cnp.import_array()

DEF MAX_BACKTRACK = 30
DEF LOG_SHIFT_TOL = 1e-8


cdef inline double j_relu(double rho) nogil:
    cdef double theta = acos(rho)
    return (sin(theta) + (M_PI - theta) * rho) / (2.0 * M_PI)


cdef inline double j_step(double rho) nogil:
    return (M_PI - acos(rho)) / (2.0 * M_PI)


def analytic_kernel_matrix(double[:, ::1] dots, double[::1] sq_a, double[::1] sq_b,
                           int act, int depth, double alpha, bint symmetric, double tol):
    cdef Py_ssize_t na = dots.shape[0], nb = dots.shape[1]
    cdef Py_ssize_t i, j, j0
    cdef double ni, nj, denom, rho, r0, j0r, j0s, inner, v
    cdef long n_clamped = 0
    out_arr = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    r0 = alpha / (1.0 + alpha)
    j0r = j_relu(r0)
    j0s = j_step(r0)
    with nogil:
        for i in range(na):
            ni = sqrt(sq_a[i])
            j0 = i if symmetric else 0
            for j in range(j0, nb):
                nj = sqrt(sq_b[j])
                denom = ni * nj
                if symmetric and i == j:
                    rho = 1.0 if sq_a[i] > 0 else 0.0
                elif denom > 0:
                    rho = dots[i, j] / denom
                else:
                    rho = 0.0
                if rho > 1.0 or rho < -1.0:
                    if (rho - 1.0 > tol) or (-rho - 1.0 > tol):
                        n_clamped += 1
                    rho = 1.0 if rho > 0 else -1.0
                if depth == 1:
                    if act == 0:
                        v = denom * j_relu(rho)
                    else:
                        v = j_step(rho)
                else:
                    if act == 0:
                        inner = j_relu(r0 * rho) / j0r
                        if inner > 1.0:
                            inner = 1.0
                        v = (1.0 + alpha) * denom * j0r * j_relu(inner)
                    else:
                        inner = j_step(r0 * rho) / j0s
                        if inner > 1.0:
                            inner = 1.0
                        v = j_step(inner)
                out[i, j] = v
                if symmetric:
                    out[j, i] = v
    return out_arr, n_clamped


def eg_epoch(double[:, ::1] G, long[::1] y, double[:, ::1] log_alpha, double[:, ::1] S,
             double[::1] eta, double lam, bint fixed, unsigned char[::1] updated,
             long[::1] order, int inner=1, double rel_tol=1e-13):
    cdef Py_ssize_t m = log_alpha.shape[0], K = log_alpha.shape[1]
    cdef Py_ssize_t t, i, k, r, bt, it
    cdef double lam_m = lam * m
    cdef double c, e, zmax, lse, phi, delta, step, gi, gain, shift
    cdef bint ok, moved, nonzero
    cdef long accepted = 0
    cdef double[::1] a0 = np.empty(K)
    cdef double[::1] a = np.empty(K)
    cdef double[::1] la = np.empty(K)
    cdef double[::1] g = np.empty(K)
    cdef double[::1] z = np.empty(K)
    cdef double[::1] la_new = np.empty(K)
    cdef double[::1] a_new = np.empty(K)
    with nogil:
        for t in range(order.shape[0]):
            i = order[t]
            phi = 0.0
            for k in range(K):
                la[k] = log_alpha[i, k]
                a0[k] = exp(la[k])
                a[k] = a0[k]
                phi += a0[k] * la[k]
            c = G[i, i] / (2.0 * lam_m)
            # a step remembered from a converged row can be round-off small
            e = eta[i] if fixed else 1.0
            moved = False
            for it in range(inner):
                for k in range(K):
                    g[k] = S[i, k] - 2.0 * c * (a[k] - a0[k])
                ok = False
                for bt in range(MAX_BACKTRACK):
                    zmax = -INFINITY
                    for k in range(K):
                        z[k] = (1.0 - e) * la[k] + e * g[k]
                        if z[k] > zmax:
                            zmax = z[k]
                    lse = 0.0
                    for k in range(K):
                        lse += exp(z[k] - zmax)
                    lse = zmax + log(lse)
                    # change of the row objective, accumulated from the step itself
                    delta = 0.0
                    for k in range(K):
                        la_new[k] = z[k] - lse
                        a_new[k] = exp(la_new[k])
                        step = a_new[k] - a[k]
                        delta += (step * la_new[k] + a[k] * (la_new[k] - la[k]) - step * S[i, k]
                                  + c * step * (a_new[k] + a[k] - 2.0 * a0[k]))
                    if fixed or delta <= 0.0:
                        ok = True
                        break
                    e *= 0.5
                if not ok:
                    e = 1.0
                    break
                gain = -delta
                shift = 0.0
                for k in range(K):
                    if fabs(la_new[k] - la[k]) > shift:
                        shift = fabs(la_new[k] - la[k])
                    la[k] = la_new[k]
                    a[k] = a_new[k]
                phi += delta
                moved = True
                if not fixed:
                    e = 2.0 * e if 2.0 * e < 1.0 else 1.0
                # weights that underflow to 0 give no gain while their logs still move
                if gain <= rel_tol * (1.0 + fabs(phi)) and shift <= LOG_SHIFT_TOL:
                    break
            eta[i] = e
            nonzero = False
            for k in range(K):
                if a[k] != a0[k]:
                    nonzero = True
            if moved and nonzero:
                for k in range(K):
                    g[k] = (a[k] - a0[k]) / lam_m
                # G is symmetric: read row i, which is contiguous
                for r in range(m):
                    gi = G[i, r]
                    for k in range(K):
                        S[r, k] -= gi * g[k]
                for k in range(K):
                    log_alpha[i, k] = la[k]
                updated[i] = 1
                accepted += 1
    return accepted


def pa_pass(double[:, ::1] G, long[::1] y, double[:, ::1] beta, double[:, ::1] S,
            long[::1] order):
    cdef Py_ssize_t m = S.shape[0], K = S.shape[1]
    cdef Py_ssize_t n, t, k, r, yt
    cdef long updates = 0, mistakes = 0
    cdef double sumsq = 0.0, best, margin, loss, gtt, tau
    with nogil:
        for n in range(order.shape[0]):
            t = order[n]
            yt = y[t]
            r = -1
            best = -INFINITY
            for k in range(K):
                if k != yt and S[t, k] > best:
                    best = S[t, k]
                    r = k
            margin = S[t, yt] - best
            if margin <= 0.0:
                mistakes += 1
            loss = 1.0 - margin
            gtt = G[t, t]
            if loss > 0.0 and gtt > 0.0:
                tau = loss / (2.0 * gtt)
                beta[t, yt] += tau
                beta[t, r] -= tau
                for k in range(m):
                    S[k, yt] += tau * G[k, t]
                    S[k, r] -= tau * G[k, t]
                updates += 1
                sumsq += loss * loss
    return updates, mistakes, sumsq
