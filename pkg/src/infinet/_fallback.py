"""Pure NumPy/Python implementations of the hot loops.

These define the reference semantics; ``_core.pyx`` mirrors them line for line.
"""

import numpy as np

MAX_BACKTRACK = 30
LOG_SHIFT_TOL = 1e-8


def _j_relu(rho):
    theta = np.arccos(rho)
    return (np.sin(theta) + (np.pi - theta) * rho) / (2 * np.pi)


def _j_step(rho):
    return (np.pi - np.arccos(rho)) / (2 * np.pi)


def analytic_kernel_matrix(dots, sq_a, sq_b, act, depth, alpha, symmetric, tol):
    """Canonical arc-cosine kernels (depth 1) or their SE-GP composition (depth 2).

    ``dots[i, j] = <a_i, b_j>``; ``sq_a``/``sq_b`` are squared norms.
    Returns ``(matrix, number of correlations clamped by more than tol)``.
    """
    na = np.sqrt(sq_a)
    nb = np.sqrt(sq_b)
    denom = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    if symmetric:
        np.fill_diagonal(rho, np.where(sq_a > 0, 1.0, 0.0))
    n_clamped = int(np.count_nonzero(np.abs(rho) - 1.0 > tol))
    rho = np.clip(rho, -1.0, 1.0)
    if depth == 1:
        out = denom * _j_relu(rho) if act == 0 else _j_step(rho)
    else:
        r0 = alpha / (1.0 + alpha)
        if act == 0:
            j0 = _j_relu(r0)
            inner = np.minimum(_j_relu(r0 * rho) / j0, 1.0)
            out = (1.0 + alpha) * denom * j0 * _j_relu(inner)
        else:
            inner = np.minimum(_j_step(r0 * rho) / _j_step(r0), 1.0)
            out = _j_step(inner)
    if symmetric:
        out = np.triu(out) + np.triu(out, 1).T
    return np.ascontiguousarray(out), n_clamped


def eg_epoch(G, y, log_alpha, S, eta, lam, fixed, updated, order, inner=1, rel_tol=1e-13):
    """One cycle of exponentiated-gradient row updates on the KLR dual.

    Each visited row takes up to ``inner`` EG steps on its own block of the
    dual (its scores move only through ``G[i, i]`` meanwhile), then the other
    rows' scores get one rank-one update. Inner steps stop early once a step
    improves the row objective by less than ``rel_tol``.

    ``G`` must be symmetric. Mutates ``log_alpha``, ``S`` (scores
    ``G @ beta``), ``eta`` and ``updated`` in place. Returns the number of
    rows that moved.
    """
    m, K = log_alpha.shape
    lam_m = lam * m
    accepted = 0
    for i in order:
        s = S[i].copy()
        la0 = log_alpha[i].copy()
        a0 = np.exp(la0)
        c = G[i, i] / (2.0 * lam_m)
        la, a = la0, a0
        # row objective up to a constant: a.log a - (a - a0).s + c |a - a0|^2
        phi = float(np.dot(a0, la0))
        # a step remembered from a converged row can be round-off small
        e = eta[i] if fixed else 1.0
        moved = False
        for _ in range(inner):
            g = s - 2.0 * c * (a - a0)
            ok = False
            for _ in range(MAX_BACKTRACK):
                z = (1.0 - e) * la + e * g
                zmax = z.max()
                la_new = z - (zmax + np.log(np.exp(z - zmax).sum()))
                a_new = np.exp(la_new)
                # change of the row objective, accumulated from the step itself
                step = a_new - a
                delta = float(np.sum(step * la_new + a * (la_new - la) - step * s
                                     + c * step * (a_new + a - 2.0 * a0)))
                if fixed or delta <= 0.0:
                    ok = True
                    break
                e *= 0.5
            if not ok:
                e = 1.0
                break
            gain = -delta
            shift = float(np.abs(la_new - la).max())
            la, a, phi = la_new, a_new, phi + delta
            moved = True
            if not fixed:
                e = min(1.0, 2.0 * e)
            # weights that underflow to 0 give no gain while their logs still move
            if gain <= rel_tol * (1.0 + abs(phi)) and shift <= LOG_SHIFT_TOL:
                break
        eta[i] = e
        d = a - a0
        if moved and np.any(d != 0.0):
            S -= np.outer(G[i], d / lam_m)
            log_alpha[i] = la
            updated[i] = 1
            accepted += 1
    return accepted


def pa_pass(G, y, beta, S, order):
    """One pass of multiclass passive-aggressive updates (max-violation form).

    Returns ``(updates, mistakes, sum of squared hinge losses at update time)``.
    """
    updates = mistakes = 0
    sumsq = 0.0
    K = beta.shape[1]
    for t in order:
        s = S[t]
        yt = y[t]
        r = -1
        best = -np.inf
        for k in range(K):
            if k != yt and s[k] > best:
                best = s[k]
                r = k
        margin = s[yt] - best
        if margin <= 0.0:
            mistakes += 1
        loss = 1.0 - margin
        gtt = G[t, t]
        if loss > 0.0 and gtt > 0.0:
            tau = loss / (2.0 * gtt)
            beta[t, yt] += tau
            beta[t, r] -= tau
            col = G[:, t]
            S[:, yt] += tau * col
            S[:, r] -= tau * col
            updates += 1
            sumsq += loss * loss
    return updates, mistakes, sumsq
