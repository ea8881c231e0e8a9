"""Compiled inner loop of the ALS sweep.

All factor matrices live stacked in one array ``A`` (mode ``n`` occupies rows
``offsets[n]:offsets[n + 1]``). Row ``offsets[N] + n`` is a virtual row that
holds ``p_n^T A_n``; cells with a missing mode-``n`` predictor point at it, so
the Khatri-Rao products need no special casing.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _cholesky_solve(lhs, b, out):
    f = lhs.shape[0]
    low = np.zeros((f, f))
    for j in range(f):
        s = lhs[j, j]
        for p in range(j):
            s -= low[j, p] * low[j, p]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        low[j, j] = d
        for i in range(j + 1, f):
            s = lhs[i, j]
            for p in range(j):
                s -= low[i, p] * low[j, p]
            low[i, j] = s / d
    z = np.empty(f)
    for i in range(f):
        s = b[i]
        for p in range(i):
            s -= low[i, p] * z[p]
        z[i] = s / low[i, i]
    for i in range(f - 1, -1, -1):
        s = z[i]
        for p in range(i + 1, f):
            s -= low[p, i] * out[p]
        out[i] = s / low[i, i]
    return True


@njit(cache=True)
def _min_norm_solve(lhs, b, out):
    vals, vecs = np.linalg.eigh(lhs)
    cutoff = max(vals.max(), 0.0) * lhs.shape[0] * np.finfo(np.float64).eps
    coef = vecs.T @ b
    out[:] = 0.0
    deficient = False
    for j in range(vals.size):
        if vals[j] > cutoff:
            out += vecs[:, j] * (coef[j] / vals[j])
        else:
            deficient = True
    return deficient


@njit(cache=True)
def _cell_row(A, rows, c, skip, h):
    h[:] = 1.0
    for n in range(rows.shape[1]):
        if n != skip:
            r = rows[c, n]
            for f in range(h.size):
                h[f] *= A[r, f]


# from this rank on, a BLAS product over the gathered rows beats scalar loops
BLAS_RANK = 4


@njit(cache=True)
def _accumulate(A, rows, order, lo, hi, skip, ws, yv, gram, rhs, h, buf, wbuf):
    f_dim = h.size
    gram[:, :] = 0.0
    rhs[:] = 0.0
    if f_dim >= BLAS_RANK and hi > lo:
        n = hi - lo
        for t in range(n):
            c = order[lo + t]
            _cell_row(A, rows, c, skip, h)
            w = ws[c]
            for i in range(f_dim):
                buf[t, i] = h[i]
                wbuf[t, i] = w * h[i]
                rhs[i] += w * h[i] * yv[c, i]
        gram[:, :] = wbuf[:n].T @ buf[:n]
        return
    for t in range(lo, hi):
        c = order[t]
        _cell_row(A, rows, c, skip, h)
        w = ws[c]
        for i in range(f_dim):
            wi = w * h[i]
            rhs[i] += wi * yv[c, i]
            for j in range(i, f_dim):
                gram[i, j] += wi * h[j]
    for i in range(f_dim):
        for j in range(i):
            gram[i, j] = gram[j, i]


@njit(cache=True)
def sweep_modes(A, offsets, sizes, rows, order, bounds, ws, yv, vtv, pinned,
                rho, mu, dg, pmf):
    """Update every mode's rows in place (modes ascending, rows ascending).

    Returns the number of unregularized rows whose system was singular.
    """
    n_modes = sizes.size
    f_dim = A.shape[1]
    virt0 = offsets[n_modes]
    h = np.empty(f_dim)
    gram = np.empty((f_dim, f_dim))
    rhs = np.empty(f_dim)
    r_gram = np.zeros((f_dim, f_dim))
    r_rhs = np.zeros(f_dim)
    new = np.empty(f_dim)
    longest = 0
    for k in range(n_modes):
        for i in range(sizes[k] + 1):
            longest = max(longest, bounds[k, i + 1] - bounds[k, i])
    buf = np.empty((longest, f_dim))
    wbuf = np.empty((longest, f_dim))
    fallbacks = 0
    for k in range(n_modes):
        A[virt0 + k, :] = 0.0
        for i in range(sizes[k]):
            A[virt0 + k, :] += pmf[k, i] * A[offsets[k] + i, :]
    for k in range(n_modes):
        size = sizes[k]
        base = offsets[k]
        virt = virt0 + k
        miss_lo, miss_hi = bounds[k, size], bounds[k, size + 1]
        has_missing = miss_hi > miss_lo
        if has_missing:
            _accumulate(A, rows, order[k], miss_lo, miss_hi, k, ws, yv, r_gram, r_rhs, h,
                        buf, wbuf)
            if not pinned:
                r_gram *= vtv
            A[virt, :] = 0.0
            for i in range(size):
                A[virt, :] += pmf[k, i] * A[base + i, :]
        mk = mu[k]
        for i in range(size):
            _accumulate(A, rows, order[k], bounds[k, i], bounds[k, i + 1], k, ws, yv,
                        gram, rhs, h, buf, wbuf)
            if not pinned:
                gram *= vtv
            diag = rho + mk * dg[k, i, i]
            for j in range(f_dim):
                gram[j, j] += diag
            if mk > 0.0:
                for q in range(size):
                    d = dg[k, i, q]
                    if q != i and d != 0.0:
                        rhs -= mk * d * A[base + q, :]
            if has_missing:
                p = pmf[k, i]
                if p > 0.0:
                    gram += (p * p) * r_gram
                    resid = A[virt, :] - p * A[base + i, :]
                    rhs += p * (r_rhs - r_gram @ resid)
            solved = False
            if diag > 0.0:
                solved = _cholesky_solve(gram, rhs, new)
            if not solved:
                if _min_norm_solve(gram, rhs, new):
                    fallbacks += 1
            if has_missing:
                A[virt, :] += pmf[k, i] * (new - A[base + i, :])
            A[base + i, :] = new
        if has_missing:
            A[virt, :] = 0.0
            for i in range(size):
                A[virt, :] += pmf[k, i] * A[base + i, :]
    return fallbacks


@njit(cache=True)
def _group_cost(w, s1, s2, i, j):
    s = s1[j] - s1[i]
    return max(s2[j] - s2[i] - s * s / (w[j] - w[i]), 0.0)


@njit(cache=True)
def optimal_partition(w, s1, s2, n_groups):
    """Right ends of the least-squares partition of ``n`` sorted points.

    ``w``, ``s1``, ``s2`` are prefix sums (length ``n + 1``) of the counts,
    count-weighted values and count-weighted squares. Each DP layer is filled
    by divide and conquer, relying on the monotone argmin of this cost.
    """
    n = w.size - 1
    prev = np.full(n + 1, np.inf)
    for j in range(1, n + 1):
        prev[j] = _group_cost(w, s1, s2, 0, j)
    arg = np.zeros((n_groups + 1, n + 1), dtype=np.int64)
    stack = np.empty((4 * (n + 2), 4), dtype=np.int64)
    for m in range(2, n_groups + 1):
        cur = np.full(n + 1, np.inf)
        top = 0
        stack[0, 0], stack[0, 1], stack[0, 2], stack[0, 3] = m, n, m - 1, n - 1
        top = 1
        while top > 0:
            top -= 1
            jlo, jhi, ilo, ihi = stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3]
            if jlo > jhi:
                continue
            mid = (jlo + jhi) // 2
            best, best_val = -1, np.inf
            for i in range(max(ilo, m - 1), min(ihi, mid - 1) + 1):
                val = prev[i] + _group_cost(w, s1, s2, i, mid)
                if val < best_val:
                    best, best_val = i, val
            cur[mid] = best_val
            arg[m, mid] = best
            stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3] = jlo, mid - 1, ilo, best
            stack[top + 1, 0], stack[top + 1, 1] = mid + 1, jhi
            stack[top + 1, 2], stack[top + 1, 3] = best, ihi
            top += 2
        prev = cur
    ends = np.empty(n_groups, dtype=np.int64)
    j = n
    for m in range(n_groups, 0, -1):
        ends[m - 1] = j
        if m > 1:
            j = arg[m, j]
    return ends
