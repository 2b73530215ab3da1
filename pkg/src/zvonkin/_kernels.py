"""Compiled inner loops: table interpolation, Newton inversion, Gaussian stream.

The transform is stored as node data on a product lattice: along ``x1`` with
spacing ``delta`` (nodes ``k * delta``) and across ``x_rest`` with spacing
``h_rest`` (nodes ``j * h_rest``).  Along ``x1`` values are interpolated by
cubic Hermite polynomials using exact node derivatives; across ``x_rest`` by
``STENCIL``-point Lagrange interpolation, whose weights are differentiated
analytically to obtain partial derivatives.

Kernels read the node data from one packed array ``packed[node, line, comp,
q]`` with ``q`` = (value, d/dx1, right d2/dx1^2, left d2/dx1^2), so the
neighbouring lines of one interpolation cell share contiguous memory.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

STENCIL = 6


def _lagrange_coefficients(s: int) -> np.ndarray:
    """Monomial coefficients ``C[j, p]`` of the Lagrange basis on nodes ``0..s-1``."""
    nodes = np.arange(s, dtype=float)
    vander = np.vander(nodes, s, increasing=True)  # V[m, p] = m**p
    return np.linalg.inv(vander).T.copy()  # basis_j(t) = sum_p C[j, p] t**p


LAGRANGE = _lagrange_coefficients(STENCIL)

# status codes shared with Python
OK = 0
NOT_CONVERGED = 1
OUT_OF_TABLE = 2


@njit(cache=True, inline="always")
def _basis(t, coef, w, dw, ddw):
    s = coef.shape[0]
    for j in range(s):
        v = 0.0
        dv = 0.0
        ddv = 0.0
        for p in range(s - 1, -1, -1):
            ddv = ddv * t + 2.0 * dv
            dv = dv * t + v
            v = v * t + coef[j, p]
        w[j] = v
        dw[j] = dv
        ddw[j] = ddv


@njit(cache=True, inline="always")
def _eval_point(
    x, ncomp, packed, k_lo, delta, j_lo, n_rest, h_rest, coef, want,
    g, g1, gr, g1r, grr, w, dw, ddw, start,
):
    """Evaluate table data at one point.  Returns False when outside the table.

    ``want``: 0 values only, 1 values and first partials, 2 also second
    partials in ``x_rest`` and mixed partials.
    """
    n_nodes = packed.shape[0]
    dr = j_lo.shape[0]
    s = coef.shape[0]
    half = s // 2 - 1
    # position along x1
    u = x[0] / delta
    fl = math.floor(u)
    cell = int(fl) - k_lo
    if cell == n_nodes - 1 and u == fl:
        cell -= 1
    if cell < 0 or cell > n_nodes - 2:
        return False
    t = (x[0] - (cell + k_lo) * delta) / delta
    t2 = t * t
    omt = 1.0 - t
    h00 = (1.0 + 2.0 * t) * omt * omt
    h10 = t * omt * omt
    h01 = t2 * (3.0 - 2.0 * t)
    h11 = t2 * (t - 1.0)
    # stencil across x_rest
    for i in range(dr):
        v = x[1 + i] / h_rest
        base = int(math.floor(v)) - half
        st = base - j_lo[i]
        if st < 0 or st + s > n_rest[i]:
            return False
        start[i] = st
        _basis(v - base, coef, w[i], dw[i], ddw[i])
        for j in range(s):
            dw[i, j] /= h_rest
            ddw[i, j] /= h_rest * h_rest
    for c in range(ncomp):
        g[c] = 0.0
        g1[c] = 0.0
        for i in range(dr):
            gr[c, i] = 0.0
            g1r[c, i] = 0.0
            for m in range(dr):
                grr[c, i, m] = 0.0
    if dr <= 1:
        # fast path: a single line (d = 1) or one stencil direction (d = 2)
        n_lines = 1 if dr == 0 else s
        for j in range(n_lines):
            if dr == 0:
                line = 0
                wv = 1.0
                dwv = 0.0
                ddwv = 0.0
            else:
                line = start[0] + j
                wv = w[0, j]
                dwv = dw[0, j]
                ddwv = ddw[0, j]
            for c in range(ncomp):
                va = packed[cell, line, c, 0]
                vb = packed[cell + 1, line, c, 0]
                da = packed[cell, line, c, 1]
                db = packed[cell + 1, line, c, 1]
                value = h00 * va + h10 * delta * da + h01 * vb + h11 * delta * db
                g[c] += wv * value
                if want == 0:
                    continue
                deriv = h00 * da + h10 * delta * packed[cell, line, c, 2] + h01 * db + h11 * delta * packed[cell + 1, line, c, 3]
                g1[c] += wv * deriv
                if dr == 0:
                    continue
                gr[c, 0] += dwv * value
                if want >= 2:
                    g1r[c, 0] += dwv * deriv
                    grr[c, 0, 0] += ddwv * value
        return True
    n_comb = 1
    for i in range(dr):
        n_comb *= s
    for comb in range(n_comb):
        line = 0
        rem = comb
        weight = 1.0
        for i in range(dr):
            digit = rem % s
            rem //= s
            line = line * n_rest[i] + start[i] + digit
            weight *= w[i, digit]
        for c in range(ncomp):
            va = packed[cell, line, c, 0]
            vb = packed[cell + 1, line, c, 0]
            da = packed[cell, line, c, 1]
            db = packed[cell + 1, line, c, 1]
            value = h00 * va + h10 * delta * da + h01 * vb + h11 * delta * db
            g[c] += weight * value
            if want == 0:
                continue
            deriv = h00 * da + h10 * delta * packed[cell, line, c, 2] + h01 * db + h11 * delta * packed[cell + 1, line, c, 3]
            g1[c] += weight * deriv
            if dr == 0:
                continue
            for i in range(dr):
                # product of the other weights times the differentiated one
                digit = (comb // (s ** i)) % s
                other = 1.0
                for m in range(dr):
                    dm = (comb // (s ** m)) % s
                    if m != i:
                        other *= w[m, dm]
                gr[c, i] += other * dw[i, digit] * value
                if want >= 2:
                    g1r[c, i] += other * dw[i, digit] * deriv
                    for m in range(dr):
                        dm = (comb // (s ** m)) % s
                        if m == i:
                            rest = 1.0
                            for q in range(dr):
                                if q != i:
                                    rest *= w[q, (comb // (s ** q)) % s]
                            grr[c, i, i] += rest * ddw[i, digit] * value
                        elif m > i:
                            rest = 1.0
                            for q in range(dr):
                                if q != i and q != m:
                                    rest *= w[q, (comb // (s ** q)) % s]
                            inc = rest * dw[i, digit] * dw[m, dm] * value
                            grr[c, i, m] += inc
                            grr[c, m, i] += inc
    return True


@njit(cache=True)
def eval_table(points, ncomp, packed, k_lo, delta, j_lo, n_rest, h_rest, coef, want):
    """Vectorised table evaluation.

    Returns ``(ok, g, g1, gr, g1r, grr)`` where ``ok[n]`` is False for points
    outside the table (their outputs are NaN).  The x_rest index of line data
    is the row-major ravel of the lattice index with the *first* rest
    coordinate slowest, matching ``numpy.ravel_multi_index``.
    """
    n = points.shape[0]
    dr = j_lo.shape[0]
    s = coef.shape[0]
    ok = np.ones(n, dtype=np.bool_)
    g = np.empty((n, ncomp))
    g1 = np.empty((n, ncomp))
    gr = np.empty((n, ncomp, dr))
    g1r = np.empty((n, ncomp, dr))
    grr = np.empty((n, ncomp, dr, dr))
    w = np.empty((max(dr, 1), s))
    dw = np.empty((max(dr, 1), s))
    ddw = np.empty((max(dr, 1), s))
    start = np.empty(max(dr, 1), dtype=np.int64)
    for p in range(n):
        good = _eval_point(
            points[p], ncomp, packed, k_lo, delta, j_lo, n_rest, h_rest, coef, want,
            g[p], g1[p], gr[p], g1r[p], grr[p], w, dw, ddw, start,
        )
        if not good:
            ok[p] = False
            g[p, :] = np.nan
            g1[p, :] = np.nan
            gr[p] = np.nan
            g1r[p] = np.nan
            grr[p] = np.nan
    return ok, g, g1, gr, g1r, grr


@njit(cache=True, inline="always")
def _map_and_jac(x, comps, d, g, g1, gr, out_map, jac):
    """Assemble G(x) and grad G(x) from component data."""
    for i in range(d):
        out_map[i] = x[i]
        for m in range(d):
            jac[i, m] = 1.0 if i == m else 0.0
    for c in range(comps.shape[0]):
        k = comps[c]
        if k == 0:
            out_map[0] = g[c]
            jac[0, 0] = g1[c]
        else:
            out_map[k] += g[c]
            jac[k, 0] += g1[c]
        for i in range(d - 1):
            jac[k, 1 + i] += gr[c, i]


@njit(cache=True, inline="always")
def _solve_small(a, b, out, m, r):
    """Gaussian elimination with partial pivoting for a small dense system.

    ``m`` and ``r`` are scratch arrays shaped like ``a`` and ``b``.
    """
    n = b.shape[0]
    m[:, :] = a
    r[:] = b
    for col in range(n):
        piv = col
        best = abs(m[col, col])
        for row in range(col + 1, n):
            if abs(m[row, col]) > best:
                best = abs(m[row, col])
                piv = row
        if best == 0.0:
            return False
        if piv != col:
            for q in range(n):
                tmp = m[col, q]
                m[col, q] = m[piv, q]
                m[piv, q] = tmp
            tmp = r[col]
            r[col] = r[piv]
            r[piv] = tmp
        for row in range(col + 1, n):
            f = m[row, col] / m[col, col]
            for q in range(col, n):
                m[row, q] -= f * m[col, q]
            r[row] -= f * r[col]
    for row in range(n - 1, -1, -1):
        acc = r[row]
        for q in range(row + 1, n):
            acc -= m[row, q] * out[q]
        out[row] = acc / m[row, row]
    return True


@njit(cache=True, inline="always")
def _clip_ball(x, center, radius):
    dist = 0.0
    for i in range(x.shape[0]):
        dist += (x[i] - center[i]) ** 2
    dist = math.sqrt(dist)
    if dist > radius:
        f = radius / dist
        for i in range(x.shape[0]):
            x[i] = center[i] + f * (x[i] - center[i])


@njit(cache=True, inline="always")
def _residual(x, z, comps, ncomp, packed, k_lo, delta, j_lo, n_rest, h_rest, coef,
              g, g1, gr, g1r, grr, w, dw, ddw, start, gx, jac, res):
    d = x.shape[0]
    if not _eval_point(x, ncomp, packed, k_lo, delta, j_lo, n_rest, h_rest, coef, 1,
                       g, g1, gr, g1r, grr, w, dw, ddw, start):
        return -1.0
    _map_and_jac(x, comps, d, g, g1, gr, gx, jac)
    nrm = 0.0
    for i in range(d):
        res[i] = gx[i] - z[i]
        nrm += res[i] * res[i]
    return math.sqrt(nrm)


@njit(cache=True)
def invert_table(z, x_init, centers, radii, comps, packed, k_lo, delta, j_lo, n_rest,
                 h_rest, coef, tol, max_iter):
    """Damped Newton solve of ``G(x) = z`` for each row, confined to a ball per row.

    Returns ``(x, status, iterations)``.  The stopping rule is
    ``|G(x) - z| <= tol * max(1, |z|)``.
    """
    n, d = z.shape
    dr = d - 1
    s = coef.shape[0]
    ncomp = comps.shape[0]
    out = np.empty((n, d))
    status = np.zeros(n, dtype=np.int64)
    iters = np.zeros(n, dtype=np.int64)
    g = np.empty(ncomp)
    g1 = np.empty(ncomp)
    gr = np.empty((ncomp, max(dr, 0)))
    g1r = np.empty((ncomp, max(dr, 0)))
    grr = np.empty((ncomp, max(dr, 0), max(dr, 0)))
    w = np.empty((max(dr, 1), s))
    dw = np.empty((max(dr, 1), s))
    ddw = np.empty((max(dr, 1), s))
    start = np.empty(max(dr, 1), dtype=np.int64)
    gx = np.empty(d)
    jac = np.empty((d, d))
    res = np.empty(d)
    step = np.empty(d)
    jac_work = np.empty((d, d))
    res_work = np.empty(d)
    x = np.empty(d)
    trial = np.empty(d)
    for p in range(n):
        zp = z[p]
        cen = centers[p]
        rad = radii[p]
        znorm = 0.0
        for i in range(d):
            x[i] = x_init[p, i]
            znorm += zp[i] * zp[i]
        thresh = tol * max(1.0, math.sqrt(znorm))
        _clip_ball(x, cen, rad)
        nrm = _residual(x, zp, comps, ncomp, packed, k_lo, delta, j_lo, n_rest, h_rest, coef,
                        g, g1, gr, g1r, grr, w, dw, ddw, start, gx, jac, res)
        st = NOT_CONVERGED
        it = 0
        if nrm < 0.0:
            st = OUT_OF_TABLE
        while st == NOT_CONVERGED:
            if nrm <= thresh:
                st = OK
                break
            if it >= max_iter:
                break
            it += 1
            if not _solve_small(jac, res, step, jac_work, res_work):
                break
            lam = 1.0
            accepted = False
            for _ in range(40):
                for i in range(d):
                    trial[i] = x[i] - lam * step[i]
                _clip_ball(trial, cen, rad)
                tn = _residual(trial, zp, comps, ncomp, packed, k_lo, delta, j_lo, n_rest,
                               h_rest, coef, g, g1, gr, g1r, grr, w, dw, ddw, start, gx, jac, res)
                if tn >= 0.0 and tn < nrm:
                    accepted = True
                    nrm = tn
                    for i in range(d):
                        x[i] = trial[i]
                    break
                lam *= 0.5
            if not accepted:
                # restore derivative data at the current iterate and stop
                _residual(x, zp, comps, ncomp, packed, k_lo, delta, j_lo, n_rest, h_rest, coef,
                          g, g1, gr, g1r, grr, w, dw, ddw, start, gx, jac, res)
                if nrm <= thresh:
                    st = OK
                break
        for i in range(d):
            out[p, i] = x[i]
        status[p] = st
        iters[p] = it
    return out, status, iters


# ----------------------------------------------------------------------
# counter-based Gaussian stream
# ----------------------------------------------------------------------
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


# rational approximation of the standard normal quantile (relative error ~1e-9)
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


@njit(cache=True, inline="always")
def _quantile(p):
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
               ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log1p(-p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
                ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
           (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


@njit(cache=True)
def path_keys(seed, paths):
    ks = _mix(np.uint64(seed) + _GOLDEN)
    out = np.empty(paths.shape[0], dtype=np.uint64)
    for p in range(paths.shape[0]):
        out[p] = _mix(ks ^ (np.uint64(paths[p]) * _GOLDEN + np.uint64(1)))
    return out


@njit(cache=True)
def normals(keys, step, cols, d, out):
    """Fill ``out[p, j]`` (j in ``cols``) with the normal for (path key, step, j).

    Columns not listed are left untouched.
    """
    for p in range(keys.shape[0]):
        kp = keys[p]
        for jj in range(cols.shape[0]):
            j = cols[jj]
            c = np.uint64(step) * np.uint64(d) + np.uint64(j)
            r = _mix(kp + c * _GOLDEN)
            u = (float(r >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)
            out[p, j] = _quantile(u)
