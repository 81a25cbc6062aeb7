# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled diagonal-plus-rank-one spectrum kernel.

Same algorithm and tolerances as ``_spectra_py``: deflation, then one
safeguarded two-pole (Bunch-Nielsen-Sorensen) iteration per secular root.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, hypot, copysign, isfinite

cnp.import_array()

cdef double EPS = 2.220446049250313e-16
cdef int MAX_ITER = 80


cdef Py_ssize_t _deflate(const double[::1] d, const double[::1] z, double[::1] kd, double[::1] kz,
                         double* fixed_sum) noexcept nogil:
    cdef Py_ssize_t N = d.shape[0], j, K = 0
    cdef double zz = 0.0, scale, tolz, told, dmax
    for j in range(N):
        zz += z[j] * z[j]
    dmax = d[N - 1] if d[N - 1] > 0 else 0.0
    scale = dmax + zz
    tolz = 8.0 * EPS * sqrt(scale)
    told = 8.0 * EPS * scale
    fixed_sum[0] = 0.0
    for j in range(N):
        if fabs(z[j]) <= tolz:
            fixed_sum[0] += sqrt(d[j]) if d[j] > 0 else 0.0
        elif K > 0 and d[j] - kd[K - 1] <= told:
            kz[K - 1] = hypot(kz[K - 1], z[j])
            fixed_sum[0] += sqrt(d[j]) if d[j] > 0 else 0.0
        else:
            kd[K] = d[j]
            kz[K] = z[j]
            K += 1
    return K


cdef double _root(const double[::1] kd, const double[::1] z2, Py_ssize_t K, Py_ssize_t i,
                  double zz, double[::1] delta) noexcept nogil:
    cdef bint last = i == K - 1
    cdef double lo = kd[i], hi, mid, f, org, a, b, x, half
    cdef double psi, dpsi, phi, dphi, t, df, tol_f, D1, D2, s1, s2, C, bq, cq, disc, sq, q, u1, u2, x1, x2, step
    cdef Py_ssize_t j, it, org_i = i
    hi = kd[K - 1] + zz if last else kd[i + 1]
    mid = 0.5 * (lo + hi)
    f = 1.0
    for j in range(K):
        f += z2[j] / (kd[j] - mid)
    half = 0.5 * (hi - lo)
    if (not last) and f < 0:
        org_i = i + 1
        a = -half
        b = 0.0
    else:
        a = 0.0
        b = hi - lo if last else half
    org = kd[org_i]
    for j in range(K):
        delta[j] = kd[j] - org
    x = 0.5 * (a + b)
    for it in range(MAX_ITER):
        psi = 0.0
        dpsi = 0.0
        phi = 0.0
        dphi = 0.0
        for j in range(i + 1):
            df = delta[j] - x
            t = z2[j] / df
            psi += t
            dpsi += t / df
        for j in range(i + 1, K):
            df = delta[j] - x
            t = z2[j] / df
            phi += t
            dphi += t / df
        f = 1.0 + psi + phi
        if f < 0:
            a = x
        elif f > 0:
            b = x
        tol_f = 8.0 * EPS * K * (1.0 + fabs(psi) + fabs(phi))
        if fabs(f) <= tol_f or b - a <= 4.0 * EPS * (fabs(a) if fabs(a) > fabs(b) else fabs(b)):
            break
        D1 = delta[i] - x
        step = 0.5 * (a + b)
        if last:
            C = f - dpsi * D1
            if C != 0:
                x1 = x + D1 + dpsi * D1 * D1 / C
                if isfinite(x1) and x1 > a and x1 < b:
                    step = x1
        else:
            D2 = delta[i + 1] - x
            s1 = dpsi * D1 * D1
            s2 = dphi * D2 * D2
            C = f - dpsi * D1 - dphi * D2
            bq = C * (D1 + D2) + s1 + s2
            cq = D1 * D2 * f
            disc = bq * bq - 4.0 * C * cq
            if disc >= 0:
                sq = sqrt(disc)
                q = 0.5 * (bq + copysign(sq, bq))
                x1 = x + q / C
                x2 = x + cq / q
                if isfinite(x1) and x1 > a and x1 < b:
                    step = x1
                elif isfinite(x2) and x2 > a and x2 < b:
                    step = x2
        if fabs(step - x) <= 2.0 * EPS * fabs(step):
            x = step
            break
        x = step
    return org + x


def rank_one_spectra(d, Z, double thresh, bint with_sums=True):
    """Per row of ``Z``: eigenvalue count of ``diag(d) + z z^T`` above ``thresh`` and sum of square roots.

    ``d`` must be ascending and non-negative.
    """
    cdef double[::1] dv = np.ascontiguousarray(d, dtype=np.float64)
    cdef double[:, ::1] Zv = np.ascontiguousarray(Z, dtype=np.float64)
    cdef Py_ssize_t N = dv.shape[0], R = Zv.shape[0], r, j, K, i
    counts_arr = np.zeros(R, dtype=np.int64)
    sums_arr = np.full(R, np.nan)
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef double[::1] sums = sums_arr
    cdef double[::1] kd = np.empty(N)
    cdef double[::1] kz = np.empty(N)
    cdef double[::1] z2 = np.empty(N)
    cdef double[::1] delta = np.empty(N)
    cdef double t = thresh, g, diff, fixed_sum, zz, lam, total
    cdef Py_ssize_t pos = 0
    for j in range(N):
        if dv[j] == t:
            t = np.nextafter(t, np.inf)
            break
    for j in range(N):
        if dv[j] > t:
            pos += 1
    with nogil:
        for r in range(R):
            g = 0.0
            for j in range(N):
                g += Zv[r, j] * Zv[r, j] / (dv[j] - t)
            counts[r] = pos + (1 if 1.0 + g < 0 else 0)
            if not with_sums:
                continue
            K = _deflate(dv, Zv[r], kd, kz, &fixed_sum)
            zz = 0.0
            for j in range(K):
                z2[j] = kz[j] * kz[j]
                zz += z2[j]
            total = fixed_sum
            for i in range(K):
                lam = _root(kd, z2, K, i, zz, delta)
                total += sqrt(lam) if lam > 0 else 0.0
            sums[r] = total
    return counts_arr, sums_arr
