"""Pure numpy implementation of the diagonal-plus-rank-one spectrum kernel.

For each row ``z`` of ``Z`` the eigenvalues of ``diag(d) + z z^T`` are the roots
of the secular equation ``1 + sum_j z_j^2 / (d_j - lam) = 0``, one per interval
between consecutive poles. This module solves all roots of one row at once
(vectorised over roots); ``_spectra.pyx`` is the compiled twin.
"""
from __future__ import annotations

import numpy as np

EPS = np.finfo(np.float64).eps
MAX_ITER = 80


def count_above(d: np.ndarray, Z: np.ndarray, thresh: float) -> np.ndarray:
    """Number of eigenvalues of ``diag(d) + z z^T`` strictly above ``thresh``, per row of ``Z``.

    Uses the inertia of the bordered matrix ``[[D - tI, z], [z^T, -1]]``: the
    count is ``#{d_j > t}`` plus one when ``1 + z^T (D - tI)^{-1} z < 0``.
    """
    diff = d - thresh
    if np.any(diff == 0.0):
        # nudge the threshold off a pole; eigenvalues equal to t are not counted
        thresh = np.nextafter(thresh, np.inf)
        diff = d - thresh
    g = (Z * Z) @ (1.0 / diff)
    return np.count_nonzero(diff > 0) + (1.0 + g < 0).astype(np.int64)


def _deflate(d, z):
    """Split ``(d, z)`` into a reduced problem with distinct poles and non-negligible ``z``."""
    zz = float(z @ z)
    scale = max(float(d[-1]), 0.0) + zz
    tolz = 8.0 * EPS * np.sqrt(scale)
    told = 8.0 * EPS * scale
    kd, kz, fixed = [], [], []
    for dj, zj in zip(d, z):
        if abs(zj) <= tolz:
            fixed.append(dj)
        elif kd and dj - kd[-1] <= told:
            kz[-1] = np.hypot(kz[-1], zj)
            fixed.append(dj)
        else:
            kd.append(dj)
            kz.append(zj)
    return np.array(kd), np.array(kz), np.array(fixed)


def secular_roots(d: np.ndarray, z: np.ndarray) -> np.ndarray:
    """All eigenvalues of ``diag(d) + z z^T`` for ascending ``d``."""
    kd, kz, fixed = _deflate(d, z)
    K = kd.size
    if K == 0:
        return np.sort(fixed)
    z2 = kz * kz
    zz = float(z2.sum())
    idx = np.arange(K)
    lo = kd
    hi = np.append(kd[1:], kd[-1] + zz)
    mid = 0.5 * (lo + hi)
    f_mid = 1.0 + (z2[None, :] / (kd[None, :] - mid[:, None])).sum(axis=1)
    # shift to the pole nearer to the root
    use_hi = (f_mid < 0) & (idx < K - 1)
    org_idx = np.where(use_hi, idx + 1, idx)
    org = kd[org_idx]
    delta = kd[None, :] - org[:, None]
    half = 0.5 * (hi - lo)
    a = np.where(use_hi, -half, 0.0)
    b = np.where(use_hi, 0.0, half)
    last = idx == K - 1
    b = np.where(last, hi - lo, b)
    x = 0.5 * (a + b)
    lower = idx[:, None] >= idx[None, :]
    d_lo = delta[idx, idx]
    d_hi = np.where(last, np.inf, delta[idx, np.minimum(idx + 1, K - 1)])
    active = np.ones(K, dtype=bool)
    for _ in range(MAX_ITER):
        if not active.any():
            break
        diff = delta - x[:, None]
        t = z2[None, :] / diff
        tp = t / diff
        psi = np.where(lower, t, 0.0).sum(axis=1)
        dpsi = np.where(lower, tp, 0.0).sum(axis=1)
        phi = np.where(lower, 0.0, t).sum(axis=1)
        dphi = np.where(lower, 0.0, tp).sum(axis=1)
        f = 1.0 + psi + phi
        a = np.where(active & (f < 0), x, a)
        b = np.where(active & (f > 0), x, b)
        tol_f = 8.0 * EPS * K * (1.0 + np.abs(psi) + np.abs(phi))
        done = (np.abs(f) <= tol_f) | (b - a <= 4.0 * EPS * np.maximum(np.abs(a), np.abs(b)))
        D1 = d_lo - x
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            D2 = np.where(last, 1.0, d_hi - x)
            s1 = dpsi * D1 * D1
            s2 = np.where(last, 0.0, dphi * D2 * D2)
            C = f - dpsi * D1 - np.where(last, 0.0, dphi * D2)
            # two-pole model: C + s1/(D1-u) + s2/(D2-u) = 0
            bq = C * (D1 + D2) + s1 + s2
            cq = D1 * D2 * f
            disc = bq * bq - 4.0 * C * cq
            sq = np.sqrt(np.maximum(disc, 0.0))
            q = 0.5 * (bq + np.copysign(sq, bq))
            u1 = q / C
            u2 = cq / q
            u_lin = np.where(C != 0, D1 + s1 / C, np.nan)
            x1, x2 = x + u1, x + u2
            in1 = (x1 > a) & (x1 < b)
            in2 = (x2 > a) & (x2 < b)
            step = np.where(in1, x1, np.where(in2, x2, np.nan))
            step = np.where(disc >= 0, step, np.nan)
            step = np.where(last, x + u_lin, step)
            ok = np.isfinite(step) & (step > a) & (step < b)
        x_new = np.where(ok, step, 0.5 * (a + b))
        small = np.abs(x_new - x) <= 2.0 * EPS * np.abs(x_new)
        x = np.where(active & ~done, x_new, x)
        active &= ~(done | small)
    roots = org + x
    return np.sort(np.concatenate([roots, fixed]))


def rank_one_spectra(d: np.ndarray, Z: np.ndarray, thresh: float, with_sums: bool = True):
    """Per row of ``Z``: eigenvalue count above ``thresh`` and sum of square roots.

    ``d`` must be ascending and non-negative.
    """
    d = np.ascontiguousarray(d, dtype=np.float64)
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    counts = count_above(d, Z, thresh)
    sums = np.full(Z.shape[0], np.nan)
    if with_sums:
        for r in range(Z.shape[0]):
            lam = secular_roots(d, Z[r])
            sums[r] = np.sqrt(np.maximum(lam, 0.0)).sum()
    return counts, sums
