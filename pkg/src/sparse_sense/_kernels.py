"""Compiled inner loops for batched (M rows x N components) simulation.

These kernels back the Monte Carlo paths (calibration, rollout, the
experiment harness).  The readable single-state versions live in
``belief`` and ``allocator``; the test-suite checks the two agree.
"""

import math

import numba
import numpy as np

P_MIN = 1e-30
P_MAX = 1.0 - 1e-15


@numba.njit(cache=True)
def waterfill_rows(pg, r, budget, out):
    """Power-law water-filling for each row of ``pg = p**gamma``, ``r = sigma^2/sigma_i^2``.

    Solves sum_i max(0, C pg_i - r_i) = budget for the water level C by an
    active-set iteration started to the right of the root; C decreases
    monotonically and stops once the active set is stable, at which point
    it equals the breakpoint formula for that support.  Rows with no usable
    component get a uniform split.  Returns a per-row flag (1 = fallback).
    """
    M, N = pg.shape
    fallback = np.zeros(M, dtype=np.int8)
    for m in range(M):
        lam = budget[m]
        if not lam > 0.0:
            for i in range(N):
                out[m, i] = 0.0
            continue
        j = -1
        best = 0.0
        for i in range(N):
            if pg[m, i] > best and math.isfinite(r[m, i]):
                best = pg[m, i]
                j = i
        if j < 0:
            fallback[m] = 1
            for i in range(N):
                out[m, i] = lam / N
            continue
        C = (lam + r[m, j]) / pg[m, j]
        for _ in range(N + 2):
            sp = 0.0
            sr = 0.0
            for i in range(N):
                if C * pg[m, i] > r[m, i]:
                    sp += pg[m, i]
                    sr += r[m, i]
            C_new = (lam + sr) / sp
            if not C_new < C:
                break
            C = C_new
        for i in range(N):
            v = C * pg[m, i] - r[m, i]
            out[m, i] = v if v > 0.0 else 0.0
    return fallback


@numba.njit(cache=True)
def observe_update(p, mu, s2, theta, noise, hv, true_sigma_sq, sigma_sq, y_out):
    """Draw y = theta + noise * sqrt(true_sigma_sq / h) and apply the exact update.

    Works in place on ``p``, ``mu`` and ``s2``.  Components with ``hv <= 0``
    take no observation; ``y_out`` is set to NaN there.
    """
    M, N = p.shape
    for m in range(M):
        for i in range(N):
            h = hv[m, i]
            if not h > 0.0:
                y_out[m, i] = np.nan
                continue
            y = theta[m, i] + noise[m, i] * math.sqrt(true_sigma_sq / h)
            y_out[m, i] = y
            v0 = sigma_sq / h
            si = s2[m, i]
            v1 = si + v0
            mi = mu[m, i]
            pi = p[m, i]
            if pi > 0.0 and pi < 1.0:
                llr = 0.5 * math.log(v0 / v1) - (y - mi) ** 2 / (2.0 * v1) + y * y / (2.0 * v0)
                z = math.log(pi) - math.log1p(-pi) + llr
                if z >= 0.0:
                    pn = 1.0 / (1.0 + math.exp(-z))
                else:
                    e = math.exp(z)
                    pn = e / (1.0 + e)
                if pn < P_MIN:
                    pn = P_MIN
                elif pn > P_MAX:
                    pn = P_MAX
                p[m, i] = pn
            denom = sigma_sq + h * si
            mu[m, i] = (sigma_sq * mi + h * si * y) / denom
            s2[m, i] = sigma_sq * si / denom


@numba.njit(cache=True)
def _row_level(pg, r, lam):
    # water level C for one row; returns -1.0 when no component is usable
    N = pg.shape[0]
    j = -1
    best = 0.0
    for i in range(N):
        if pg[i] > best and math.isfinite(r[i]):
            best = pg[i]
            j = i
    if j < 0:
        return -1.0
    C = (lam + r[j]) / pg[j]
    for _ in range(N + 2):
        sp = 0.0
        sr = 0.0
        for i in range(N):
            if C * pg[i] > r[i]:
                sp += pg[i]
                sr += r[i]
        if sp == 0.0:
            # budget below rounding of the first breakpoint: nothing is allocated
            break
        C_new = (lam + sr) / sp
        if not C_new < C:
            break
        C = C_new
    return C


@numba.njit(cache=True)
def olfc_stage(p, mu, s2, budget, theta, noise, beta, gamma, true_sigma_sq, sigma_sq, lam_out, y_out):
    """One generalized-OLFC stage for every row, identity effort function.

    Allocates ``beta[m]`` times the power-law water-filling solution with
    exponent ``gamma``, observes, and updates the row in place.  ``budget``
    is decremented by the effort spent.  Returns the number of rows that
    needed the uniform fallback.
    """
    M, N = p.shape
    pg = np.empty(N)
    r = np.empty(N)
    n_fallback = 0
    for m in range(M):
        lam_total = budget[m] * beta[m]
        if not lam_total > 0.0:
            for i in range(N):
                lam_out[m, i] = 0.0
                y_out[m, i] = np.nan
            continue
        for i in range(N):
            pg[i] = p[m, i] ** gamma if p[m, i] > 0.0 else 0.0
            r[i] = sigma_sq / s2[m, i] if s2[m, i] > 0.0 else np.inf
        C = _row_level(pg, r, budget[m])
        spent = 0.0
        for i in range(N):
            if C < 0.0:
                lam = lam_total / N
            else:
                v = C * pg[i] - r[i]
                lam = beta[m] * v if v > 0.0 else 0.0
            lam_out[m, i] = lam
            spent += lam
            if not lam > 1e-12:
                y_out[m, i] = np.nan
                continue
            y = theta[m, i] + noise[m, i] * math.sqrt(true_sigma_sq / lam)
            y_out[m, i] = y
            v0 = sigma_sq / lam
            si = s2[m, i]
            v1 = si + v0
            mi = mu[m, i]
            pi = p[m, i]
            if pi > 0.0 and pi < 1.0:
                llr = 0.5 * math.log(v0 / v1) - (y - mi) ** 2 / (2.0 * v1) + y * y / (2.0 * v0)
                z = math.log(pi) - math.log1p(-pi) + llr
                if z >= 0.0:
                    pn = 1.0 / (1.0 + math.exp(-z))
                else:
                    e = math.exp(z)
                    pn = e / (1.0 + e)
                if pn < P_MIN:
                    pn = P_MIN
                elif pn > P_MAX:
                    pn = P_MAX
                p[m, i] = pn
            denom = sigma_sq + lam * si
            mu[m, i] = (sigma_sq * mi + lam * si * y) / denom
            s2[m, i] = sigma_sq * si / denom
        if C < 0.0:
            n_fallback += 1
        budget[m] = max(budget[m] - spent, 0.0)
    return n_fallback


@numba.njit(cache=True)
def power_terminal_cost(p, s2, budget, gamma, half_q, sigma_sq, out):
    """Per-row sum_i p_i (sigma^2 / (r_i + lam_i))**(q/2) at the final stage.

    ``lam`` is the power-law water-filling allocation of the whole remaining
    budget with exponent ``gamma``.  The loss moment constant is applied by
    the caller.
    """
    M, N = p.shape
    pg = np.empty(N)
    r = np.empty(N)
    for m in range(M):
        for i in range(N):
            pg[i] = p[m, i] ** gamma if p[m, i] > 0.0 else 0.0
            r[i] = sigma_sq / s2[m, i] if s2[m, i] > 0.0 else np.inf
        C = -1.0
        if budget[m] > 0.0:
            C = _row_level(pg, r, budget[m])
        total = 0.0
        for i in range(N):
            if not math.isfinite(r[i]):
                continue
            lam = 0.0
            if budget[m] > 0.0:
                if C < 0.0:
                    lam = budget[m] / N
                else:
                    v = C * pg[i] - r[i]
                    lam = v if v > 0.0 else 0.0
            total += p[m, i] * (sigma_sq / (r[i] + lam)) ** half_q
        out[m] = total
