"""Primal active-set solver for small dense box-constrained QPs.

Minimises ``0.5 u'Hu + g'u`` subject to ``lb <= u <= ub`` with H symmetric
positive definite. The iterate stays feasible throughout, so an early exit
still returns a usable point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

QP_OK = 0
QP_MAX_ITER = 1


@dataclass
class QPResult:
    x: np.ndarray
    status: int
    iterations: int
    kkt: float
    at_lower: np.ndarray
    at_upper: np.ndarray


def kkt_residual(H, g, x, lb, ub, at_lower, at_upper):
    """Infinity norm of the stationarity / dual-feasibility violation."""
    grad = H @ x + g
    free = ~(at_lower | at_upper)
    res = 0.0
    if free.any():
        res = np.abs(grad[free]).max()
    if at_lower.any():
        res = max(res, np.maximum(-grad[at_lower], 0.0).max())
    if at_upper.any():
        res = max(res, np.maximum(grad[at_upper], 0.0).max())
    return float(res)


def qp_solve_box(H, g, lb, ub, x0=None, at_lower=None, at_upper=None, max_iter=None, tol=1e-10):
    """Solve the box QP, optionally warm-started from a point and working set."""
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    n = len(g)
    if np.any(lb > ub):
        raise ValueError("lb must not exceed ub")
    if max_iter is None:
        max_iter = 10 * n + 50

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    x = np.clip(x, lb, ub)
    lo = np.zeros(n, dtype=bool) if at_lower is None else np.array(at_lower, dtype=bool)
    hi = np.zeros(n, dtype=bool) if at_upper is None else np.array(at_upper, dtype=bool)
    hi &= ~lo
    lo |= lb == ub
    x[lo] = lb[lo]
    x[hi] = ub[hi]

    scale = max(1.0, np.abs(g).max(), np.abs(H).max())
    status = QP_MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        free = ~(lo | hi)
        grad = H @ x + g
        step = np.zeros(n)
        if free.any():
            idx = np.flatnonzero(free)
            Hff = H[np.ix_(idx, idx)]
            try:
                cf = scipy.linalg.cho_factor(Hff, check_finite=False)
                step[idx] = -scipy.linalg.cho_solve(cf, grad[idx], check_finite=False)
            except np.linalg.LinAlgError:
                step[idx] = -np.linalg.lstsq(Hff, grad[idx], rcond=None)[0]

        if np.abs(step).max() <= tol * max(1.0, np.abs(x).max()):
            # stationary on the working set: test multipliers of the bound variables
            lam = np.where(lo, grad, np.where(hi, -grad, np.inf))
            j = int(np.argmin(lam))
            if lam[j] >= -tol * scale:
                status = QP_OK
                break
            lo[j] = hi[j] = False
            continue

        alpha = 1.0
        blocking = None
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio_lo = np.where(free & (step < 0), (lb - x) / step, np.inf)
            ratio_hi = np.where(free & (step > 0), (ub - x) / step, np.inf)
        ratios = np.minimum(ratio_lo, ratio_hi)
        j = int(np.argmin(ratios))
        if ratios[j] < 1.0:
            alpha = max(ratios[j], 0.0)
            blocking = j
        x = x + alpha * step
        if blocking is not None:
            # every variable reaching a bound at this step length joins the working set
            hit_lo = free & (ratio_lo <= alpha + 1e-14)
            hit_hi = free & (ratio_hi <= alpha + 1e-14) & ~hit_lo
            lo |= hit_lo
            hi |= hit_hi
        x = np.clip(x, lb, ub)
        x[lo] = lb[lo]
        x[hi] = ub[hi]

    kkt = kkt_residual(H, g, x, lb, ub, lo, hi)
    return QPResult(x, status, it, kkt, lo, hi)
