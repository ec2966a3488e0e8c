"""Batched Dormand-Prince 5(4) integrator with blow-up detection.

Every row carries its own step size in a normalized time variable
``s in [0, 1]``; per-row horizons are handled by scaling the vector field
inside ``rhs``. Rows leave the active set when they finish, escape or stall,
so one stiff or blowing-up row never slows the rest of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OK = 0
FINITE_ESCAPE = 1
TOLERANCE_NOT_MET = 2

# Dormand & Prince (1980), FSAL pair; 5th-order solution is propagated.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B5 - _B4


@dataclass
class BatchSolution:
    y: np.ndarray           # (B, n); NaN rows for non-ok status
    status: np.ndarray      # (B,) int codes
    s_stop: np.ndarray      # (B,) normalized time reached (escape estimate)
    n_steps: int
    n_rejected: int


def integrate(rhs, y0, *, rtol=1e-12, atol=None, guard=1e9,
              stall_growth=1e3, h0=None, max_steps=1_000_000) -> BatchSolution:
    """Integrate ``dy/ds = rhs(y, idx)`` from s=0 to s=1 for every row of ``y0``.

    ``rhs`` receives the active rows and their original indices. A row is
    reported as FINITE_ESCAPE when its sup-norm crosses ``guard``, or when the
    step size collapses to machine resolution after the row has grown by
    ``stall_growth`` relative to its starting norm. Any other stall is
    TOLERANCE_NOT_MET.
    """
    y0 = np.array(y0, dtype=float)
    if y0.ndim != 2:
        raise ValueError("y0 must have shape (batch, n)")
    if atol is None:
        atol = rtol
    B = y0.shape[0]
    y_out = np.full_like(y0, np.nan)
    status = np.full(B, OK, dtype=int)
    s_stop = np.ones(B)
    norm0 = np.maximum(1.0, np.max(np.abs(y0), axis=1)) if B else np.zeros(0)

    bad = ~np.all(np.isfinite(y0), axis=1) | (np.max(np.abs(y0), axis=1, initial=0.0) > guard)
    status[bad] = FINITE_ESCAPE
    s_stop[bad] = 0.0
    idx = np.flatnonzero(~bad)
    if idx.size == 0:
        return BatchSolution(y_out, status, s_stop, 0, 0)
    y = y0[idx].copy()
    s = np.zeros(idx.size)
    h = np.full(idx.size, 0.05 if h0 is None else float(h0))
    k1 = rhs(y, idx)
    h_min_rel = 8 * np.finfo(float).eps
    steps = rejected = 0

    def drop(keep):
        nonlocal idx, y, s, h, k1
        idx, y, s, h, k1 = idx[keep], y[keep], s[keep], h[keep], k1[keep]

    for _ in range(max_steps):
        if idx.size == 0:
            break
        h = np.minimum(h, 1.0 - s)
        hc = h[:, None]
        with np.errstate(all="ignore"):
            ks = [k1]
            for i in range(1, 7):
                yi = y + hc * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
                ks.append(rhs(yi, idx))
            y_new = y + hc * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
            err_vec = hc * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = np.max(np.abs(err_vec) / scale, axis=1)
            err[~np.isfinite(err) | ~np.all(np.isfinite(y_new), axis=1)] = np.inf
            fac = np.where(err == 0.0, 5.0, np.clip(0.9 * err ** -0.2, 0.2, 5.0))

        acc = err <= 1.0
        steps += int(acc.sum())
        rejected += int((~acc).sum())
        done_now = acc & (h >= 1.0 - s)
        s = np.where(acc, np.where(done_now, 1.0, s + h), s)
        y = np.where(acc[:, None], y_new, y)
        k1 = np.where(acc[:, None], ks[6], k1)
        h = np.where(acc, h * fac, h * np.minimum(fac, 1.0))

        over = acc & (np.max(np.abs(y), axis=1) > guard)
        status[idx[over]] = FINITE_ESCAPE
        s_stop[idx[over]] = s[over]
        stalled = ~acc & (h < h_min_rel * np.maximum(1.0, s))
        if stalled.any():
            grown = np.max(np.abs(y), axis=1) >= stall_growth * norm0[idx]
            status[idx[stalled & grown]] = FINITE_ESCAPE
            status[idx[stalled & ~grown]] = TOLERANCE_NOT_MET
            s_stop[idx[stalled]] = s[stalled]
        finished = acc & (s >= 1.0) & ~over
        y_out[idx[finished]] = y[finished]
        drop(~(over | stalled | finished))
    else:
        status[idx] = TOLERANCE_NOT_MET
        s_stop[idx] = s
    return BatchSolution(y_out, status, s_stop, steps, rejected)
