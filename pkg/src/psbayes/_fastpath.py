"""Optional numba-compiled kernels for the samplers' inner loops.

Everything here duplicates pure-numpy logic elsewhere (same tolerances, same
damping, same flooring) and is only selected when numba imports cleanly; the
test suite pins the two implementations against each other.  Status codes:
0 converged, 1 iteration cap, 2 backtracking stalled / singular step,
3 crossed the boundary threshold.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


@njit(cache=True)
def newton_logit_core(z, resp, el, target, phi0, tol, max_iter, damping, bound):
    n, k = z.shape
    phi = phi0.copy()
    fx = np.zeros(k)
    j = np.zeros((k, k))

    def _residual(p_vec, out):
        for c in range(k):
            out[c] = 0.0
        for i in range(n):
            eta = 0.0
            for c in range(k):
                eta += z[i, c] * p_vec[c]
            pr = 1.0 / (1.0 + math.exp(-eta))
            w = el[i] * (resp[i] - pr)
            for c in range(k):
                out[c] += w * z[i, c]
        for c in range(k):
            out[c] = out[c] / n - target[c]

    _residual(phi, fx)
    norm = 0.0
    for c in range(k):
        norm = max(norm, abs(fx[c]))
    if not math.isfinite(norm):
        return phi, 2

    cand = np.zeros(k)
    f_try = np.zeros(k)
    for _ in range(max_iter):
        if norm <= tol:
            return phi, 0
        for a in range(k):
            for b in range(k):
                j[a, b] = 0.0
        for i in range(n):
            eta = 0.0
            for c in range(k):
                eta += z[i, c] * phi[c]
            pr = 1.0 / (1.0 + math.exp(-eta))
            w = el[i] * pr * (1.0 - pr) / n
            for a in range(k):
                za = w * z[i, a]
                for b in range(k):
                    j[a, b] -= za * z[i, b]
        step = np.linalg.solve(j, -fx)
        ok = True
        for c in range(k):
            if not math.isfinite(step[c]):
                ok = False
        if not ok:
            return phi, 2
        scale = 1.0
        accepted = False
        for _ in range(31):
            for c in range(k):
                cand[c] = phi[c] + scale * step[c]
            _residual(cand, f_try)
            norm_try = 0.0
            for c in range(k):
                norm_try = max(norm_try, abs(f_try[c]))
            if math.isfinite(norm_try) and norm_try < norm:
                accepted = True
                break
            scale *= damping
        if not accepted:
            return phi, 2
        for c in range(k):
            phi[c] = cand[c]
            fx[c] = f_try[c]
        norm = norm_try
        if bound > 0.0:
            for c in range(k):
                if abs(phi[c]) > bound:
                    return phi, 3
    if norm <= tol:
        return phi, 0
    return phi, 1


@njit(cache=True)
def augmented_u_core(z, delta, y_filled, x, mu, phi, theta, logit, floor):
    """Stacked (score, weighted outcome, weighted calibration, calibration)
    sample means for the over-identified system; mirrors the numpy path."""
    n, k = z.shape
    d = x.shape[1]
    out = np.zeros(k + 1 + 2 * d)
    sqrt2 = math.sqrt(2.0)
    inv_sqrt2pi = 1.0 / math.sqrt(2.0 * math.pi)
    for i in range(n):
        eta = 0.0
        for c in range(k):
            eta += z[i, c] * phi[c]
        if logit:
            raw = 1.0 / (1.0 + math.exp(-eta))
            resid = delta[i] - raw
        else:
            raw = 0.5 * (1.0 + math.erf(eta / sqrt2))
            pc = min(max(raw, floor), 1.0 - floor)
            pdf = math.exp(-0.5 * eta * eta) * inv_sqrt2pi
            resid = (delta[i] - pc) * pdf / (pc * (1.0 - pc))
        pi = min(max(raw, floor), 1.0 - floor)
        w = delta[i] / pi
        for c in range(k):
            out[c] += resid * z[i, c]
        out[k] += w * (y_filled[i] - theta)
        for c in range(d):
            dev = x[i, c] - mu[c]
            out[k + 1 + c] += w * dev
            out[k + 1 + d + c] += dev
    for c in range(out.size):
        out[c] /= n
    return out
