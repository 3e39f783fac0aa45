"""Independent numerical oracles shared across the test suite.

Everything here deliberately avoids the library's own differentiation
and rendering paths: finite differences, dense scans, and brute-force
double loops only.
"""

import numpy as np

FD_H = 1e-3
REL_TOL = 1e-4
ABS_TOL = 1e-6


def central_difference(f, x: np.ndarray, h: float = FD_H) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x, in float64."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x.astype(np.float32))
        flat[i] = orig - h
        fm = f(x.astype(np.float32))
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def grads_close(analytic: np.ndarray, numeric: np.ndarray,
                rel: float = REL_TOL, abs_: float = ABS_TOL) -> bool:
    """Per-element agreement within rel*|numeric| or abs_, whichever is looser."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    tol = np.maximum(rel * np.abs(numeric), abs_)
    return bool(np.all(err <= tol))


def max_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest error normalized by the element tolerance (<= 1 means pass)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    tol = np.maximum(REL_TOL * np.abs(numeric), ABS_TOL)
    return float(np.max(err / tol)) if err.size else 0.0


def brute_force_chamfer(p: np.ndarray, q: np.ndarray) -> float:
    """O(|P||Q|) symmetric mean nearest-neighbor distance."""
    d = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=2)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def scan_first_root(sdf, origin: np.ndarray, direction: np.ndarray,
                    t0: float, t1: float, coarse: float = 5e-4,
                    fine: float = 1e-5):
    """First sign change of sdf along a ray by dense scanning.

    Coarse pass locates the first bracketing interval; a fine scan pins
    the root to ``fine`` resolution.  Valid for 1-Lipschitz fields where
    no root can hide between coarse samples whose values exceed coarse/2.
    Returns the root parameter, or None when min(s) > coarse/2 (provably
    no intersection), or the string "grazing" when inconclusive.
    """
    n = max(2, int(np.ceil((t1 - t0) / coarse)) + 1)
    ts = np.linspace(t0, t1, n)
    pts = origin[None, :] + ts[:, None] * direction[None, :]
    vals = sdf(pts)
    neg = vals <= 0.0
    if not neg.any():
        if vals.min() > coarse / 2.0:
            return None
        return "grazing"
    k = int(np.argmax(neg))
    if k == 0:
        return float(ts[0])
    lo, hi = ts[k - 1], ts[k]
    m = max(2, int(np.ceil((hi - lo) / fine)) + 1)
    fts = np.linspace(lo, hi, m)
    fpts = origin[None, :] + fts[:, None] * direction[None, :]
    fvals = sdf(fpts)
    fneg = fvals <= 0.0
    j = int(np.argmax(fneg)) if fneg.any() else m - 1
    return float(fts[j])
