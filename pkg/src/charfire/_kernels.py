"""Compiled inner loops for the samplers."""
import numpy as np
from numba import njit

ETA_MAX = 50.0


@njit(cache=True)
def poisson_delta(y, wt, mu_old, mu_new):
    return wt * (y * (np.log(mu_new) - np.log(mu_old)) - (mu_new - mu_old))


@njit(cache=True)
def site_sweep(beta, s_beta, eta, lam, lam_other, y, w, wt,
               colptr, rows, vals, S, inv_sigma_sq, level, inv_sigma0_sq,
               scales, z, logu, accepted):
    """One random-scan-free pass of scalar random-walk updates over ``beta``.

    ``eta``/``lam`` are the linear predictor and integrated intensity of the
    process being updated, ``lam_other`` the other process.  ``s_beta`` holds
    ``S @ beta`` and ``level[0]`` the mean of ``beta``; both are kept in sync.
    The column structure of the basis is given in CSC form.
    """
    p = beta.shape[0]
    for k in range(p):
        d = scales[k] * z[k]
        lo = colptr[k]
        hi = colptr[k + 1]
        ok = True
        for t in range(lo, hi):
            e = eta[rows[t]] + d * vals[t]
            if e > ETA_MAX or e < -ETA_MAX:
                ok = False
                break
        if not ok:
            continue
        dll = 0.0
        for t in range(lo, hi):
            r = rows[t]
            lam_new = w[r] * np.exp(eta[r] + d * vals[t])
            mu_old = lam[r] + lam_other[r]
            mu_new = lam_new + lam_other[r]
            dll += poisson_delta(y[r], wt[r], mu_old, mu_new)
        dpen = -(2.0 * d * s_beta[k] + d * d * S[k, k]) * 0.5 * inv_sigma_sq
        m_new = level[0] + d / p
        dlev = -0.5 * inv_sigma0_sq * (m_new * m_new - level[0] * level[0])
        if logu[k] < dll + dpen + dlev:
            beta[k] += d
            level[0] = m_new
            for r in range(p):
                s_beta[r] += d * S[k, r]  # S symmetric; row access is contiguous
            for t in range(lo, hi):
                r = rows[t]
                eta[r] += d * vals[t]
                lam[r] = w[r] * np.exp(eta[r])
            accepted[k] += 1


def csc_columns(X: np.ndarray, tol: float = 0.0):
    """CSC triplets of ``X`` keeping entries with ``|x| > tol``."""
    colptr = [0]
    rows, vals = [], []
    for k in range(X.shape[1]):
        nz = np.flatnonzero(np.abs(X[:, k]) > tol)
        rows.extend(nz.tolist())
        vals.extend(X[nz, k].tolist())
        colptr.append(len(rows))
    return (np.asarray(colptr, dtype=np.int64), np.asarray(rows, dtype=np.int64),
            np.asarray(vals, dtype=np.float64))
