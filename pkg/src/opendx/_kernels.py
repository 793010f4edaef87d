"""Hot inner loops, compiled with numba when available.

Set ``OPENDX_NUMBA=0`` before import to force the pure-numpy path. Both
paths are importable explicitly (``*_numba`` / ``*_numpy``) so tests and the
benchmark can compare them side by side.
"""
import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("OPENDX_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# CSR x dense: rows of X are sparse binary finding vectors
# --------------------------------------------------------------------------


def csr_affine_numpy(indptr, indices, w, b):
    n = indptr.shape[0] - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    dense = np.zeros((n, w.shape[0]))
    dense[rows, indices] = 1.0
    out = dense @ w
    out += b
    return out


def _csr_affine_loop(indptr, indices, w, b):
    n = indptr.shape[0] - 1
    h = w.shape[1]
    out = np.empty((n, h))
    for i in range(n):
        for k in range(h):
            out[i, k] = b[k]
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            for k in range(h):
                out[i, k] += w[j, k]
    return out


def csr_grad_numpy(indptr, indices, delta, n_features):
    """Return X^T @ delta for binary CSR X."""
    n = indptr.shape[0] - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    dense = np.zeros((n, n_features))
    dense[rows, indices] = 1.0
    return dense.T @ delta


def _csr_grad_loop(indptr, indices, delta, n_features):
    n = indptr.shape[0] - 1
    h = delta.shape[1]
    out = np.zeros((n_features, h))
    for i in range(n):
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            for k in range(h):
                out[j, k] += delta[i, k]
    return out


# --------------------------------------------------------------------------
# fused Adam update (in place)
# --------------------------------------------------------------------------


def adam_update_numpy(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    step = np.sqrt(v / c2)
    step += eps
    np.divide(m / c1, step, out=step)
    step *= lr
    p -= step


def _adam_update_loop(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    pf = p.reshape(-1)
    gf = g.reshape(-1)
    mf = m.reshape(-1)
    vf = v.reshape(-1)
    for i in range(pf.size):
        gi = gf[i]
        mi = beta1 * mf[i] + (1.0 - beta1) * gi
        vi = beta2 * vf[i] + (1.0 - beta2) * (gi * gi)
        mf[i] = mi
        vf[i] = vi
        pf[i] -= lr * ((mi / c1) / (np.sqrt(vi / c2) + eps))


# --------------------------------------------------------------------------
# cyclic Jacobi eigendecomposition
# --------------------------------------------------------------------------


def _offdiag_norm(a):
    n = a.shape[0]
    s = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                s += a[i, j] * a[i, j]
    return np.sqrt(s)


def _rotation_t(app, aqq, apq):
    """tan of the Jacobi angle, smaller root; overflow-safe for large theta."""
    theta = (aqq - app) / (2.0 * apq)
    if abs(theta) > 1e150:
        return 0.5 / theta
    t = 1.0 / (abs(theta) + math.sqrt(1.0 + theta * theta))
    return t if theta >= 0.0 else -t


_rotation_t_py = _rotation_t  # the numpy path keeps the interpreted version


def _jacobi_loop(a, tol, max_sweeps):
    # Rotations touch rows p, q of the symmetric matrix and of V^T (both
    # contiguous); columns are mirrored from the updated rows.
    n = a.shape[0]
    a = a.copy()
    vt = np.eye(n)
    sweeps = 0
    off = _offdiag_norm(a)
    while off >= tol and sweeps < max_sweeps:
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                g = 100.0 * abs(apq)
                if abs(a[p, p]) + g == abs(a[p, p]) and abs(a[q, q]) + g == abs(a[q, q]):
                    # negligible against both diagonal entries: drop it
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                t = _rotation_t(a[p, p], a[q, q], apq)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                app = a[p, p] - t * apq
                aqq = a[q, q] + t * apq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    a[k, p] = a[p, k]
                    a[k, q] = a[q, k]
                a[p, p] = app
                a[q, q] = aqq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vpk = vt[p, k]
                    vqk = vt[q, k]
                    vt[p, k] = c * vpk - s * vqk
                    vt[q, k] = s * vpk + c * vqk
        sweeps += 1
        off = _offdiag_norm(a)
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    return w, vt.T.copy(), sweeps, off


def jacobi_numpy(a, tol, max_sweeps):
    """Same rotation sequence as the compiled loop, rows vectorised."""
    n = a.shape[0]
    a = np.array(a, dtype=np.float64, copy=True)
    vt = np.eye(n)
    sweeps = 0

    off_mask = ~np.eye(n, dtype=bool)

    def off_norm(m):
        # summing the off-diagonal entries directly; subtracting the diagonal
        # from the full Frobenius norm cancels catastrophically near convergence
        return float(np.sqrt(np.sum(m[off_mask] ** 2)))

    off = off_norm(a)
    while off >= tol and sweeps < max_sweeps:
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                g = 100.0 * abs(apq)
                if abs(a[p, p]) + g == abs(a[p, p]) and abs(a[q, q]) + g == abs(a[q, q]):
                    # negligible against both diagonal entries: drop it
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                t = _rotation_t_py(a[p, p], a[q, q], apq)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                app = a[p, p] - t * apq
                aqq = a[q, q] + t * apq
                rp = a[p].copy()
                rq = a[q]
                a[p] = c * rp - s * rq
                a[q] = s * rp + c * rq
                a[:, p] = a[p]
                a[:, q] = a[q]
                a[p, p] = app
                a[q, q] = aqq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = vt[p].copy()
                vq = vt[q]
                vt[p] = c * vp - s * vq
                vt[q] = s * vp + c * vq
        sweeps += 1
        off = off_norm(a)
    return np.diag(a).copy(), vt.T.copy(), sweeps, off


if HAVE_NUMBA:
    csr_affine_numba = _njit(_csr_affine_loop)
    csr_grad_numba = _njit(_csr_grad_loop)
    adam_update_numba = _njit(_adam_update_loop)
    _offdiag_norm = _njit(_offdiag_norm)
    _rotation_t = _njit(_rotation_t)
    jacobi_numba = _njit(_jacobi_loop)
else:  # pragma: no cover
    csr_affine_numba = None
    csr_grad_numba = None
    adam_update_numba = None
    jacobi_numba = None


def backend():
    return "numba" if USE_NUMBA else "numpy"


def csr_affine(indptr, indices, w, b):
    """``X @ w + b`` for a binary CSR matrix ``X``."""
    if USE_NUMBA:
        return csr_affine_numba(indptr, indices, w, b)
    return csr_affine_numpy(indptr, indices, w, b)


def csr_grad(indptr, indices, delta, n_features):
    if USE_NUMBA:
        return csr_grad_numba(indptr, indices, delta, n_features)
    return csr_grad_numpy(indptr, indices, delta, n_features)


def jacobi(a, tol, max_sweeps):
    if USE_NUMBA:
        return jacobi_numba(np.ascontiguousarray(a, dtype=np.float64), tol, max_sweeps)
    return jacobi_numpy(a, tol, max_sweeps)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    """In-place bias-corrected Adam step on contiguous float64 arrays."""
    if USE_NUMBA:
        adam_update_numba(p, g, m, v, lr, beta1, beta2, eps, c1, c2)
    else:
        adam_update_numpy(p, g, m, v, lr, beta1, beta2, eps, c1, c2)
