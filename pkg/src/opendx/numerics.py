"""Dense linear algebra and probability helpers.

Matrices are plain 2-D float64 numpy arrays.
"""
import numpy as np

from . import _kernels

EIGEN_TOL = 1e-10
EIGEN_MAX_SWEEPS = 100


class NumericsError(ValueError):
    pass


def as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise NumericsError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise NumericsError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def sym_eigen(a, tol=EIGEN_TOL, max_sweeps=EIGEN_MAX_SWEEPS):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted
    descending and eigenvectors stored as columns.  The off-diagonal
    stopping tolerance is relative to ``max(1, ||A||_F)``.
    """
    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise NumericsError(f"matrix must be square, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericsError("matrix has non-finite entries")
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    if np.max(np.abs(a - a.T)) > 1e-9:
        raise NumericsError("matrix is not symmetric to 1e-9")
    a = 0.5 * (a + a.T)
    scale = max(1.0, float(np.linalg.norm(a)))
    w, v, sweeps, off = _kernels.jacobi(a, tol * scale, max_sweeps)
    if off >= tol * scale:
        raise NumericsError(
            f"Jacobi did not converge in {sweeps} sweeps (off-diagonal norm {off:.3e})"
        )
    order = np.argsort(-w, kind="stable")
    return w[order], np.ascontiguousarray(v[:, order])


def softmax(logits):
    """Row-wise softmax with max subtraction; accepts 1-D or 2-D input."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def entropy(p):
    """Shannon entropy in nats; ``0 log 0`` is taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise NumericsError("entropy expects a non-empty 1-D distribution")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise NumericsError("input is not a probability distribution")
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


def entropy_rows(p):
    """Vectorised entropy for a batch of distributions (no validation)."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(0.0, -terms.sum(axis=-1))
