"""Dense linear algebra and rank statistics for small symmetric problems.

Everything here operates on plain float64 numpy arrays. Matrices are
row-major 2-D arrays; the update matrices produced by training are C x d
with one row per class. All functions are pure and safe to call from any
number of workers.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, InsufficientDataError

# Norms below this are treated as zero (cosine convention, degenerate updates).
ZERO_NORM_TOL = 1e-12
# Eigenvalues of PSD matrices in (-PSD_CLAMP_TOL, 0) are round-off and clamp to 0.
PSD_CLAMP_TOL = 1e-10
# Maximum relative asymmetry accepted by the symmetric eigensolver.
ASYMMETRY_RTOL = 1e-9

__all__ = [
    "as_matrix",
    "as_vector",
    "gram_class_space",
    "sym_eigenvalues",
    "clamp_psd",
    "cosine",
    "pearson",
    "spearman",
    "average_ranks",
    "median_mad",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 array with positive dims."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be 2-D with positive dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Validate and return a finite 1-D float64 array."""
    arr = np.asarray(a, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def gram_class_space(m) -> np.ndarray:
    """Class-space Gram matrix M @ M.T of a C x d update matrix.

    The result is symmetric positive semi-definite and costs O(d C^2).
    """
    mat = as_matrix(m, "update matrix")
    a = mat @ mat.T
    # Exact symmetry regardless of BLAS reduction order.
    return 0.5 * (a + a.T)


def _jacobi_eigenvalues(a: np.ndarray, max_sweeps: int = 100, tol: float = 1e-12) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Converges when the off-diagonal Frobenius norm drops below
    tol * diagonal Frobenius norm. Matrices here are at most ~100 x 100,
    where Jacobi is simple and robust.
    """
    work = a.copy()
    n = work.shape[0]
    if n == 1:
        return work[0, :1].copy()
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(work**2) - np.sum(np.diag(work) ** 2), 0.0))
        diag_norm = np.sqrt(np.sum(np.diag(work) ** 2))
        if off <= tol * max(diag_norm, np.finfo(np.float64).tiny):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = work[p, q]
                if apq == 0.0:
                    continue
                g = 100.0 * abs(apq)
                # Negligible against both diagonal entries: zero it and move on.
                if abs(work[p, p]) + g == abs(work[p, p]) and abs(work[q, q]) + g == abs(work[q, q]):
                    work[p, q] = 0.0
                    work[q, p] = 0.0
                    continue
                h = work[q, q] - work[p, p]
                if abs(h) + g == abs(h):
                    t = apq / h
                else:
                    theta = 0.5 * h / apq
                    if theta >= 0.0:
                        t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                    else:
                        t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                row_p = work[p, :].copy()
                row_q = work[q, :].copy()
                work[p, :] = c * row_p - s * row_q
                work[q, :] = s * row_p + c * row_q
                col_p = work[:, p].copy()
                col_q = work[:, q].copy()
                work[:, p] = c * col_p - s * col_q
                work[:, q] = s * col_p + c * col_q
                work[p, q] = 0.0
                work[q, p] = 0.0
    return np.diag(work).copy()


def sym_eigenvalues(a) -> np.ndarray:
    """All eigenvalues of a symmetric matrix, sorted descending.

    Raises ContractError when the input is asymmetric beyond 1e-9 relative.
    The returned values sum to trace(a) up to round-off.
    """
    mat = as_matrix(a, "symmetric matrix")
    n, m = mat.shape
    if n != m:
        raise DimensionError(f"expected a square matrix, got {n} x {m}")
    scale = np.max(np.abs(mat))
    asym = np.max(np.abs(mat - mat.T))
    if scale > 0.0 and asym > ASYMMETRY_RTOL * scale:
        raise ContractError(f"matrix is asymmetric: max |a - a.T| = {asym:.3e} vs scale {scale:.3e}")
    sym = 0.5 * (mat + mat.T)
    eigs = _jacobi_eigenvalues(sym)
    return np.sort(eigs)[::-1]


def clamp_psd(eigenvalues: np.ndarray, tol: float = PSD_CLAMP_TOL) -> np.ndarray:
    """Clamp round-off negatives of a PSD spectrum to zero.

    Values below -tol are genuine contract violations and raise.
    """
    eigs = np.asarray(eigenvalues, dtype=np.float64)
    low = float(np.min(eigs)) if eigs.size else 0.0
    if low < -tol:
        raise ContractError(f"spectrum has eigenvalue {low:.3e} below the PSD tolerance -{tol:.0e}")
    return np.maximum(eigs, 0.0)


def cosine(u, v) -> float:
    """Cosine similarity of two equal-length vectors.

    Returns 0.0 when either norm is below 1e-12: a vanishing vector carries
    no directional information.
    """
    ua = as_vector(u, "u")
    va = as_vector(v, "v")
    if ua.shape[0] != va.shape[0]:
        raise DimensionError(f"length mismatch: {ua.shape[0]} vs {va.shape[0]}")
    nu = float(np.linalg.norm(ua))
    nv = float(np.linalg.norm(va))
    if nu < ZERO_NORM_TOL or nv < ZERO_NORM_TOL:
        return 0.0
    return float(np.clip(float(ua @ va) / (nu * nv), -1.0, 1.0))


def pearson(a, b) -> float:
    """Sample Pearson correlation; 0.0 when either input has zero variance."""
    av = as_vector(a, "a")
    bv = as_vector(b, "b")
    if av.shape[0] != bv.shape[0]:
        raise DimensionError(f"length mismatch: {av.shape[0]} vs {bv.shape[0]}")
    if av.shape[0] < 2:
        raise InsufficientDataError("correlation needs at least 2 points")
    ac = av - av.mean()
    bc = bv - bv.mean()
    ssa = float(ac @ ac)
    ssb = float(bc @ bc)
    if ssa == 0.0 or ssb == 0.0:
        return 0.0
    return float(np.clip(float(ac @ bc) / np.sqrt(ssa * ssb), -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """Fractional ranks starting at 1; tied values share their mean rank."""
    xv = as_vector(x, "x")
    order = np.argsort(xv, kind="stable")
    ranks = np.empty(xv.shape[0], dtype=np.float64)
    i = 0
    n = xv.shape[0]
    while i < n:
        j = i
        while j + 1 < n and xv[order[j + 1]] == xv[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties.

    Inherits the constant-vector convention from pearson: an all-tied input
    yields 0.0 rather than NaN.
    """
    av = as_vector(a, "a")
    bv = as_vector(b, "b")
    if av.shape[0] != bv.shape[0]:
        raise DimensionError(f"length mismatch: {av.shape[0]} vs {bv.shape[0]}")
    if av.shape[0] < 2:
        raise InsufficientDataError("correlation needs at least 2 points")
    return pearson(average_ranks(av), average_ranks(bv))


def median_mad(x) -> tuple[float, float]:
    """Median and median absolute deviation of a non-empty vector.

    Even lengths use the midpoint of the two central order statistics.
    """
    xv = as_vector(x, "x")
    if xv.shape[0] == 0:
        raise InsufficientDataError("median of an empty vector")
    med = float(np.median(xv))
    mad = float(np.median(np.abs(xv - med)))
    return med, mad
