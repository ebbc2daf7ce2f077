"""Symmetric / SPD matrix algebra.

All functions accept plain ``ndarray`` inputs. Functions documented with a
``(..., n, n)`` shape operate on stacks of matrices.
"""

from typing import NamedTuple

import numpy as np

from .errors import (
    DimMismatchError,
    InvalidInputError,
    NotRepairableError,
    NotSPDError,
    SpdOverflowError,
)

# exp(x) overflows float64 beyond this
_MAX_LOG = np.log(np.finfo(np.float64).max)

# gamma schedule for ensure_spd, relative to trace/dim
REPAIR_SCHEDULE = (0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, 1e-1, 1.0, 10.0, 100.0)


class EigPair(NamedTuple):
    """Eigendecomposition ``S = vectors @ diag(values) @ vectors.T``.

    ``values`` are sorted in descending order along the last axis.
    """

    values: np.ndarray
    vectors: np.ndarray


def symmetrize(A):
    """Return ``(A + A^T) / 2`` as float64, validating shape and finiteness."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2] or A.shape[-1] < 1:
        raise InvalidInputError(f"expected square matrices, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("matrix contains non-finite entries")
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def sym_eig(S):
    """Symmetric eigendecomposition with eigenvalues in descending order.

    Uses LAPACK's symmetric driver (``eigh``), so the spectrum is real and the
    eigenvector basis orthogonal.

    Parameters
    ----------
    S : ndarray, shape (..., n, n)

    Returns
    -------
    EigPair
    """
    S = symmetrize(S)
    w, U = np.linalg.eigh(S)
    return EigPair(w[..., ::-1].copy(), U[..., ::-1].copy())


def _eigh(S):
    # ascending order; internal use where ordering is irrelevant
    return np.linalg.eigh(S)


def reconstruct(values, vectors):
    """``U diag(values) U^T`` for stacks of eigenpairs."""
    return (vectors * values[..., None, :]) @ np.swapaxes(vectors, -1, -2)


def min_eig(S):
    return np.linalg.eigvalsh(symmetrize(S))[..., 0]


def is_spd(S):
    """True where every matrix in the stack has a strictly positive spectrum."""
    try:
        return np.all(min_eig(S) > 0)
    except InvalidInputError:
        return False


def as_spd(S):
    """Symmetrize ``S`` and verify it is SPD.

    Raises
    ------
    NotSPDError
        If any eigenvalue is ``<= 0``. Use :func:`ensure_spd` to repair.
    """
    S = symmetrize(S)
    lo = np.min(np.linalg.eigvalsh(S))
    if not lo > 0:
        raise NotSPDError(f"smallest eigenvalue {lo:.3e} is not positive")
    return S


def spd_log(S):
    """Matrix logarithm of SPD matrices, ``U log(Sigma) U^T``.

    Parameters
    ----------
    S : ndarray, shape (..., n, n)

    Returns
    -------
    ndarray, shape (..., n, n)
        Symmetric logarithm.
    """
    S = symmetrize(S)
    w, U = _eigh(S)
    if not np.all(w > 0):
        raise NotSPDError(f"smallest eigenvalue {np.min(w):.3e} is not positive")
    return symmetrize(reconstruct(np.log(w), U))


def spd_exp(S):
    """Matrix exponential of symmetric matrices, ``U exp(Sigma) U^T``.

    Raises
    ------
    SpdOverflowError
        If an eigenvalue exceeds ``log(float64 max)``.
    """
    S = symmetrize(S)
    w, U = _eigh(S)
    if np.max(w) > _MAX_LOG:
        raise SpdOverflowError(f"eigenvalue {np.max(w):.3e} overflows exp")
    return symmetrize(reconstruct(np.exp(w), U))


def logeuclid_dist(S1, S2):
    """Log-Euclidean distance ``||log(S2) - log(S1)||_F``.

    Parameters
    ----------
    S1, S2 : ndarray, shape (..., n, n)
        SPD matrices of equal shape.

    Returns
    -------
    float or ndarray, shape (...,)
    """
    S1 = np.asarray(S1, dtype=np.float64)
    S2 = np.asarray(S2, dtype=np.float64)
    if S1.shape != S2.shape:
        raise DimMismatchError(f"shape mismatch: {S1.shape} vs {S2.shape}")
    diff = spd_log(S2) - spd_log(S1)
    # sum of squares in a fixed order keeps d(a, b) == d(b, a) bitwise
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))


def sym_vectorize(S):
    """Isometric half-vectorization of symmetric matrices.

    The upper triangle is read row-major; off-diagonal entries are scaled by
    ``sqrt(2)`` so that ``vec(A) . vec(B) == <A, B>_F``.

    Parameters
    ----------
    S : ndarray, shape (..., n, n)

    Returns
    -------
    ndarray, shape (..., n (n + 1) / 2)
    """
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[-1]
    r, c = np.triu_indices(n)
    scale = np.where(r == c, 1.0, np.sqrt(2.0))
    return S[..., r, c] * scale


def sym_unvectorize(v, n=None):
    """Inverse of :func:`sym_vectorize`."""
    v = np.asarray(v, dtype=np.float64)
    m = v.shape[-1]
    if n is None:
        n = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if n * (n + 1) // 2 != m:
        raise DimMismatchError(f"vector length {m} is not triangular")
    r, c = np.triu_indices(n)
    scale = np.where(r == c, 1.0, 1.0 / np.sqrt(2.0))
    out = np.zeros(v.shape[:-1] + (n, n))
    out[..., r, c] = v * scale
    out[..., c, r] = v * scale
    return out


def sym_vectorize_adjoint(g, n):
    """Adjoint of :func:`sym_vectorize` mapping a vector gradient to a symmetric one.

    Satisfies ``<g, vec(dS)> == <adj(g), dS>_F`` for every symmetric ``dS``.
    """
    g = np.asarray(g, dtype=np.float64)
    r, c = np.triu_indices(n)
    half = np.where(r == c, 1.0, np.sqrt(2.0) / 2.0)
    out = np.zeros(g.shape[:-1] + (n, n))
    out[..., r, c] = g * half
    out[..., c, r] = g * half
    return out


def loewner_matrix(values, f, fprime, rtol=1e-8):
    """First divided differences of ``f`` on a spectrum.

    ``L[i, j] = (f(s_i) - f(s_j)) / (s_i - s_j)`` for distinct eigenvalues and
    ``f'`` on (near-)coincident ones. Near-coincident pairs, where
    ``|s_i - s_j| <= rtol * max(|s_i|, |s_j|, 1)``, use ``f'`` at the midpoint,
    which is second-order accurate and avoids cancellation.

    Parameters
    ----------
    values : ndarray, shape (..., n)
    f, fprime : callable
        Elementwise function and its derivative.

    Returns
    -------
    ndarray, shape (..., n, n)
    """
    s = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("eigenvalues must be finite")
    si = s[..., :, None]
    sj = s[..., None, :]
    diff = si - sj
    close = np.abs(diff) <= rtol * np.maximum(np.maximum(np.abs(si), np.abs(sj)), 1.0)
    fs = f(s)
    num = fs[..., :, None] - fs[..., None, :]
    safe = np.where(close, 1.0, diff)
    return np.where(close, fprime(0.5 * (si + sj)), num / safe)


def spectral_backward(U, L, grad_out):
    """Backward pass of ``Y = U f(Sigma) U^T`` for symmetric inputs.

    Returns ``U (L * (U^T G U)) U^T`` with ``G`` the symmetrized upstream
    gradient.
    """
    G = 0.5 * (grad_out + np.swapaxes(grad_out, -1, -2))
    Ut = np.swapaxes(U, -1, -2)
    inner = L * (Ut @ G @ U)
    out = U @ inner @ Ut
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def ensure_spd(A, abs_floor=None, return_gamma=False):
    """Repair a symmetric matrix into an SPD one by scaled diagonal loading.

    Adds ``gamma * trace(A) / n * I`` with the smallest ``gamma`` from
    :data:`REPAIR_SCHEDULE` that lifts the smallest eigenvalue to at least
    ``abs_floor`` (default ``1e-12 * trace(A) / n``).

    Parameters
    ----------
    A : ndarray, shape (n, n)
    abs_floor : float, optional
    return_gamma : bool
        Also return the loading factor used.

    Raises
    ------
    NotRepairableError
        If the trace is not positive or no schedule entry suffices.
    """
    A = symmetrize(A)
    if A.ndim != 2:
        raise InvalidInputError("ensure_spd expects a single matrix")
    n = A.shape[0]
    mean_eig = np.trace(A) / n
    if not mean_eig > 0:
        raise NotRepairableError(f"trace {np.trace(A):.3e} is not positive")
    floor = 1e-12 * mean_eig if abs_floor is None else abs_floor
    w = np.linalg.eigvalsh(A)
    for gamma in REPAIR_SCHEDULE:
        if w[0] + gamma * mean_eig >= floor and w[0] + gamma * mean_eig > 0:
            out = A if gamma == 0.0 else A + gamma * mean_eig * np.eye(n)
            return (out, gamma) if return_gamma else out
    raise NotRepairableError(f"smallest eigenvalue {w[0]:.3e} cannot be lifted")
