"""GradCAM++ relevance maps on SPD activations and entrywise t-tests.

The ReEig output is a single two-dimensional activation with no spatial
pooling, so GradCAM++ is ported entry by entry: every matrix entry gets its
own weight from the first, second and third derivatives of ``exp(y_c)``,
which reduce to powers of the first derivative ``g = dy_c / dA``.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import betainc

from .errors import DimMismatchError, InvalidInputError, ZeroSaliencyError
from .network import model_forward

LAYERS = ("reeig", "features")


def gradcam_weights(A, g):
    """Per-entry GradCAM++ weights ``g^2 / (2 g^2 + sum(A) g^3)``.

    Entries with a zero denominator get weight zero.

    Parameters
    ----------
    A, g : ndarray, shape (..., n, n)
        Activation and gradient of the class score with respect to it.
    """
    g2 = g * g
    g3 = g2 * g
    total = A.sum(axis=(-2, -1), keepdims=True)
    denom = 2.0 * g2 + total * g3
    safe = np.where(denom != 0.0, denom, 1.0)
    return np.where(denom != 0.0, g2 / safe, 0.0)


def gradcam_pp(model, X, target, layer="reeig"):
    """GradCAM++ relevance of class ``target`` for one epoch or a stack.

    ``layer="reeig"`` attaches to the ReEig output (``d_out x d_out``);
    ``layer="features"`` attaches to the SPD feature matrix fed to BiMap,
    whose rows and columns are indexed by (channel, lag) pairs.

    Parameters
    ----------
    model : SpdNet
    X : ndarray, shape (C, T) or (N, C, T)
    target : int or array of int
        Class whose pre-softmax score is explained.

    Returns
    -------
    ndarray, shape (n, n) or (N, n, n)
        Symmetric, nonnegative maps with maximum 1.

    Raises
    ------
    ZeroSaliencyError
        If a map is zero everywhere.
    """
    if layer not in LAYERS:
        raise InvalidInputError(f"layer must be one of {LAYERS}")
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    logits, cache = model_forward(model, X)
    B, K = logits.shape
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), (B,))
    if np.any((target < 0) | (target >= K)):
        raise InvalidInputError(f"target class outside [0, {K})")
    onehot = np.zeros((B, K))
    onehot[np.arange(B), target] = 1.0
    grads = model.backward(cache, onehot, wrt_input=layer == "features")
    A = cache["reeig"] if layer == "reeig" else cache["S"]
    g = grads["reeig"] if layer == "reeig" else grads["S"]
    alpha = gradcam_weights(A, g)
    cam = np.maximum(alpha * np.maximum(g, 0.0) * A, 0.0)
    cam = 0.5 * (cam + np.swapaxes(cam, -1, -2))
    peak = cam.max(axis=(-2, -1))
    if np.any(peak <= 0):
        bad = np.flatnonzero(peak <= 0)
        raise ZeroSaliencyError(f"relevance is zero everywhere for trial(s) {bad.tolist()}")
    cam = cam / peak[:, None, None]
    return cam[0] if single else cam


def submatrix_zoom(M, n_channels, psi):
    """Entries at rows and columns ``{c * psi}``, the zero-lag block.

    Raises
    ------
    DimMismatchError
        If the index set does not fit inside ``M``.
    """
    M = np.asarray(M)
    n = M.shape[-1]
    if M.shape[-2] != n or psi < 1 or n_channels < 1 or (n_channels - 1) * psi >= n:
        raise DimMismatchError(f"cannot zoom a {M.shape[-2:]} map with C={n_channels}, psi={psi}")
    idx = np.arange(n_channels) * psi
    return M[..., idx[:, None], idx[None, :]]


def block_masses(M, n_channels, psi):
    """Mean entry of every ``psi x psi`` channel block, shape ``(C, C)``."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape[-1] != n_channels * psi or M.shape[-2] != n_channels * psi:
        raise DimMismatchError(f"expected a {n_channels * psi} square map, got {M.shape[-2:]}")
    blocks = M.reshape(M.shape[:-2] + (n_channels, psi, n_channels, psi))
    return blocks.mean(axis=(-3, -1))


def pair_block_score(M, n_channels, psi, pair):
    """Mass of the ``pair`` cross-channel block and the mean over the other ones.

    The baseline averages the block masses of every other unordered channel
    pair, i.e. the expected mass under a random relabelling of channels.
    """
    bm = block_masses(M, n_channels, psi)
    i, j = pair
    rows, cols = np.triu_indices(n_channels, k=1)
    other = [(a, b) for a, b in zip(rows, cols) if {a, b} != {i, j}]
    if not other:
        raise InvalidInputError("need at least three channels for a baseline")
    base = np.mean([bm[..., a, b] for a, b in other], axis=0)
    return bm[..., i, j], base


# ---------------------------------------------------------------------------
# significance


@dataclass(frozen=True)
class SignificanceResult:
    """Entrywise test outcome; ``degenerate`` flags zero-variance entries."""

    t: np.ndarray
    p: np.ndarray
    mask: np.ndarray
    dof: np.ndarray
    degenerate: np.ndarray
    alpha: float
    mode: str


def student_t_sf2(t, dof):
    """Two-sided Student-t tail probability ``P(|T| >= |t|)``."""
    t = np.asarray(t, dtype=np.float64)
    dof = np.asarray(dof, dtype=np.float64)
    with np.errstate(over="ignore"):
        x = dof / (dof + t * t)
    return np.clip(betainc(dof / 2.0, 0.5, x), 0.0, 1.0)


def _stack(group):
    G = np.asarray(group, dtype=np.float64)
    if G.ndim != 3 or G.shape[-1] != G.shape[-2]:
        raise InvalidInputError(f"expected a stack of square matrices, got shape {G.shape}")
    return 0.5 * (G + np.swapaxes(G, -1, -2))


def paired_ttest(group_a, group_b, mode="paired", alpha=0.05):
    """Entrywise t-test between two stacks of symmetric matrices.

    ``mode="paired"`` pairs trials by index (equal sizes, ``n >= 2``) and
    tests the mean difference with ``n - 1`` degrees of freedom;
    ``mode="welch"`` runs the unequal-variance two-sample test. Entries whose
    variance vanishes get ``p = 0`` if the mean difference is nonzero and
    ``p = 1`` otherwise, and are flagged in ``degenerate``.

    Returns
    -------
    SignificanceResult
    """
    A = _stack(group_a)
    B = _stack(group_b)
    if A.shape[1:] != B.shape[1:]:
        raise DimMismatchError(f"matrix shapes differ: {A.shape[1:]} vs {B.shape[1:]}")
    if mode == "paired":
        if len(A) != len(B):
            raise DimMismatchError("paired mode needs equal group sizes")
        n = len(A)
        if n < 2:
            raise InvalidInputError("need at least two pairs")
        D = A - B
        mean = D.mean(axis=0)
        se = D.std(axis=0, ddof=1) / np.sqrt(n)
        dof = np.full(mean.shape, n - 1.0)
    elif mode == "welch":
        na, nb = len(A), len(B)
        if na < 2 or nb < 2:
            raise InvalidInputError("need at least two samples per group")
        mean = A.mean(axis=0) - B.mean(axis=0)
        va = A.var(axis=0, ddof=1) / na
        vb = B.var(axis=0, ddof=1) / nb
        se = np.sqrt(va + vb)
        with np.errstate(invalid="ignore", divide="ignore"):
            dof = (va + vb) ** 2 / (va**2 / (na - 1) + vb**2 / (nb - 1))
        dof = np.where(np.isfinite(dof), dof, na + nb - 2.0)
    else:
        raise InvalidInputError(f"unknown mode {mode!r}")

    # round-off can leave a tiny spread on constant differences
    degenerate = se <= 8 * np.finfo(np.float64).eps * np.abs(mean)
    safe = np.where(degenerate, 1.0, se)
    t = np.where(degenerate, np.where(mean == 0, 0.0, np.copysign(np.inf, mean)), mean / safe)
    p = np.where(degenerate, np.where(mean != 0, 0.0, 1.0), student_t_sf2(np.where(degenerate, 0.0, t), dof))
    return SignificanceResult(
        t=t, p=p, mask=significance_mask(p, alpha), dof=dof, degenerate=degenerate, alpha=alpha, mode=mode
    )


def significance_mask(p, alpha=0.05):
    """Boolean mask ``p < alpha``."""
    return np.asarray(p, dtype=np.float64) < alpha


# ---------------------------------------------------------------------------
# export


def write_csv_matrix(path, M):
    """Write a matrix as comma-separated rows with round-trip precision."""
    M = np.asarray(M)
    fmt = "%d" if M.dtype == bool or np.issubdtype(M.dtype, np.integer) else "%.17g"
    np.savetxt(path, M.astype(np.int64) if M.dtype == bool else M, delimiter=",", fmt=fmt)


def to_gray8(M):
    """Max-normalize a nonnegative matrix to ``uint8`` gray levels."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or np.any(M < 0) or not np.all(np.isfinite(M)):
        raise InvalidInputError("expected a finite nonnegative 2-D matrix")
    peak = M.max()
    scaled = M / peak if peak > 0 else M
    return np.round(255 * scaled).astype(np.uint8)


def write_pgm(path, M):
    """Write a binary (P5) 8-bit PGM heatmap, row-major."""
    img = to_gray8(M)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path):
    """Read a P5 PGM written by :func:`write_pgm`."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise InvalidInputError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
