"""SPD feature estimators: sample covariance, augmented covariance, coherence."""

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import csd

from .embedding import EmbeddingParams, delay_embed
from .errors import InsufficientDataError, InvalidInputError
from .spd import ensure_spd, symmetrize

FEATURE_KINDS = (
    "covariance",
    "augmented_covariance",
    "instantaneous_coherence",
    "imaginary_coherence",
)


@dataclass(frozen=True)
class WelchConfig:
    nperseg: int = 256
    overlap: float = 0.5
    band: tuple = (8.0, 32.0)

    def __post_init__(self):
        if not (0 <= self.overlap < 1):
            raise InvalidInputError("overlap must lie in [0, 1)")
        if self.nperseg < 64:
            raise InvalidInputError("Welch segments need at least 64 samples")


@dataclass(frozen=True)
class FeatureSpec:
    """Which SPD feature to extract per trial.

    ``embedding`` enables delay augmentation before the estimator; it is
    required for ``augmented_covariance`` and optional for the coherences.
    """

    kind: str = "covariance"
    embedding: EmbeddingParams = None
    welch: WelchConfig = field(default_factory=WelchConfig)

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise InvalidInputError(f"unknown feature kind {self.kind!r}")
        if self.kind == "augmented_covariance" and self.embedding is None:
            raise InvalidInputError("augmented_covariance needs embedding parameters")

    def dim(self, n_channels):
        return n_channels * (self.embedding.psi if self.embedding is not None else 1)


def sample_cov(X):
    """Sample covariance ``X X^T / (T - 1)`` of a standardized epoch, repaired to SPD.

    No mean is subtracted: epochs are expected to be zero-mean already.

    Parameters
    ----------
    X : ndarray, shape (C, T)
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidInputError(f"expected a (C, T) epoch, got shape {X.shape}")
    T = X.shape[1]
    if T < 2:
        raise InsufficientDataError("need at least two samples")
    return ensure_spd(symmetrize(X @ X.T / (T - 1)))


def augmented_cov(X, params):
    """Covariance of the delay-embedded epoch, shape ``(C psi, C psi)``."""
    return sample_cov(delay_embed(X, params.tau, params.psi))


def coherence(X, fs_hz, kind="instantaneous", welch=None):
    """Band-averaged coherency magnitude matrix.

    The complex coherency ``S_ij / sqrt(S_ii S_jj)`` from Welch cross-spectra
    (Hann window) is averaged over the frequencies inside ``welch.band``;
    ``kind="instantaneous"`` keeps ``|Re|`` and ``kind="imaginary"`` keeps
    ``|Im|``. The diagonal is set to one before the SPD repair.

    Parameters
    ----------
    X : ndarray, shape (C, T)
    kind : {"instantaneous", "imaginary"}
    """
    welch = welch or WelchConfig()
    X = np.asarray(X, dtype=np.float64)
    C, T = X.shape
    nperseg = welch.nperseg
    noverlap = int(round(welch.overlap * nperseg))
    if T < nperseg or 1 + (T - nperseg) // (nperseg - noverlap) < 4:
        raise InsufficientDataError(f"T={T} gives fewer than 4 Welch segments of {nperseg}")
    f, S = csd(
        X[:, None, :],
        X[None, :, :],
        fs=fs_hz,
        window="hann",
        nperseg=nperseg,
        noverlap=noverlap,
        axis=-1,
    )
    lo, hi = welch.band
    sel = (f >= lo) & (f <= hi)
    if not np.any(sel):
        raise InsufficientDataError(f"no frequency bins inside band {welch.band}")
    S = S[..., sel]
    power = np.real(np.einsum("iif->if", S))
    gamma = S / np.sqrt(power[:, None, :] * power[None, :, :])
    gbar = gamma.mean(axis=-1)
    if kind == "instantaneous":
        M = np.abs(gbar.real)
    elif kind == "imaginary":
        M = np.abs(gbar.imag)
    else:
        raise InvalidInputError(f"unknown coherence kind {kind!r}")
    M = np.clip(0.5 * (M + M.T), 0.0, 1.0)
    np.fill_diagonal(M, 1.0)
    return M


def shrink(S, gamma):
    """Shrink towards the scaled identity: ``(1 - g) S + g tr(S)/n I``."""
    if not (0 <= gamma <= 1):
        raise InvalidInputError("gamma must lie in [0, 1]")
    S = symmetrize(S)
    n = S.shape[-1]
    mu = np.trace(S, axis1=-2, axis2=-1)[..., None, None] / n
    return (1 - gamma) * S + gamma * mu * np.eye(n)


def extract_one(X, spec, fs_hz):
    if spec.embedding is not None:
        X = delay_embed(X, spec.embedding.tau, spec.embedding.psi)
    if spec.kind in ("covariance", "augmented_covariance"):
        return sample_cov(X)
    kind = spec.kind.split("_")[0]
    return ensure_spd(coherence(X, fs_hz, kind, spec.welch))


def extract_features(X, spec, fs_hz=None):
    """Feature matrices for a stack of epochs ``(N, C, T)`` -> ``(N, d, d)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    return np.stack([extract_one(x, spec, fs_hz) for x in X])
