"""SPD network layers (BiMap, ReEig, LogEig, Linear) with exact backward passes.

All layer functions work on stacks of matrices ``(B, n, n)``. Gradients
through the eigendecomposition-based layers use the divided-difference
(Loewner) form, which stays finite when eigenvalues coincide, as they do
after ReEig clamps a cluster of them to ``epsilon``.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingParams, delay_embed
from .errors import CacheMismatchError, DimMismatchError, InvalidInputError
from .features import FeatureSpec, WelchConfig, extract_features
from .signals import bandpass, standardize
from .spd import (
    loewner_matrix,
    reconstruct,
    spectral_backward,
    sym_vectorize,
    sym_vectorize_adjoint,
)

DEFAULT_EPSILON = 1e-4


# ---------------------------------------------------------------------------
# layer primitives


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def bimap_forward(W, Z):
    """``W Z W^T`` for ``W`` of shape ``(d_out, d_in)``."""
    W = np.asarray(W, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[-1] != W.shape[1]:
        raise DimMismatchError(f"BiMap expects {W.shape[1]}x{W.shape[1]} input, got {Z.shape[-2:]}")
    return _sym(W @ Z @ W.T)


def bimap_backward(W, Z, grad_out):
    """Gradients of ``W Z W^T`` w.r.t. ``W`` (summed over the batch) and ``Z``."""
    G = _sym(grad_out)
    dW = 2.0 * np.sum(G @ W @ Z, axis=0) if G.ndim == 3 else 2.0 * G @ W @ Z
    dZ = _sym(W.T @ G @ W)
    return dW, dZ


def reeig_forward(Z, epsilon=DEFAULT_EPSILON):
    """Eigenvalue rectification ``U max(eps I, Sigma) U^T``.

    Returns
    -------
    out : ndarray
    eig : tuple
        ``(values, vectors)`` of the input, ascending.
    """
    w, U = np.linalg.eigh(_sym(np.asarray(Z, dtype=np.float64)))
    out = _sym(reconstruct(np.maximum(w, epsilon), U))
    return out, (w, U)


def _clamp(epsilon):
    return (lambda s: np.maximum(s, epsilon), lambda s: (s > epsilon).astype(np.float64))


def reeig_backward(eig, grad_out, epsilon=DEFAULT_EPSILON):
    w, U = eig
    f, df = _clamp(epsilon)
    return spectral_backward(U, loewner_matrix(w, f, df), grad_out)


def logeig_forward(Z, eig=None):
    """Matrix logarithm followed by isometric half-vectorization."""
    if eig is None:
        eig = np.linalg.eigh(_sym(np.asarray(Z, dtype=np.float64)))
    w, U = eig
    return sym_vectorize(_sym(reconstruct(np.log(w), U)))


def logeig_backward(eig, grad_vec):
    w, U = eig
    n = U.shape[-1]
    G = sym_vectorize_adjoint(grad_vec, n)
    return spectral_backward(U, loewner_matrix(w, np.log, lambda s: 1.0 / s), G)


def dense_forward(W, b, v):
    return v @ W.T + b


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    Parameters
    ----------
    logits : ndarray, shape (B, K)
    labels : ndarray of int, shape (B,)

    Returns
    -------
    loss : float
    grad : ndarray, shape (B, K)
        ``(softmax - onehot) / B``.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    losses = logsum - z[np.arange(B), labels]
    p = softmax(logits)
    p[np.arange(B), labels] -= 1.0
    return float(losses.mean()), p / B


# ---------------------------------------------------------------------------
# model


@dataclass
class Preprocess:
    """Per-epoch pre-processing: optional band-pass then standardization."""

    band: tuple = (8.0, 32.0)
    standardize: bool = True

    def apply(self, X, fs_hz):
        X = np.asarray(X, dtype=np.float64)
        if self.band is not None:
            X = bandpass(X, self.band[0], self.band[1], fs_hz)
        if self.standardize:
            X = standardize(X)
        return X

    def to_dict(self):
        return {"band": list(self.band) if self.band is not None else None, "standardize": self.standardize}

    @classmethod
    def from_dict(cls, d):
        band = d.get("band", (8.0, 32.0))
        return cls(band=tuple(band) if band is not None else None, standardize=d.get("standardize", True))


def stiefel_init(d_out, d_in, rng):
    """First ``d_out`` rows of a Haar-distributed orthogonal matrix."""
    Q, R = np.linalg.qr(rng.standard_normal((d_in, d_in)))
    Q = Q * np.sign(np.diag(R))
    return Q[:d_out].copy()


@dataclass
class SpdNet:
    """BiMap -> ReEig -> LogEig -> Linear classifier on SPD features.

    Attributes
    ----------
    W : ndarray, shape (d_out, d_in)
        BiMap weight with orthonormal rows.
    dense_W : ndarray, shape (n_classes, d_out (d_out + 1) / 2)
    dense_b : ndarray, shape (n_classes,)
    """

    W: np.ndarray
    dense_W: np.ndarray
    dense_b: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    features: FeatureSpec = field(default_factory=FeatureSpec)
    preprocess: Preprocess = field(default_factory=Preprocess)
    n_channels: int = None
    fs_hz: float = None
    seed: int = None
    version: int = 0

    STIEFEL = ("W",)
    PARAMS = ("W", "dense_W", "dense_b")

    @classmethod
    def create(
        cls,
        n_channels,
        n_classes=2,
        features=None,
        reduce=None,
        epsilon=DEFAULT_EPSILON,
        seed=0,
        preprocess=None,
        fs_hz=None,
    ):
        """Initialize a network for ``n_channels``-channel epochs.

        ``reduce`` defaults to True when the features are delay-augmented
        (BiMap output ``floor(d_in / 2)``) and False otherwise (``d_out = d_in``).
        """
        features = features or FeatureSpec()
        d_in = features.dim(n_channels)
        if reduce is None:
            reduce = features.embedding is not None
        d_out = max(d_in // 2, 1) if reduce else d_in
        rng = np.random.default_rng(seed)
        W = stiefel_init(d_out, d_in, rng)
        n_feat = d_out * (d_out + 1) // 2
        dense_W = rng.standard_normal((n_classes, n_feat)) / np.sqrt(n_feat)
        return cls(
            W=W,
            dense_W=dense_W,
            dense_b=np.zeros(n_classes),
            epsilon=epsilon,
            features=features,
            preprocess=preprocess or Preprocess(),
            n_channels=n_channels,
            fs_hz=fs_hz,
            seed=seed,
        )

    @property
    def d_in(self):
        return self.W.shape[1]

    @property
    def d_out(self):
        return self.W.shape[0]

    @property
    def n_classes(self):
        return self.dense_W.shape[0]

    def params(self):
        return {k: getattr(self, k) for k in self.PARAMS}

    def set_params(self, params):
        for k, v in params.items():
            setattr(self, k, np.array(v, dtype=np.float64))
        self.version += 1

    def copy(self):
        out = SpdNet(**{**self.__dict__})
        for k in self.PARAMS:
            setattr(out, k, getattr(self, k).copy())
        return out

    # -- forward / backward on SPD features ------------------------------

    def forward(self, S):
        """Logits for a stack of SPD features ``(B, d_in, d_in)``.

        Returns ``(logits, cache)``; the cache carries every intermediate and
        eigenpair needed by :meth:`backward`.
        """
        S = np.asarray(S, dtype=np.float64)
        if S.ndim == 2:
            S = S[None]
        if S.shape[-1] != self.d_in:
            raise DimMismatchError(f"model expects {self.d_in}x{self.d_in} features, got {S.shape[-2:]}")
        Z1 = bimap_forward(self.W, S)
        Z2, eig1 = reeig_forward(Z1, self.epsilon)
        w1, U1 = eig1
        eig2 = (np.maximum(w1, self.epsilon), U1)  # ReEig output shares eigenvectors
        v = logeig_forward(Z2, eig2)
        logits = dense_forward(self.dense_W, self.dense_b, v)
        cache = {
            "version": self.version,
            "S": S,
            "bimap": Z1,
            "reeig": Z2,
            "eig_bimap": eig1,
            "eig_reeig": eig2,
            "logeig": v,
            "logits": logits,
        }
        return logits, cache

    def backward(self, cache, grad_logits, wrt_input=False):
        """Parameter gradients given ``dL/dlogits``.

        Returns a dict with keys ``W``, ``dense_W``, ``dense_b`` plus the
        intermediate gradients ``reeig`` (w.r.t. the ReEig output) and, with
        ``wrt_input``, ``S``.
        """
        if cache.get("version") != self.version:
            raise CacheMismatchError("cache was produced by different weights")
        g = np.asarray(grad_logits, dtype=np.float64)
        v = cache["logeig"]
        grads = {"dense_W": g.T @ v, "dense_b": g.sum(axis=0)}
        dv = g @ self.dense_W
        dZ2 = logeig_backward(cache["eig_reeig"], dv)
        grads["reeig"] = dZ2
        dZ1 = reeig_backward(cache["eig_bimap"], dZ2, self.epsilon)
        dW, dS = bimap_backward(self.W, cache["S"], dZ1)
        grads["W"] = dW
        if wrt_input:
            grads["S"] = dS
        return grads

    def loss_and_grads(self, S, labels):
        logits, cache = self.forward(S)
        loss, g = softmax_xent(logits, labels)
        return loss, self.backward(cache, g), logits

    # -- raw epochs --------------------------------------------------------

    def features_of(self, X):
        """Pre-process and extract SPD features for epochs ``(N, C, T)``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if self.n_channels is not None and X.shape[1] != self.n_channels:
            raise DimMismatchError(f"model expects {self.n_channels} channels, got {X.shape[1]}")
        if self.preprocess.band is not None and self.fs_hz is None:
            raise InvalidInputError("band-pass needs fs_hz on the model")
        Xp = self.preprocess.apply(X, self.fs_hz)
        return extract_features(Xp, self.features, self.fs_hz)

    def predict_proba(self, S):
        logits, _ = self.forward(S)
        return softmax(logits)

    # -- reporting ---------------------------------------------------------

    def param_count(self):
        return int(sum(getattr(self, k).size for k in self.PARAMS))

    def shape_report(self, n_times):
        """Rows ``(stage, layer, output shape, parameter count)``, one per stage."""
        C = self.n_channels
        rows = [("Input", "", [1, C, n_times], 0)]
        emb = self.features.embedding
        if emb is not None:
            rows.append(("Augmentation", "AugmentedDataset", [1, C * emb.psi, n_times - emb.psi * emb.tau], 0))
        name = "Covariances" if "covariance" in self.features.kind else "Coherences"
        rows.append(("Covariance", name, [1, self.d_in, self.d_in], 0))
        rows.append(("SPDNet", "BiMap", [1, self.d_out, self.d_out], int(self.W.size)))
        rows.append(("", "ReEig", [1, self.d_out, self.d_out], 0))
        rows.append(("", "LogEig", [1, self.d_out * (self.d_out + 1) // 2], 0))
        rows.append(
            ("Classification", "Linear", [1, self.n_classes], int(self.dense_W.size + self.dense_b.size))
        )
        rows.append(("Total", "", None, self.param_count()))
        return rows

    def format_report(self, n_times):
        lines = [f"{'Stage':<15}{'Layer':<18}{'Output':<16}{'Parameters':>10}"]
        for stage, layer, shape, n in self.shape_report(n_times):
            lines.append(f"{stage:<15}{layer:<18}{str(shape or ''):<16}{n:>10}")
        lines.append("note: Linear counts weights and bias (d(d+1)/2 * K + K).")
        return "\n".join(lines)

    # -- checkpoints -------------------------------------------------------

    def manifest(self):
        emb = self.features.embedding
        return {
            "version": 1,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "n_classes": self.n_classes,
            "n_channels": self.n_channels,
            "fs_hz": self.fs_hz,
            "epsilon": self.epsilon,
            "feature_kind": self.features.kind,
            "tau": emb.tau if emb is not None else None,
            "psi": emb.psi if emb is not None else None,
            "welch": {
                "nperseg": self.features.welch.nperseg,
                "overlap": self.features.welch.overlap,
                "band": list(self.features.welch.band),
            },
            "preprocess": self.preprocess.to_dict(),
            "seed": self.seed,
            "layers": ["W", "dense_W", "dense_b"],
        }


def model_forward(model, X):
    """Pre-processing, feature extraction and network forward for raw epochs.

    Returns ``(logits, cache)``; the cache additionally holds the
    pre-processed epochs under ``"epochs"`` and, for delay-augmented models,
    the embedded epochs under ``"embedded"``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    Xp = model.preprocess.apply(X, model.fs_hz)
    S = extract_features(Xp, model.features, model.fs_hz)
    logits, cache = model.forward(S)
    cache["epochs"] = Xp
    emb = model.features.embedding
    if emb is not None:
        cache["embedded"] = delay_embed(Xp, emb.tau, emb.psi)
    return logits, cache


def model_backward(model, cache, grad_logits):
    """Parameter gradients ``{"W", "dense_W", "dense_b"}`` for a cached forward pass."""
    grads = model.backward(cache, grad_logits)
    return {k: grads[k] for k in model.PARAMS}


def save_checkpoint(model, path):
    """Write ``manifest.json`` and ``weights.bin`` (little-endian float64, layer order)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(model.manifest(), indent=1), encoding="utf-8")
    blob = np.concatenate([getattr(model, k).ravel() for k in model.PARAMS])
    (path / "weights.bin").write_bytes(blob.astype("<f8").tobytes())


def load_checkpoint(path):
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    emb = EmbeddingParams(m["tau"], m["psi"]) if m.get("psi") is not None else None
    w = m.get("welch") or {}
    welch = WelchConfig(w.get("nperseg", 256), w.get("overlap", 0.5), tuple(w.get("band", (8.0, 32.0))))
    features = FeatureSpec(kind=m["feature_kind"], embedding=emb, welch=welch)
    d_in, d_out, K = m["d_in"], m["d_out"], m["n_classes"]
    n_feat = d_out * (d_out + 1) // 2
    sizes = [d_out * d_in, K * n_feat, K]
    raw = np.frombuffer((path / "weights.bin").read_bytes(), dtype="<f8").astype(np.float64)
    if raw.size != sum(sizes):
        raise DimMismatchError(f"weights.bin holds {raw.size} values, manifest implies {sum(sizes)}")
    a, b = sizes[0], sizes[0] + sizes[1]
    return SpdNet(
        W=raw[:a].reshape(d_out, d_in),
        dense_W=raw[a:b].reshape(K, n_feat),
        dense_b=raw[b:].copy(),
        epsilon=m["epsilon"],
        features=features,
        preprocess=Preprocess.from_dict(m.get("preprocess", {})),
        n_channels=m.get("n_channels"),
        fs_hz=m.get("fs_hz"),
        seed=m.get("seed"),
    )
