"""Riemannian Adam, the training loop and within-session cross-validation."""

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import rankdata
from sklearn.model_selection import StratifiedKFold, train_test_split

from .embedding import EmbeddingParams, MdopConfig, mdop_epochs
from .errors import (
    DivergenceDetectedError,
    InvalidInputError,
    RetractFailureError,
    StratifyError,
    UndefinedAUCError,
)
from .features import FeatureSpec, WelchConfig, extract_features
from .network import DEFAULT_EPSILON, Preprocess, SpdNet, softmax, softmax_xent

# ---------------------------------------------------------------------------
# Stiefel geometry (row-orthonormal W, shape (p, n), W W^T = I_p)


def _sym(A):
    return 0.5 * (A + A.T)


def stiefel_tangent_project(W, G):
    """Orthogonal projection of ``G`` onto the tangent space at ``W``.

    The result ``xi`` satisfies ``xi W^T + W xi^T = 0``.
    """
    return G - _sym(G @ W.T) @ W


def stiefel_retract(W, xi, tol=1e-12):
    """QR retraction: orthonormal-row factor of ``W + xi`` with positive ``R`` diagonal."""
    Q, R = np.linalg.qr((W + xi).T)
    d = np.diag(R)
    if np.min(np.abs(d)) <= tol * max(np.max(np.abs(d)), 1.0):
        raise RetractFailureError("W + xi is rank deficient")
    return (Q * np.sign(d)).T


def orthonormality_residual(W):
    return float(np.linalg.norm(W @ W.T - np.eye(W.shape[0])))


class RiemannAdam:
    """Adam with Stiefel-constrained parameters.

    Stiefel parameters get their gradient projected to the tangent space,
    elementwise Adam moments, a QR-retracted step, and their first moment
    transported to the new point by re-projection. Other parameters follow
    plain bias-corrected Adam.
    """

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, stiefel=("W",)):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.stiefel = set(stiefel)
        self.step_count = 0
        self.m = {}
        self.v = {}

    def state_dict(self):
        return {
            "step": self.step_count,
            "lr": self.lr,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def step(self, params, grads):
        """Return updated parameters; ``params`` is not modified."""
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceDetectedError(f"non-finite gradient for {k}")
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        out = {}
        for k, p in params.items():
            g = grads[k]
            if k in self.stiefel:
                g = stiefel_tangent_project(p, g)
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            direction = m_hat / (np.sqrt(v_hat) + self.eps)
            if k in self.stiefel:
                new = stiefel_retract(p, -self.lr * direction)
                m = stiefel_tangent_project(new, m)
            else:
                new = p - self.lr * direction
            out[k] = new
            self.m[k] = m
            self.v[k] = v
        return out


# ---------------------------------------------------------------------------
# metrics and splits


def roc_auc(scores, labels):
    """Mann-Whitney ROC AUC: ``(concordant + ties / 2) / (n_pos n_neg)``.

    ``labels`` are binary; the positive class is 1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("ROC AUC needs both classes")
    ranks = rankdata(scores)  # average ranks are multiples of 1/2: exact in float64
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def stratified_kfold(labels, k=5, seed=0):
    """Shuffled stratified folds as a list of ``(train_idx, test_idx)``."""
    labels = np.asarray(labels)
    _, counts = np.unique(labels, return_counts=True)
    if len(counts) < 2 or counts.min() < k:
        raise StratifyError(f"every class needs at least k={k} trials, got counts {counts.tolist()}")
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=_as_seed(seed))
    return [(tr, te) for tr, te in skf.split(np.zeros(len(labels)), labels)]


def _as_seed(seed, *key):
    return int(np.random.SeedSequence([int(seed), *map(int, key)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    max_epochs: int = 300
    batch_size: int = 64
    val_split: float = 0.1
    patience: int = 75
    lr_patience: int = 75
    lr_factor: float = 0.5
    lr: float = 1e-3
    seed: int = 0

    def validate(self):
        if not (0 < self.val_split < 0.5):
            raise InvalidInputError("val_split must lie in (0, 0.5)")
        if self.patience < 1 or self.lr_patience < 1:
            raise InvalidInputError("patience must be >= 1")
        # zero epochs is allowed and simply returns the initial model
        if self.max_epochs > 0 and max(self.patience, self.lr_patience) > self.max_epochs:
            raise InvalidInputError("patience cannot exceed max_epochs")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise InvalidInputError("batch_size must be positive and max_epochs non-negative")
        return self


CURVE_KEYS = ("train_loss", "val_loss", "train_auc", "val_auc")


def _safe_auc(scores, labels):
    try:
        return roc_auc(scores, labels)
    except UndefinedAUCError:
        return None


def _scores(probs):
    return probs[:, 1] if probs.shape[1] == 2 else probs.max(axis=1)


def split_validation(labels, val_split, seed):
    """Stratified ``(train_idx, val_idx)`` positions within ``labels``."""
    idx = np.arange(len(labels))
    tr, va = train_test_split(
        idx, test_size=val_split, stratify=labels, random_state=_as_seed(seed, 7)
    )
    return np.sort(tr), np.sort(va)


def train(model, S, labels, cfg=None, S_val=None, y_val=None, callback=None):
    """Mini-batch RiemannAdam training with early stopping.

    Parameters
    ----------
    model : SpdNet
        Trained in place; the best-validation weights are restored at the end.
    S : ndarray, shape (N, d, d)
        Training features.
    labels : ndarray of int, shape (N,)
    cfg : TrainConfig
    S_val, y_val : optional
        Validation set; carved from ``S`` (stratified) when omitted.
    callback : callable, optional
        ``callback(step, model, cache)`` after every optimizer step; ``cache``
        is the forward cache of the batch before the update.

    Returns
    -------
    dict
        Per-epoch curves, best epoch, optimizer step count and the largest
        orthonormality residual of the BiMap weight seen after any step.
    """
    cfg = (cfg or TrainConfig()).validate()
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise InvalidInputError("training split needs at least two classes")
    if S_val is None:
        tr, va = split_validation(labels, cfg.val_split, cfg.seed)
        S, S_val, labels, y_val = S[tr], S[va], labels[tr], labels[va]
    y_val = np.asarray(y_val, dtype=np.int64)

    history = {k: [] for k in CURVE_KEYS}
    history.update(
        best_epoch=None, best_val_loss=None, steps=0, max_orth_residual=orthonormality_residual(model.W), lr=[]
    )
    if cfg.max_epochs == 0:
        return history

    opt = RiemannAdam(lr=cfg.lr, stiefel=model.STIEFEL)
    rng = np.random.default_rng(_as_seed(cfg.seed, 11))
    best = (np.inf, None, model.params())
    wait = lr_wait = 0
    n = len(labels)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        probs = np.empty((n, model.n_classes))
        for start in range(0, n, cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            logits, cache = model.forward(S[b])
            loss, g = softmax_xent(logits, labels[b])
            if not np.isfinite(loss):
                err = DivergenceDetectedError(f"non-finite loss at epoch {epoch}")
                err.history = history
                raise err
            grads = model.backward(cache, g)
            try:
                new = opt.step(model.params(), {k: grads[k] for k in model.PARAMS})
            except (DivergenceDetectedError, RetractFailureError) as err:
                err.history = history
                raise
            model.set_params(new)
            history["steps"] += 1
            history["max_orth_residual"] = max(
                history["max_orth_residual"], orthonormality_residual(model.W)
            )
            if callback is not None:
                callback(history["steps"], model, cache)
            total += loss * len(b)
            probs[b] = softmax(logits)

        val_logits, _ = model.forward(S_val)
        val_loss, _ = softmax_xent(val_logits, y_val)
        history["train_loss"].append(total / n)
        history["val_loss"].append(val_loss)
        history["train_auc"].append(_safe_auc(_scores(probs), labels))
        history["val_auc"].append(_safe_auc(_scores(softmax(val_logits)), y_val))
        history["lr"].append(opt.lr)

        if val_loss < best[0]:
            best = (val_loss, epoch, model.params())
            wait = lr_wait = 0
        else:
            wait += 1
            lr_wait += 1
            if lr_wait >= cfg.lr_patience:
                opt.lr *= cfg.lr_factor
                lr_wait = 0
            if wait >= cfg.patience:
                break

    model.set_params(best[2])
    history["best_epoch"] = best[1]
    history["best_val_loss"] = best[0]
    return history


# ---------------------------------------------------------------------------
# within-session evaluation


@dataclass
class PipelineConfig:
    """Everything that determines a cross-validated evaluation run."""

    pipeline: str = "spdnet_psi"
    feature: str = "covariance"
    embedding_mode: str = "mdop"
    tau: int = None
    psi: int = None
    mdop: MdopConfig = field(default_factory=MdopConfig)
    mdop_max_epochs: int = None
    preprocess: Preprocess = field(default_factory=Preprocess)
    welch: WelchConfig = field(default_factory=WelchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    epsilon: float = DEFAULT_EPSILON
    k_folds: int = 5
    seed: int = 0

    def validate(self):
        if self.pipeline not in ("spdnet", "spdnet_psi"):
            raise InvalidInputError(f"unknown pipeline {self.pipeline!r}")
        if self.feature not in ("covariance", "instantaneous_coherence", "imaginary_coherence"):
            raise InvalidInputError(f"unknown feature {self.feature!r}")
        if self.embedding_mode not in ("mdop", "fixed"):
            raise InvalidInputError(f"unknown embedding mode {self.embedding_mode!r}")
        if self.pipeline == "spdnet_psi" and self.embedding_mode == "fixed":
            if self.tau is None or self.psi is None or self.tau < 1 or self.psi < 1:
                raise InvalidInputError("fixed embedding needs tau >= 1 and psi >= 1")
        if self.k_folds < 2:
            raise InvalidInputError("k_folds must be >= 2")
        self.train.validate()
        return self

    def to_dict(self):
        d = asdict(self)
        d["preprocess"] = self.preprocess.to_dict()
        d["welch"] = {**asdict(self.welch), "band": list(self.welch.band)}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("version", None)
        kw = {}
        if "mdop" in d:
            kw["mdop"] = MdopConfig(**d.pop("mdop"))
        if "preprocess" in d:
            kw["preprocess"] = Preprocess.from_dict(d.pop("preprocess"))
        if "welch" in d:
            w = dict(d.pop("welch"))
            if "band" in w:
                w["band"] = tuple(w["band"])
            kw["welch"] = WelchConfig(**w)
        if "train" in d:
            kw["train"] = TrainConfig(**d.pop("train"))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown pipeline fields: {sorted(unknown)}")
        return cls(**d, **kw)


def feature_spec(cfg, embedding):
    kind = cfg.feature
    if cfg.pipeline == "spdnet_psi" and kind == "covariance":
        kind = "augmented_covariance"
    return FeatureSpec(kind=kind, embedding=embedding, welch=cfg.welch)


def estimate_embedding(cfg, X_train, seed):
    """Embedding parameters from training epochs only (``None`` for plain SPDNet)."""
    if cfg.pipeline == "spdnet":
        return None, np.arange(0)
    if cfg.embedding_mode == "fixed":
        return EmbeddingParams(cfg.tau, cfg.psi), np.arange(0)
    used = np.arange(len(X_train))
    if cfg.mdop_max_epochs is not None and len(used) > cfg.mdop_max_epochs:
        rng = np.random.default_rng(_as_seed(seed, 3))
        used = np.sort(rng.choice(used, cfg.mdop_max_epochs, replace=False))
    return mdop_epochs(X_train[used], cfg.mdop), used


def run_fold(cfg, Xp, labels, fs_hz, train_idx, test_idx, seed):
    """Fit and score one fold on pre-processed epochs ``Xp``.

    Only ``train_idx`` trials reach MDOP and training; ``test_idx`` trials are
    used for features and scoring alone.
    """
    train_idx = np.asarray(train_idx)
    test_idx = np.asarray(test_idx)
    assert np.intersect1d(train_idx, test_idx).size == 0, "train/test overlap"
    timing = {}

    t0 = time.perf_counter()
    emb, used = estimate_embedding(cfg, Xp[train_idx], seed)
    mdop_idx = train_idx[used]
    assert np.intersect1d(mdop_idx, test_idx).size == 0, "MDOP saw test trials"
    timing["mdop"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    spec = feature_spec(cfg, emb)
    if emb is not None:
        emb.check_estimable(Xp.shape[1], Xp.shape[2])
    S_train = extract_features(Xp[train_idx], spec, fs_hz)
    S_test = extract_features(Xp[test_idx], spec, fs_hz)
    timing["features"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model = SpdNet.create(
        Xp.shape[1],
        n_classes=int(labels.max()) + 1,
        features=spec,
        reduce=cfg.pipeline == "spdnet_psi",
        epsilon=cfg.epsilon,
        seed=_as_seed(seed, 5),
        preprocess=cfg.preprocess,
        fs_hz=fs_hz,
    )
    tcfg = replace(cfg.train, seed=_as_seed(seed, 6))
    history = train(model, S_train, labels[train_idx], tcfg)
    timing["training"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    probs = model.predict_proba(S_test)
    timing["inference"] = time.perf_counter() - t0
    n_epochs = max(len(history["train_loss"]), 1)
    timing["training_per_epoch"] = timing["training"] / n_epochs
    timing["inference_per_trial"] = timing["inference"] / max(len(test_idx), 1)

    return {
        "tau": emb.tau if emb is not None else None,
        "psi": emb.psi if emb is not None else None,
        "d_in": model.d_in,
        "d_out": model.d_out,
        "n_params": model.param_count(),
        "test_auc": _safe_auc(_scores(probs), labels[test_idx]),
        "n_train": int(len(train_idx)),
        "n_test": int(len(test_idx)),
        "train_indices": train_idx.tolist(),
        "test_indices": test_idx.tolist(),
        "mdop_indices": mdop_idx.tolist(),
        "best_epoch": history["best_epoch"],
        "n_epochs": len(history["train_loss"]),
        "steps": history["steps"],
        "max_orth_residual": history["max_orth_residual"],
        "curves": {k: history[k] for k in CURVE_KEYS},
        "timing": timing,
    }, model


def _fold_job(args):
    cfg, Xp, labels, fs, tr, te, seed, session, fold = args
    rep, _ = run_fold(cfg, Xp, labels, fs, tr, te, seed)
    return {"session": session, "fold": fold, **rep}


def _mean_std(values):
    v = [x for x in values if x is not None]
    if not v:
        return None, None
    return float(np.mean(v)), float(np.std(v))


def evaluate_within_session(dataset, cfg=None, jobs=1):
    """Stratified k-fold cross-validation inside every session.

    Returns a JSON-serializable report. Wall-clock numbers live exclusively
    under ``"timing"`` keys so that :func:`strip_timing` yields a
    reproducible document.
    """
    cfg = (cfg or PipelineConfig()).validate()
    t_start = time.perf_counter()
    t0 = time.perf_counter()
    Xp = cfg.preprocess.apply(dataset.X, dataset.fs_hz)
    t_pre = time.perf_counter() - t0

    jobs_args = []
    for session in np.unique(dataset.sessions):
        sidx = np.flatnonzero(dataset.sessions == session)
        folds = stratified_kfold(dataset.labels[sidx], cfg.k_folds, _as_seed(cfg.seed, session))
        for f, (tr, te) in enumerate(folds):
            seed = _as_seed(cfg.seed, session, f)
            jobs_args.append(
                (cfg, Xp, dataset.labels, dataset.fs_hz, sidx[tr], sidx[te], seed, int(session), f)
            )
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            folds = list(ex.map(_fold_job, jobs_args))
    else:
        folds = [_fold_job(a) for a in jobs_args]

    sessions = []
    for session in sorted({f["session"] for f in folds}):
        aucs = [f["test_auc"] for f in folds if f["session"] == session]
        m, s = _mean_std(aucs)
        sessions.append({"session": session, "fold_auc": aucs, "mean_auc": m, "std_auc": s})
    m, s = _mean_std([f["test_auc"] for f in folds])
    total = time.perf_counter() - t_start
    phases = {
        "preprocess": t_pre,
        **{p: float(sum(f["timing"][p] for f in folds)) for p in ("mdop", "features", "training", "inference")},
    }
    return {
        "version": 1,
        "config": cfg.to_dict(),
        "dataset": {
            "n_trials": dataset.n_trials,
            "n_channels": dataset.n_channels,
            "n_times": dataset.n_times,
            "fs_hz": dataset.fs_hz,
            "seed": dataset.seed,
        },
        "folds": folds,
        "sessions": sessions,
        "summary": {"mean_auc": m, "std_auc": s, "n_folds": len(folds)},
        "timing": {**phases, "total": total},
    }


def strip_timing(obj):
    """Copy of a report with every ``"timing"`` entry removed."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k != "timing"}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def bench(dataset, cfg=None, jobs=1):
    """Wall-clock seconds per phase of a full evaluation run."""
    report = evaluate_within_session(dataset, cfg, jobs)
    t = dict(report["timing"])
    folds = report["folds"]
    t["training_per_epoch"] = float(np.mean([f["timing"]["training_per_epoch"] for f in folds]))
    t["inference_per_trial"] = float(np.mean([f["timing"]["inference_per_trial"] for f in folds]))
    t["phase_sum"] = float(sum(t[p] for p in ("preprocess", "mdop", "features", "training", "inference")))
    return t, report


def curves_csv(fold):
    """Per-epoch curves of one fold report as CSV text."""
    c = fold["curves"]
    lines = ["epoch,train_loss,val_loss,train_auc,val_auc"]
    fmt = lambda v: "" if v is None else repr(float(v))
    for e in range(len(c["train_loss"])):
        lines.append(",".join([str(e)] + [fmt(c[k][e]) for k in CURVE_KEYS]))
    return "\n".join(lines) + "\n"
