"""Delay embedding and MDOP selection of embedding parameters.

MDOP (maximizing derivatives on projection) grows a non-uniform delay
embedding one lag at a time: each cycle picks the lag whose new coordinate
spreads the nearest neighbours of the current reconstruction the most (the
beta statistic) and stops once false nearest neighbours vanish.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DegenerateGeometryError, EpochTooShortError, InvalidInputError

_COINCIDENT = 1e-12


@dataclass(frozen=True)
class EmbeddingParams:
    tau: int
    psi: int

    def __post_init__(self):
        if int(self.tau) < 1 or int(self.psi) < 1:
            raise InvalidInputError(f"tau and psi must be >= 1, got {self.tau}, {self.psi}")
        object.__setattr__(self, "tau", int(self.tau))
        object.__setattr__(self, "psi", int(self.psi))

    def check_estimable(self, n_channels, n_times):
        """Raise unless the embedded epoch has at least ``C psi`` samples."""
        if n_times - self.psi * self.tau < self.psi * n_channels:
            raise EpochTooShortError(
                f"T - psi*tau = {n_times - self.psi * self.tau} < C*psi = {n_channels * self.psi}"
            )


def delay_embed(X, tau, psi):
    """Stack ``psi`` forward-shifted copies of every channel.

    Row ``c * psi + p`` of the output is ``X[c, p*tau : p*tau + T - psi*tau]``.

    Parameters
    ----------
    X : ndarray, shape (..., C, T)
    tau, psi : int

    Returns
    -------
    ndarray, shape (..., C * psi, T - psi * tau)
    """
    X = np.asarray(X, dtype=np.float64)
    tau, psi = int(tau), int(psi)
    if tau < 1 or psi < 1:
        raise InvalidInputError("tau and psi must be >= 1")
    T = X.shape[-1]
    n = T - psi * tau
    if n < 2:
        raise EpochTooShortError(f"T - psi*tau = {n} < 2")
    parts = [X[..., p * tau : p * tau + n] for p in range(psi)]
    out = np.stack(parts, axis=-2)  # (..., C, psi, n)
    return out.reshape(X.shape[:-2] + (X.shape[-2] * psi, n))


# ---------------------------------------------------------------------------
# neighbour geometry


def nearest_neighbors(points, theiler=0, chunk=512):
    """Exact nearest neighbour of every point, excluding ``|i - j| <= theiler``.

    Parameters
    ----------
    points : ndarray, shape (n, d)

    Returns
    -------
    idx : ndarray of int, shape (n,)
    dist : ndarray, shape (n,)
    """
    P = np.asarray(points, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    n = P.shape[0]
    if n <= 2 * theiler + 1:
        raise InvalidInputError(f"{n} points leave no neighbours outside the Theiler window")
    sq = np.einsum("ij,ij->i", P, P)
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    cols = np.arange(n)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        d2 = sq[rows, None] + sq[None, :] - 2.0 * (P[rows] @ P.T)
        d2[np.abs(rows[:, None] - cols[None, :]) <= theiler] = np.inf
        j = np.argmin(d2, axis=1)
        idx[rows] = j
        # recompute exactly to avoid cancellation in the expanded form
        dist[rows] = np.sqrt(np.sum((P[rows] - P[j]) ** 2, axis=1))
    return idx, dist


def beta_statistic(points, candidates, theiler=0, neighbors=None):
    """Mean log10 directional derivative for candidate new coordinates.

    For each point ``q`` with nearest neighbour ``q'`` in the current
    reconstruction, the ratio ``|c(q) - c(q')| / ||q - q'||`` measures how much
    candidate coordinate ``c`` stretches the neighbourhood. Pairs closer than
    ``1e-12`` (or with identical candidate values) are skipped.

    Parameters
    ----------
    points : ndarray, shape (n, d)
    candidates : ndarray, shape (n,) or (k, n)
        Values of one or ``k`` candidate coordinates at every point.
    neighbors : tuple, optional
        Precomputed ``nearest_neighbors(points, theiler)``.

    Returns
    -------
    float or ndarray, shape (k,)
    """
    cand = np.asarray(candidates, dtype=np.float64)
    single = cand.ndim == 1
    cand = np.atleast_2d(cand)
    nn, dist = neighbors if neighbors is not None else nearest_neighbors(points, theiler)
    if not cand.shape[1] == len(nn):
        raise InvalidInputError("candidate length differs from number of points")
    gap = np.abs(cand - cand[:, nn])
    ok = (dist >= _COINCIDENT)[None, :] & (gap > 0)
    if not np.any(ok):
        raise DegenerateGeometryError("all neighbour pairs are coincident")
    ratio = np.where(ok, gap, 1.0) / np.where(dist >= _COINCIDENT, dist, 1.0)[None, :]
    logs = np.where(ok, np.log10(ratio), 0.0)
    counts = ok.sum(axis=1)
    beta = np.where(counts > 0, logs.sum(axis=1) / np.maximum(counts, 1), -np.inf)
    return float(beta[0]) if single else beta


def fnn_fraction(points, candidate, rtol=10.0, atol=2.0, theiler=0, sigma=None, neighbors=None):
    """Fraction of false nearest neighbours when ``candidate`` is appended.

    A neighbour pair is false if the added-coordinate gap exceeds ``rtol``
    times the current distance, or if the extended distance exceeds ``atol``
    times the data scale ``sigma`` (default: standard deviation of the
    candidate coordinate).
    """
    cand = np.asarray(candidate, dtype=np.float64)
    nn, dist = neighbors if neighbors is not None else nearest_neighbors(points, theiler)
    ok = dist >= _COINCIDENT
    if not np.any(ok):
        raise DegenerateGeometryError("all neighbour pairs are coincident")
    if sigma is None:
        sigma = cand.std()
    gap = np.abs(cand - cand[nn])[ok]
    d = dist[ok]
    new_dist = np.sqrt(d * d + gap * gap)
    false = (gap / d > rtol) | (new_dist / sigma > atol) if sigma > 0 else gap / d > rtol
    return float(np.mean(false))


# ---------------------------------------------------------------------------
# MDOP


@dataclass(frozen=True)
class MdopConfig:
    """MDOP settings. ``tau_max`` and ``theiler`` default to ``min(T // 10, 100)``."""

    tau_max: int = None
    psi_max: int = 10
    fnn_threshold: float = 0.01
    rtol: float = 10.0
    atol: float = 2.0
    theiler: int = None
    channel_mode: str = "best"
    min_points: int = 50

    def resolve(self, n_times):
        tau_max = self.tau_max if self.tau_max is not None else min(n_times // 10, 100)
        tau_max = max(int(tau_max), 1)
        theiler = self.theiler if self.theiler is not None else tau_max
        if self.channel_mode not in ("best", "average"):
            raise InvalidInputError(f"unknown channel_mode {self.channel_mode!r}")
        if self.psi_max < 1:
            raise InvalidInputError("psi_max must be >= 1")
        return tau_max, int(theiler)

    def to_dict(self):
        return dict(self.__dict__)


class _ChannelMdop:
    """Incremental MDOP state on one standardized observable."""

    def __init__(self, x, cfg):
        x = np.asarray(x, dtype=np.float64)
        self.tau_max, self.theiler = cfg.resolve(len(x))
        self.n = len(x) - self.tau_max
        if self.n < cfg.min_points:
            raise InvalidInputError(f"only {self.n} reconstructed points (< {cfg.min_points})")
        self.x = x
        self.cfg = cfg
        self.sigma = x.std()
        self.lags = []
        self.coords = [x[: self.n]]
        t = np.arange(self.n)
        self.all_lags = np.arange(1, self.tau_max + 1)
        self._shifted = x[t[None, :] + self.all_lags[:, None]]  # (tau_max, n)

    def step(self):
        """Score candidates; return (best_lag, best_beta, neighbours)."""
        P = np.stack(self.coords, axis=1)
        nbrs = nearest_neighbors(P, self.theiler)
        free = np.setdiff1d(self.all_lags, self.lags)
        beta = beta_statistic(P, self._shifted[free - 1], neighbors=nbrs)
        k = int(np.argmax(beta))
        return int(free[k]), float(beta[k]), nbrs

    def run(self, first=None):
        cfg = self.cfg
        while len(self.lags) < min(cfg.psi_max, self.tau_max):
            if first is not None:
                lag, _, nbrs = first
                first = None
            else:
                lag, _, nbrs = self.step()
            if self.lags:
                fnn = fnn_fraction(
                    None, self._shifted[lag - 1], cfg.rtol, cfg.atol, sigma=self.sigma, neighbors=nbrs
                )
                if fnn < cfg.fnn_threshold:
                    break
            self.lags.append(lag)
            self.coords.append(self._shifted[lag - 1])
        return tuple(sorted(self.lags))


def mdop_channel_lags(X, config=None):
    """Per-channel MDOP lag vectors for one epoch ``(C, T)``."""
    cfg = config or MdopConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return [_ChannelMdop(x, cfg).run() for x in X]


def mdop_lags(X, config=None):
    """MDOP lag vector of one epoch.

    The first lag is always accepted; further lags are added while the false
    nearest neighbour fraction of the current reconstruction is at least
    ``fnn_threshold``, up to ``psi_max`` lags. For multichannel epochs the
    channel whose first beta maximum is largest is embedded.

    Parameters
    ----------
    X : ndarray, shape (T,) or (C, T)

    Returns
    -------
    tuple of int
        Strictly increasing lags in ``[1, tau_max]``.
    """
    cfg = config or MdopConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    states = [_ChannelMdop(x, cfg) for x in X]
    firsts = [s.step() for s in states]
    best = int(np.argmax([f[1] for f in firsts]))
    return states[best].run(first=firsts[best])


def _epoch_contribution(X, cfg):
    if cfg.channel_mode == "best":
        lags = mdop_lags(X, cfg)
        return int(np.floor(np.mean(lags))), len(lags)
    per_channel = mdop_channel_lags(X, cfg)
    # exact rationals keep the epoch sums order-independent
    taus = [int(np.floor(np.mean(l))) for l in per_channel]
    return Fraction(sum(taus), len(taus)), Fraction(sum(map(len, per_channel)), len(per_channel))


def mdop_epochs(epochs, config=None, jobs=1):
    """Dataset-level embedding parameters by averaging per-epoch MDOP results.

    Sums ``floor(mean(lags_i))`` and ``len(lags_i)`` over epochs, divides by
    the epoch count and floors; both results are clamped to ``>= 1``.

    Parameters
    ----------
    epochs : Dataset or ndarray, shape (N, C, T)
    jobs : int
        Worker processes for the per-epoch runs.

    Returns
    -------
    EmbeddingParams
    """
    X = getattr(epochs, "X", epochs)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.shape[0] == 0:
        raise InvalidInputError("no epochs to embed")
    cfg = config or MdopConfig()
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_epoch_contribution, X, [cfg] * len(X)))
    else:
        parts = [_epoch_contribution(x, cfg) for x in X]
    tau = sum(p[0] for p in parts)
    psi = sum(p[1] for p in parts)
    n = len(parts)
    return EmbeddingParams(tau=max(int(np.floor(tau / n)), 1), psi=max(int(np.floor(psi / n)), 1))
