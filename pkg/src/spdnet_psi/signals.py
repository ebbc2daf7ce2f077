"""Epoch/dataset model, pre-processing, synthetic generators and dataset I/O.

An epoch is a ``(C, T)`` float64 array (channel-major). A :class:`Dataset`
stacks ``N`` epochs into an ``(N, C, T)`` array with per-trial labels and
session ids.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter, oaconvolve

from .errors import (
    DegenerateChannelError,
    InvalidBandError,
    InvalidHeaderError,
    InvalidInputError,
    NonFinitePayloadError,
    SizeMismatchError,
    VersionMismatchError,
)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    """Labelled multichannel trials sharing ``C``, ``T`` and sampling rate."""

    X: np.ndarray
    labels: np.ndarray
    sessions: np.ndarray
    fs_hz: float
    channel_names: tuple = None
    seed: int = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 3:
            raise InvalidInputError(f"X must be (N, C, T), got shape {X.shape}")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        sessions = np.asarray(self.sessions, dtype=np.int64).reshape(-1)
        if not (len(labels) == len(sessions) == X.shape[0]):
            raise InvalidInputError("epochs, labels and sessions differ in length")
        if not np.all(np.isfinite(X)):
            raise InvalidInputError("epoch data contains non-finite values")
        if not self.fs_hz > 0:
            raise InvalidInputError("fs_hz must be positive")
        names = self.channel_names
        if names is not None:
            names = tuple(str(n) for n in names)
            if len(names) != X.shape[1]:
                raise InvalidInputError("channel_names length differs from C")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sessions", sessions)
        object.__setattr__(self, "fs_hz", float(self.fs_hz))
        object.__setattr__(self, "channel_names", names)

    @property
    def n_trials(self):
        return self.X.shape[0]

    @property
    def n_channels(self):
        return self.X.shape[1]

    @property
    def n_times(self):
        return self.X.shape[2]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self, X=self.X[idx], labels=self.labels[idx], sessions=self.sessions[idx]
        )

    def equals(self, other):
        """Bitwise comparison of payload and metadata."""
        return (
            self.X.shape == other.X.shape
            and self.X.tobytes() == other.X.tobytes()
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.sessions, other.sessions)
            and self.fs_hz == other.fs_hz
            and self.channel_names == other.channel_names
            and self.seed == other.seed
        )


# ---------------------------------------------------------------------------
# pre-processing


def standardize(X, channel_names=None, tol=1e-12):
    """Scale every channel to zero mean and unit (T - 1) standard deviation.

    Parameters
    ----------
    X : ndarray, shape (..., C, T)

    Raises
    ------
    DegenerateChannelError
        If a channel's standard deviation is below ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=-1, keepdims=True)
    centered = X - mean
    std = centered.std(axis=-1, ddof=1, keepdims=True)
    bad = ~(std > tol)
    if np.any(bad):
        ch = int(np.argwhere(bad[..., 0])[0][-1])
        name = channel_names[ch] if channel_names is not None else f"#{ch}"
        raise DegenerateChannelError(f"channel {name} is (near-)constant")
    out = centered / std
    # a second centering pass absorbs rounding from the division
    return out - out.mean(axis=-1, keepdims=True)


def design_bandpass(lo_hz, hi_hz, fs_hz):
    """Hamming-windowed-sinc band-pass FIR with odd length.

    The transition width is ``min(lo, fs/2 - hi, 2 Hz)`` and the length is
    ``ceil(3.3 fs / width)`` rounded up to odd. Built as the difference of two
    unit-DC-gain low-pass filters, so the DC gain is zero.
    """
    nyq = fs_hz / 2.0
    if not (0 < lo_hz < hi_hz < nyq):
        raise InvalidBandError(f"need 0 < lo < hi < fs/2, got [{lo_hz}, {hi_hz}] at fs={fs_hz}")
    width = min(lo_hz, nyq - hi_hz, 2.0)
    numtaps = int(np.ceil(3.3 * fs_hz / width))
    numtaps += 1 - numtaps % 2
    n = np.arange(numtaps) - (numtaps - 1) / 2
    window = np.hamming(numtaps)

    def lowpass(fc):
        h = np.sinc(2 * fc / fs_hz * n) * window
        return h / h.sum()

    return lowpass(hi_hz) - lowpass(lo_hz)


def bandpass(X, lo_hz, hi_hz, fs_hz):
    """Zero-phase-aligned FIR band-pass applied by FFT overlap-add.

    The linear-phase filter's integer group delay is removed so the output is
    time-aligned with the input and keeps length ``T``. Edges are handled by
    reflecting the signal over half the filter length; the first and last
    ``numtaps // 2`` samples are still attenuated/distorted relative to the
    interior.

    Parameters
    ----------
    X : ndarray, shape (..., T)
    """
    X = np.asarray(X, dtype=np.float64)
    h = design_bandpass(lo_hz, hi_hz, fs_hz)
    half = len(h) // 2
    pad = [(0, 0)] * (X.ndim - 1) + [(half, half)]
    Xp = np.pad(X, pad, mode="reflect")
    kernel = h.reshape((1,) * (X.ndim - 1) + (-1,))
    y = oaconvolve(Xp, kernel, mode="full", axes=-1)
    start = 2 * half
    return y[..., start : start + X.shape[-1]]


# ---------------------------------------------------------------------------
# generators

GENERATOR_KINDS = ("lorenz", "var_lagged_twoclass", "spatial_twoclass")


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of a synthetic dataset.

    ``n_trials`` counts trials per class for the two-class kinds and epochs
    for ``lorenz``. ``lag`` and ``coupling`` set the planted lagged drive
    between the channels in ``pair``. Sources are AR(2) oscillators at
    ``osc_hz`` with pole radius ``pole_radius``.
    """

    kind: str = "var_lagged_twoclass"
    n_trials: int = 100
    n_channels: int = 3
    n_times: int = 512
    fs_hz: float = 128.0
    seed: int = 0
    lag: int = 15
    coupling: float = 0.8
    noise_std: float = 1.0
    osc_hz: float = 0.0
    pole_radius: float = 0.9
    pair: tuple = (0, 1)
    mixing: float = 0.5
    dt: float = 0.01
    lorenz_channels: tuple = ("x",)
    n_sessions: int = 1

    def validate(self):
        if self.kind not in GENERATOR_KINDS:
            raise InvalidInputError(f"unknown generator kind {self.kind!r}")
        if self.n_trials < 1 or self.n_channels < 1 or self.n_times < 2:
            raise InvalidInputError("n_trials, n_channels, n_times must be positive")
        if not self.fs_hz > 0:
            raise InvalidInputError("fs_hz must be positive")
        if not (1 <= self.lag < self.n_times / 4):
            raise InvalidInputError("lag must satisfy 1 <= lag < T/4")
        if not (0 < self.coupling < 1):
            raise InvalidInputError("coupling must lie in (0, 1)")
        if not self.noise_std > 0:
            raise InvalidInputError("noise_std must be positive")
        if not (0 < self.pole_radius < 1):
            raise InvalidInputError("pole_radius must lie in (0, 1)")
        if self.n_sessions < 1:
            raise InvalidInputError("n_sessions must be positive")
        if self.kind != "lorenz":
            i, j = self.pair
            if not (0 <= i < self.n_channels and 0 <= j < self.n_channels and i != j):
                raise InvalidInputError(f"invalid channel pair {self.pair}")
        else:
            if not set(self.lorenz_channels) <= {"x", "y", "z"} or not self.lorenz_channels:
                raise InvalidInputError("lorenz_channels must be drawn from x, y, z")
        return self

    def to_dict(self):
        d = dict(self.__dict__)
        d["pair"] = list(self.pair)
        d["lorenz_channels"] = list(self.lorenz_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "pair" in d:
            d["pair"] = tuple(d["pair"])
        if "lorenz_channels" in d:
            d["lorenz_channels"] = tuple(d["lorenz_channels"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


def _trial_rng(seed, *key):
    # independent stream per (seed, key): trials can be generated in any order
    return np.random.default_rng([int(seed), *[int(k) for k in key]])


LORENZ_SIGMA = 10.0
LORENZ_RHO = 28.0
LORENZ_BETA = 8.0 / 3.0


def lorenz_rhs(state):
    x, y, z = state
    return np.array(
        [LORENZ_SIGMA * (y - x), x * (LORENZ_RHO - z) - y, x * y - LORENZ_BETA * z]
    )


def rk4_integrate(x0, dt, n_steps):
    """Fixed-step RK4 for the Lorenz-63 system.

    Returns an ``(n_steps + 1, 3)`` trajectory starting at ``x0``.
    """
    out = np.empty((n_steps + 1, 3))
    s = np.asarray(x0, dtype=np.float64)
    out[0] = s
    for k in range(n_steps):
        k1 = lorenz_rhs(s)
        k2 = lorenz_rhs(s + 0.5 * dt * k1)
        k3 = lorenz_rhs(s + 0.5 * dt * k2)
        k4 = lorenz_rhs(s + dt * k3)
        s = s + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = s
    return out


def gen_lorenz(spec, trial=0, transient=1000):
    """One ``(3, T)`` Lorenz-63 epoch (rows x, y, z).

    The seed (and trial index) perturbs the initial condition around
    ``(1, 1, 1)``; the first ``transient`` RK4 steps are discarded.
    """
    rng = _trial_rng(spec.seed, 0, trial)
    x0 = np.array([1.0, 1.0, 1.0]) + rng.standard_normal(3)
    traj = rk4_integrate(x0, spec.dt, transient + spec.n_times - 1)
    return traj[transient:].T.copy()


def gen_lorenz_dataset(spec):
    """``n_trials`` Lorenz epochs restricted to ``spec.lorenz_channels``."""
    spec.validate()
    rows = ["xyz".index(c) for c in spec.lorenz_channels]
    X = np.stack([gen_lorenz(spec, trial=k)[rows] for k in range(spec.n_trials)])
    n = spec.n_trials
    return Dataset(
        X=X,
        labels=np.zeros(n, dtype=np.int64),
        sessions=_session_ids(n, spec.n_sessions),
        fs_hz=1.0 / spec.dt,
        channel_names=tuple(spec.lorenz_channels),
        seed=spec.seed,
    )


def ar2_coefficients(osc_hz, fs_hz, radius):
    w = 2 * np.pi * osc_hz / fs_hz
    return 2 * radius * np.cos(w), -radius * radius


def ar2_autocorrelation(a1, a2, max_lag):
    """Theoretical autocorrelation of a stationary AR(2) process."""
    rho = np.empty(max_lag + 1)
    rho[0] = 1.0
    if max_lag >= 1:
        rho[1] = a1 / (1 - a2)
    for k in range(2, max_lag + 1):
        rho[k] = a1 * rho[k - 1] + a2 * rho[k - 2]
    return rho


def _ar2_variance(a1, a2):
    return (1 - a2) / ((1 + a2) * ((1 - a2) ** 2 - a1 * a1))


def _ar2_sources(rng, n_sources, n_times, a1, a2, noise_std, burn_in=300):
    e = rng.standard_normal((n_sources, n_times + burn_in)) * noise_std
    x = lfilter([1.0], [1.0, -a1, -a2], e, axis=-1)[:, burn_in:]
    return x / (noise_std * np.sqrt(_ar2_variance(a1, a2)))


def _session_ids(n, n_sessions):
    return (np.arange(n) * n_sessions // n).astype(np.int64)


def _channel_names(C):
    return tuple(f"ch{c}" for c in range(C))


def _two_class_layout(spec):
    n = spec.n_trials
    labels = np.repeat([0, 1], n)
    # sessions split each class evenly
    sess = np.concatenate([_session_ids(n, spec.n_sessions)] * 2)
    return labels, sess


def gen_var_lagged_twoclass(spec):
    """Two classes that differ only in lagged cross-channel structure.

    Channel ``j`` of the coupled ``pair = (i, j)`` is driven by channel ``i``
    delayed by ``lag`` samples with gain ``+g`` (class 0) or ``-g`` (class 1).
    For class 1 a zero-lag term ``h x_i(t)`` is added with
    ``h = 2 g c / v``, where ``c`` is the epoch's sample covariance between
    ``x_i(t - lag)`` and ``x_i(t)`` and ``v`` the sample variance of ``x_i``.
    This cancels the sign flip at zero lag epoch by epoch (covariance and
    variance of channel ``j`` match class 0 up to the independent noise
    terms), while the lag-``lag`` cross-covariance is about ``g`` versus
    ``g (2 rho(lag)^2 - 1)``. Every epoch is re-standardized.
    """
    spec.validate()
    a1, a2 = ar2_coefficients(spec.osc_hz, spec.fs_hz, spec.pole_radius)
    g = spec.coupling
    i, j = spec.pair
    C, T, L = spec.n_channels, spec.n_times, spec.lag
    labels, sessions = _two_class_layout(spec)
    X = np.empty((len(labels), C, T))
    for k, y in enumerate(labels):
        rng = _trial_rng(spec.seed, 1, y, k)
        src = _ar2_sources(rng, C, T + L, a1, a2, spec.noise_std)
        x = src[:, L:].copy()
        drive = src[i, :T]  # x_i(t - lag)
        if y == 0:
            x[j] = g * drive + np.sqrt(1 - g * g) * src[j, L:]
        else:
            xi = x[i] - x[i].mean()
            h = 2 * g * np.dot(drive - drive.mean(), xi) / np.dot(xi, xi)
            x[j] = -g * drive + h * x[i] + np.sqrt(1 - g * g) * src[j, L:]
        X[k] = standardize(x)
    return Dataset(X, labels, sessions, spec.fs_hz, _channel_names(C), spec.seed)


def spatial_mixing(spec, label):
    """Class mixing matrix ``I + m (E + E^T)`` coupling a class-specific channel pair."""
    C = spec.n_channels
    A = np.eye(C)
    if C > 1:
        a = label % C
        b = (label + 1) % C
        A[a, b] += spec.mixing
        A[b, a] += spec.mixing
    return A


def gen_spatial_twoclass(spec):
    """Two classes of AR(2) sources mixed by distinct spatial matrices."""
    spec.validate()
    a1, a2 = ar2_coefficients(spec.osc_hz, spec.fs_hz, spec.pole_radius)
    C, T = spec.n_channels, spec.n_times
    labels, sessions = _two_class_layout(spec)
    mix = [spatial_mixing(spec, 0), spatial_mixing(spec, 1)]
    X = np.empty((len(labels), C, T))
    for k, y in enumerate(labels):
        rng = _trial_rng(spec.seed, 2, y, k)
        src = _ar2_sources(rng, C, T, a1, a2, spec.noise_std)
        X[k] = standardize(mix[y] @ src)
    return Dataset(X, labels, sessions, spec.fs_hz, _channel_names(C), spec.seed)


def generate(spec):
    """Dispatch on ``spec.kind``."""
    spec.validate()
    if spec.kind == "lorenz":
        return gen_lorenz_dataset(spec)
    if spec.kind == "var_lagged_twoclass":
        return gen_var_lagged_twoclass(spec)
    return gen_spatial_twoclass(spec)


# ---------------------------------------------------------------------------
# on-disk format: meta.json + data.bin (little-endian float64, [trial][channel][time])


def save_dataset(D, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": FORMAT_VERSION,
        "n_trials": int(D.n_trials),
        "n_channels": int(D.n_channels),
        "n_times": int(D.n_times),
        "fs_hz": float(D.fs_hz),
        "labels": [int(v) for v in D.labels],
        "sessions": [int(v) for v in D.sessions],
    }
    if D.channel_names is not None:
        meta["channel_names"] = list(D.channel_names)
    if D.seed is not None:
        meta["seed"] = int(D.seed)
    (path / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    (path / "data.bin").write_bytes(D.X.astype("<f8", copy=False).tobytes(order="C"))


def load_dataset(path):
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidHeaderError(f"meta.json is not valid JSON: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported dataset version {meta.get('version')!r}")
    try:
        N, C, T = (int(meta[k]) for k in ("n_trials", "n_channels", "n_times"))
        fs = float(meta["fs_hz"])
        labels = meta["labels"]
        sessions = meta["sessions"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidHeaderError(f"malformed header: {exc}") from exc
    if N < 1 or C < 1 or T < 1 or not fs > 0:
        raise InvalidHeaderError(f"invalid header dims N={N} C={C} T={T} fs={fs}")
    if len(labels) != N or len(sessions) != N:
        raise InvalidHeaderError("labels/sessions length differs from n_trials")
    raw = (path / "data.bin").read_bytes()
    if len(raw) != N * C * T * 8:
        raise SizeMismatchError(f"payload has {len(raw)} bytes, header implies {N * C * T * 8}")
    X = np.frombuffer(raw, dtype="<f8").reshape(N, C, T).astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise NonFinitePayloadError("payload contains non-finite values")
    return Dataset(
        X=X,
        labels=labels,
        sessions=sessions,
        fs_hz=fs,
        channel_names=meta.get("channel_names"),
        seed=meta.get("seed"),
    )
