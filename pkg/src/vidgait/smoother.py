"""Extended Kalman / RTS smoothing of quadrature gait phases and event detection.

State ``x = [omega, omega_dot, psi_rfc, psi_lfo, psi_rfo]``: the overall gait
phase referenced to left foot contact, its rate (rad/s), and the phase
offsets of the other three events.  The left-contact offset is identically
zero.  Observations are the 8 quadrature channels in PhaseFrame order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import EVENT_TYPES, MIN_EVENT_SPACING_S
from .phase_codec import TWO_PI, decode, wrap

STREAM_NAMES = ("omega", "omega+psi_rfc", "omega+psi_lfo", "omega+psi_rfo")
_JITTER = 1e-9


class SmootherError(RuntimeError):
    pass


def _default_q():
    return np.diag([0.5, 0.5, 0.1, 0.1, 0.1])


@dataclass(frozen=True)
class SmootherConfig:
    Q: np.ndarray = field(default_factory=_default_q)
    R: np.ndarray = field(default_factory=lambda: np.eye(8))
    P0: np.ndarray = field(default_factory=lambda: np.eye(5))
    min_cadence: float = 0.5
    min_spacing_s: float = MIN_EVENT_SPACING_S

    def __post_init__(self):
        for name, shape in (("Q", (5, 5)), ("R", (8, 8)), ("P0", (5, 5))):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != shape:
                raise ValueError(f"{name} must be {shape}, got {m.shape}")
            if not np.allclose(m, m.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(m)) < -1e-12:
                raise ValueError(f"{name} must be positive semi-definite")
            object.__setattr__(self, name, m)
        if not self.min_cadence > 0:
            raise ValueError("min_cadence must be > 0")

    def to_dict(self) -> dict:
        return {"Q": self.Q.tolist(), "R": self.R.tolist(), "P0": self.P0.tolist(),
                "min_cadence": self.min_cadence, "min_spacing_s": self.min_spacing_s}

    @classmethod
    def from_dict(cls, d) -> "SmootherConfig":
        return cls(**{k: (np.asarray(v) if k in ("Q", "R", "P0") else v) for k, v in d.items()})


@dataclass(frozen=True)
class SmootherState:
    x: np.ndarray
    P: np.ndarray


@dataclass(frozen=True)
class SmootherTrack:
    """Smoothed (and forward-filtered) states for every frame."""

    x: np.ndarray  # T x 5 smoothed
    P: np.ndarray  # T x 5 x 5
    x_filt: np.ndarray
    P_filt: np.ndarray
    dt: float

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i) -> SmootherState:
        return SmootherState(self.x[i], self.P[i])

    def streams(self) -> np.ndarray:
        """T x 4 unwrapped event phases [omega, omega + psi_i]."""
        return stream_phases(self.x)


@dataclass(frozen=True)
class DetectedEvents:
    lfc: np.ndarray
    rfc: np.ndarray
    lfo: np.ndarray
    rfo: np.ndarray
    provenance: dict = field(default_factory=lambda: dict(zip(EVENT_TYPES, STREAM_NAMES)))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in EVENT_TYPES}


def transition(dt: float) -> np.ndarray:
    F = np.eye(5)
    F[0, 1] = dt
    return F


def _sym(P):
    return 0.5 * (P + P.T)


def predict(state: SmootherState, dt: float, cfg: SmootherConfig) -> SmootherState:
    F = transition(dt)
    return SmootherState(F @ state.x, _sym(F @ state.P @ F.T + cfg.Q))


def stream_phases(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    theta = np.empty(x.shape[:-1] + (4,))
    theta[..., 0] = x[..., 0]
    theta[..., 1:] = x[..., :1] + x[..., 2:5]
    return theta


def observe(x):
    """Predicted quadrature observation and its 8 x 5 Jacobian."""
    x = np.asarray(x, dtype=float)
    theta = stream_phases(x)
    c, s = np.cos(theta), np.sin(theta)
    y = np.empty(8)
    y[0::2], y[1::2] = c, s
    H = np.zeros((8, 5))
    H[0::2, 0] = -s
    H[1::2, 0] = c
    for i in range(1, 4):
        H[2 * i, 1 + i] = -s[i]
        H[2 * i + 1, 1 + i] = c[i]
    return y, H


def _check_pd(P, k):
    try:
        np.linalg.cholesky(P)
        return P
    except np.linalg.LinAlgError:
        P = P + _JITTER * np.eye(P.shape[0]) * max(1.0, np.trace(P))
        try:
            np.linalg.cholesky(P)
        except np.linalg.LinAlgError as exc:
            raise SmootherError(f"covariance lost positive definiteness at frame {k}") from exc
        return P


def initial_state(observations: np.ndarray, dt: float, cfg: SmootherConfig) -> SmootherState:
    """First-frame phases plus a median-increment cadence estimate."""
    phi = decode(observations)
    omega = np.unwrap(phi[:, 0])
    rate = np.median(np.diff(omega)) / dt if omega.size > 1 else cfg.min_cadence
    x = np.empty(5)
    x[0] = phi[0, 0]
    x[1] = max(rate, cfg.min_cadence)
    x[2:] = wrap(phi[0, 1:] - phi[0, 0])
    return SmootherState(x, cfg.P0.copy())


def smooth(observations, dt: float, cfg: SmootherConfig | None = None,
           init: SmootherState | None = None) -> SmootherTrack:
    cfg = cfg or SmootherConfig()
    y_obs = np.asarray(observations, dtype=float)
    T = y_obs.shape[0]
    if y_obs.ndim != 2 or y_obs.shape[1] != 8 or T < 2:
        raise ValueError(f"observations must be T x 8 with T >= 2, got {y_obs.shape}")
    if not dt > 0:
        raise ValueError("dt must be > 0")
    state = init or initial_state(y_obs, dt, cfg)
    F = transition(dt)
    I5 = np.eye(5)
    xf = np.empty((T, 5))
    Pf = np.empty((T, 5, 5))
    xp = np.empty((T, 5))
    Pp = np.empty((T, 5, 5))
    x, P = np.array(state.x, dtype=float), np.array(state.P, dtype=float)
    for k in range(T):
        if k > 0:
            x = F @ x
            P = _sym(F @ P @ F.T + cfg.Q)
        xp[k], Pp[k] = x, P
        y_hat, H = observe(x)
        S = H @ P @ H.T + cfg.R
        K = np.linalg.solve(S, H @ P).T
        x = x + K @ (y_obs[k] - y_hat)
        A = I5 - K @ H
        P = _check_pd(_sym(A @ P @ A.T + K @ cfg.R @ K.T), k)
        x[1] = max(x[1], cfg.min_cadence)
        xf[k], Pf[k] = x, P
    xs = xf.copy()
    Ps = Pf.copy()
    for k in range(T - 2, -1, -1):
        G = np.linalg.solve(Pp[k + 1], F @ Pf[k]).T
        xs[k] = xf[k] + G @ (xs[k + 1] - xp[k + 1])
        Ps[k] = _check_pd(_sym(Pf[k] + G @ (Ps[k + 1] - Pp[k + 1]) @ G.T), k)
        xs[k, 1] = max(xs[k, 1], cfg.min_cadence)
    return SmootherTrack(x=xs, P=Ps, x_filt=xf, P_filt=Pf, dt=float(dt))


def crossing_times(theta, dt: float, t0: float = 0.0) -> np.ndarray:
    """Times at which an unwrapped phase rises through a multiple of 2*pi.

    A sample lying exactly on a multiple counts once, for the interval that
    ends on it.
    """
    theta = np.asarray(theta, dtype=float)
    out = []
    for j in range(theta.size - 1):
        a, b = theta[j], theta[j + 1]
        if b <= a:
            continue
        m_lo = np.floor(a / TWO_PI) + 1
        m_hi = np.floor(b / TWO_PI)
        for m in np.arange(m_lo, m_hi + 1):
            target = TWO_PI * m
            out.append(t0 + (j + (target - a) / (b - a)) * dt)
    return np.asarray(out)


def _space_out(times: np.ndarray, min_spacing: float) -> np.ndarray:
    kept = []
    for t in times:
        if not kept or t - kept[-1] >= min_spacing:
            kept.append(t)
    return np.asarray(kept)


def detect_events(smoothed: SmootherTrack, dt: float | None = None,
                  min_spacing_s: float = MIN_EVENT_SPACING_S) -> DetectedEvents:
    dt = smoothed.dt if dt is None else dt
    theta = smoothed.streams()
    found = {}
    for i, name in enumerate(EVENT_TYPES):
        found[name] = _space_out(crossing_times(theta[:, i], dt), min_spacing_s)
    return DetectedEvents(**found)


def reconstruction_residual(observations, smoothed: SmootherTrack) -> float:
    """Mean squared gap between observed quadrature and the smoother's reconstruction."""
    y_obs = np.asarray(observations, dtype=float)
    theta = smoothed.streams()
    y_hat = np.empty_like(y_obs)
    y_hat[:, 0::2] = np.cos(theta)
    y_hat[:, 1::2] = np.sin(theta)
    return float(np.mean((y_obs - y_hat) ** 2))
