"""Gait-event phases and their quadrature (cos, sin) encoding.

Each of the four foot events gets a phase that advances 2*pi between two
successive occurrences of that event.  Phases are kept unwrapped so they
increase monotonically through a trial; they are only wrapped by encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EVENT_TYPES, EventAnnotations

TWO_PI = 2.0 * np.pi
# each foot-off falls back to the contact period of the same foot
SAME_SIDE_CONTACT = {"lfc": "lfc", "rfc": "rfc", "lfo": "lfc", "rfo": "rfc"}


class PhaseError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseTargets:
    phases: np.ndarray  # T x 4, unwrapped radians
    weights: np.ndarray  # T x 4 in [0, 1]


def _pair_index(times: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Index k of the consecutive pair (times[k], times[k+1]) used at t."""
    k = np.searchsorted(times, t, side="right") - 1
    return np.clip(k, 0, len(times) - 2)


def _fallback_period(event_time: float, contacts: np.ndarray) -> float:
    if contacts.size < 2:
        raise PhaseError("single event needs at least two same-side contacts for its period")
    k = int(_pair_index(contacts, np.asarray(event_time)))
    return float(contacts[k + 1] - contacts[k])


def event_phase(event_times, same_side_contacts, t):
    """Unwrapped phase (radians) of one event type at time(s) ``t``.

    With two or more events the bracketing pair defines the cycle, and the
    first/last pair is extrapolated before/after the annotated range.  With a
    single event the period comes from the adjacent pair of same-side
    contacts.
    """
    ev = np.asarray(event_times, dtype=float).reshape(-1)
    t_arr = np.asarray(t, dtype=float)
    if ev.size == 0:
        raise PhaseError("empty event list")
    if ev.size == 1:
        period = _fallback_period(ev[0], np.asarray(same_side_contacts, dtype=float).reshape(-1))
        if period <= 0:
            raise PhaseError(f"non-positive fallback period {period}")
        out = TWO_PI * (t_arr - ev[0]) / period
    else:
        periods = np.diff(ev)
        if np.any(periods <= 0):
            raise PhaseError("event times must be strictly increasing")
        k = _pair_index(ev, t_arr)
        out = TWO_PI * (k + (t_arr - ev[k]) / periods[k])
    return float(out) if np.ndim(out) == 0 else out


def loss_weight(t, t0: float, t1: float):
    """1 inside [t0, t1], decaying linearly to 0 one second outside."""
    if t0 > t1:
        raise PhaseError("loss_weight needs t0 <= t1")
    t_arr = np.asarray(t, dtype=float)
    dist = np.maximum(t0 - t_arr, 0.0) + np.maximum(t_arr - t1, 0.0)
    w = np.maximum(0.0, 1.0 - dist)
    return float(w) if np.ndim(w) == 0 else w


def _support(ev: np.ndarray, contacts: np.ndarray) -> tuple:
    if ev.size >= 2:
        return float(ev[0]), float(ev[-1])
    k = int(_pair_index(contacts, np.asarray(ev[0])))
    return min(ev[0], contacts[k]), max(ev[0], contacts[k + 1])


def quadrature(phases) -> np.ndarray:
    """T x 4 phases -> T x 8 interleaved [cos, sin] pairs."""
    phases = np.asarray(phases, dtype=float)
    q = np.empty(phases.shape[:-1] + (2 * phases.shape[-1],))
    q[..., 0::2] = np.cos(phases)
    q[..., 1::2] = np.sin(phases)
    return q


def encode(events: EventAnnotations, times):
    """Phase targets, loss weights and quadrature frames at ``times``.

    Returns ``(PhaseTargets, q)`` with ``q`` of shape T x 8.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    phases = np.empty((times.size, 4))
    weights = np.empty((times.size, 4))
    for j, name in enumerate(EVENT_TYPES):
        ev = getattr(events, name)
        contacts = getattr(events, SAME_SIDE_CONTACT[name])
        phases[:, j] = event_phase(ev, contacts, times)
        t0, t1 = _support(ev, contacts)
        weights[:, j] = loss_weight(times, t0, t1)
    return PhaseTargets(phases=phases, weights=weights), quadrature(phases)


def decode(q) -> np.ndarray:
    """Quadrature pairs (..., 8) -> wrapped phases (..., 4) in (-pi, pi]."""
    q = np.asarray(q, dtype=float)
    c = q[..., 0::2]
    s = q[..., 1::2]
    if np.any((c == 0.0) & (s == 0.0)):
        raise PhaseError("degenerate (0, 0) quadrature pair")
    phi = np.arctan2(s, c)
    return np.where(phi <= -np.pi, np.pi, phi)


def wrap(phi):
    """Wrap to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(phi, dtype=float), TWO_PI)
    return out
