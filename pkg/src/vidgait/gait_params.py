"""Gait cycles and per-cycle spatiotemporal parameters.

A left cycle runs between successive left contacts and must contain, in
order, a right foot off, a right contact and a left foot off.  Right cycles
mirror this.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import KIN_INDEX

_SIDES = {
    # own contact, opposite foot off, opposite contact, own foot off
    "left": ("lfc", "rfo", "rfc", "lfo"),
    "right": ("rfc", "lfo", "lfc", "rfo"),
}


class CycleRangeError(ValueError):
    pass


@dataclass(frozen=True)
class GaitCycle:
    side: str
    start: float
    end: float
    opposite_off: float
    opposite_contact: float
    foot_off: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class SkippedSpan:
    side: str
    start: float
    end: float
    reason: str


@dataclass(frozen=True)
class GaitCycleParams:
    side: str
    start: float
    end: float
    cadence: float  # steps / min
    step_time: float
    step_length: float
    velocity: float
    double_stance: float
    single_support: float
    # step length at the cycle's own contact, when both feet are grounded there
    step_length_start: Optional[float] = None


def _events(events, name) -> np.ndarray:
    return np.asarray(getattr(events, name), dtype=float).reshape(-1)


def parse_cycles(events, return_skipped: bool = False):
    """Valid gait cycles from event times (ground truth or detected)."""
    cycles, skipped = [], []
    for side, (own_c, opp_o, opp_c, own_o) in _SIDES.items():
        contacts = _events(events, own_c)
        pools = {k: _events(events, k) for k in (opp_o, opp_c, own_o)}
        for start, end in zip(contacts[:-1], contacts[1:]):
            inside = {k: v[(v >= start) & (v < end)] for k, v in pools.items()}
            reason = None
            if inside[opp_c].size == 0:
                reason = "missing opposite contact"
            elif inside[opp_o].size == 0:
                reason = "missing opposite foot off"
            elif inside[own_o].size == 0:
                reason = "missing foot off"
            elif any(v.size > 1 for v in inside.values()):
                reason = "duplicate events"
            else:
                o_off, o_con, f_off = inside[opp_o][0], inside[opp_c][0], inside[own_o][0]
                if not (start < o_off < o_con < f_off < end):
                    reason = "out of order"
            if reason is not None:
                skipped.append(SkippedSpan(side, float(start), float(end), reason))
                continue
            cycles.append(GaitCycle(side, float(start), float(end), float(o_off), float(o_con), float(f_off)))
    cycles.sort(key=lambda c: (c.start, c.side))
    return (cycles, skipped) if return_skipped else cycles


def _interp(times, values, t):
    return float(np.interp(t, times, values))


def _time_average(times, values, a, b) -> float:
    """Mean of the piecewise-linear interpolant of ``values`` over [a, b]."""
    inner = (times > a) & (times < b)
    ts = np.concatenate([[a], times[inner], [b]])
    vs = np.interp(ts, times, values)
    return float(np.trapezoid(vs, ts) / (b - a))


def extract_parameters(cycle: GaitCycle, kin, fps: float, t0: float = 0.0) -> GaitCycleParams:
    """The six spatiotemporal parameters of one cycle.

    ``kin`` is T x 9 with frame ``i`` at time ``t0 + i / fps``.
    """
    kin = np.asarray(kin, dtype=float)
    if not np.all(np.isfinite(kin)):
        raise ValueError("non-finite kinematics")
    times = t0 + np.arange(kin.shape[0]) / fps
    if cycle.start < times[0] - 1e-9 or cycle.end > times[-1] + 1e-9:
        raise CycleRangeError(
            f"cycle [{cycle.start:.3f}, {cycle.end:.3f}] s outside kinematics [{times[0]:.3f}, {times[-1]:.3f}] s"
        )
    dur = cycle.duration
    lead_gap = _interp(times, kin[:, KIN_INDEX["foot_pos_r"]] - kin[:, KIN_INDEX["foot_pos_l"]],
                       cycle.opposite_contact)
    start_gap = _interp(times, kin[:, KIN_INDEX["foot_pos_r"]] - kin[:, KIN_INDEX["foot_pos_l"]], cycle.start)
    return GaitCycleParams(
        side=cycle.side,
        start=cycle.start,
        end=cycle.end,
        cadence=2.0 / dur * 60.0,
        step_time=cycle.opposite_contact - cycle.start,
        step_length=abs(lead_gap),
        velocity=_time_average(times, kin[:, KIN_INDEX["pelvis_vel"]], cycle.start, cycle.end),
        double_stance=(cycle.opposite_off - cycle.start) + (cycle.foot_off - cycle.opposite_contact),
        single_support=cycle.opposite_contact - cycle.opposite_off,
        step_length_start=abs(start_gap),
    )


def trial_parameters(events, kin, fps: float) -> list:
    """Parameters for every complete cycle inside the kinematics range."""
    out = []
    duration = (np.asarray(kin).shape[0] - 1) / fps
    for cyc in parse_cycles(events):
        if cyc.start >= 0 and cyc.end <= duration + 1e-9:
            out.append(extract_parameters(cyc, kin, fps))
    return out


PARAM_COLUMNS = ("trial_id", "side", "start_s", "end_s", "cadence_spm", "step_time_s", "step_length_m",
                 "velocity_mps", "double_stance_s", "single_support_s", "source")


def param_row(trial_id: str, p: GaitCycleParams, source: str) -> dict:
    return {
        "trial_id": trial_id, "side": p.side, "start_s": repr(p.start), "end_s": repr(p.end),
        "cadence_spm": repr(p.cadence), "step_time_s": repr(p.step_time),
        "step_length_m": repr(p.step_length), "velocity_mps": repr(p.velocity),
        "double_stance_s": repr(p.double_stance), "single_support_s": repr(p.single_support),
        "source": source,
    }


def write_parameters(path, rows: Iterable[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PARAM_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_parameters(path) -> list:
    numeric = set(PARAM_COLUMNS) - {"trial_id", "side", "source"}
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in numeric:
            r[k] = float(r[k])
    return rows


PARAM_NAMES = tuple(f.name for f in fields(GaitCycleParams)
                    if f.name not in ("side", "start", "end", "step_length_start"))
