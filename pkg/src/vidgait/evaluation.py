"""Event-timing and gait-parameter agreement metrics.

Detected events are matched to the nearest ground-truth event of the same
type (detected -> truth, so two detections near one truth event both pair
with it).  Trials with undetected truth events or any error above one
second are reported as outliers and left out of parameter agreement.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import EVENT_TYPES
from .gait_params import PARAM_NAMES, GaitCycleParams

UNMATCHED_WINDOW_S = 1.0
OUTLIER_ERROR_S = 1.0
CONTACT_TYPES = ("lfc", "rfc")
OFF_TYPES = ("lfo", "rfo")


@dataclass(frozen=True)
class EventMatch:
    event_type: str
    detected: float
    truth: float

    @property
    def error(self) -> float:
        return self.detected - self.truth


@dataclass
class EventMatches:
    pairs: list = field(default_factory=list)
    unmatched: dict = field(default_factory=dict)  # event type -> count of missed truth events

    def errors(self, types: Sequence[str] = EVENT_TYPES) -> np.ndarray:
        return np.array([p.error for p in self.pairs if p.event_type in types])

    @property
    def n_unmatched(self) -> int:
        return int(sum(self.unmatched.values()))


def match_events(detected, truth, window_s: float = UNMATCHED_WINDOW_S) -> EventMatches:
    out = EventMatches()
    for name in EVENT_TYPES:
        det = np.asarray(getattr(detected, name), dtype=float).reshape(-1)
        tru = np.asarray(getattr(truth, name), dtype=float).reshape(-1)
        if tru.size:
            for d in det:
                j = int(np.argmin(np.abs(tru - d)))
                out.pairs.append(EventMatch(name, float(d), float(tru[j])))
        missed = 0
        for t in tru:
            if det.size == 0 or np.min(np.abs(det - t)) > window_s:
                missed += 1
        out.unmatched[name] = missed
    return out


def error_stats(errors: Iterable[float]) -> dict:
    e = np.abs(np.asarray(list(errors), dtype=float))
    if e.size == 0:
        return {"n": 0, "median_abs": None, "p90_abs": None, "n_over_1s": 0}
    return {
        "n": int(e.size),
        "median_abs": float(np.median(e)),
        "p90_abs": float(np.percentile(e, 90)),
        "n_over_1s": int(np.sum(e > OUTLIER_ERROR_S)),
    }


def agreement(est: Sequence[float], gt: Sequence[float]) -> dict:
    """Pearson r (absent when either side has zero variance) and RMSE."""
    a = np.asarray(est, dtype=float)
    b = np.asarray(gt, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("est and gt must be equal-length 1-D sequences")
    if a.size < 3:
        raise ValueError("agreement needs at least 3 pairs")
    rmse = float(np.sqrt(np.mean((a - b) ** 2)))
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    r = None if denom == 0 else float(np.clip(np.sum(da * db) / denom, -1.0, 1.0))
    return {"r": r, "rmse": rmse, "n": int(a.size)}


@dataclass
class TrialEvaluation:
    trial_id: str
    detected: object
    truth: object
    est_params: list  # GaitCycleParams from detected events + model kinematics
    gt_params: list  # GaitCycleParams from truth events + gt kinematics


def first_cycles(params: Sequence[GaitCycleParams]) -> dict:
    out = {}
    for p in sorted(params, key=lambda p: p.start):
        out.setdefault(p.side, p)
    return out


def pair_parameters(est: Sequence[GaitCycleParams], gt: Sequence[GaitCycleParams]) -> list:
    """First estimated cycle per side, paired with the ground-truth cycle nearest in start time."""
    pairs = []
    for side, e in sorted(first_cycles(est).items()):
        candidates = [g for g in gt if g.side == side]
        if candidates:
            g = min(candidates, key=lambda g: abs(g.start - e.start))
            pairs.append((e, g))
    return pairs


@dataclass
class AgreementReport:
    parameters: dict  # name -> {r, rmse, n}
    events: dict  # "contact" / "off" / "all" -> error_stats
    unmatched: int
    outliers: list
    n_trials: int

    def to_dict(self) -> dict:
        return {"parameters": self.parameters, "events": self.events, "unmatched_truth_events": self.unmatched,
                "outlier_trials": self.outliers, "n_trials": self.n_trials}


def build_report(trials: Sequence[TrialEvaluation]) -> AgreementReport:
    all_matches = EventMatches()
    outliers = []
    pairs = []
    for tr in sorted(trials, key=lambda t: t.trial_id):
        m = match_events(tr.detected, tr.truth)
        all_matches.pairs.extend(m.pairs)
        for k, v in m.unmatched.items():
            all_matches.unmatched[k] = all_matches.unmatched.get(k, 0) + v
        errs = m.errors()
        if m.n_unmatched or (errs.size and np.max(np.abs(errs)) > OUTLIER_ERROR_S):
            outliers.append(tr.trial_id)
            continue
        pairs.extend(pair_parameters(tr.est_params, tr.gt_params))
    params = {}
    for name in PARAM_NAMES:
        est = [getattr(e, name) for e, _ in pairs]
        gt = [getattr(g, name) for _, g in pairs]
        params[name] = agreement(est, gt) if len(est) >= 3 else {"r": None, "rmse": None, "n": len(est)}
    events = {
        "contact": error_stats(all_matches.errors(CONTACT_TYPES)),
        "off": error_stats(all_matches.errors(OFF_TYPES)),
        "all": error_stats(all_matches.errors()),
    }
    return AgreementReport(parameters=params, events=events, unmatched=all_matches.n_unmatched,
                           outliers=outliers, n_trials=len(trials))


def histogram(errors, bin_s: float = 0.01) -> tuple:
    """Counts of signed errors in ``bin_s`` wide bins aligned to zero; returns (edges, counts)."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        return np.array([0.0, bin_s]), np.array([0])
    lo = np.floor(e.min() / bin_s - 1e-9)
    hi = np.floor(e.max() / bin_s + 1e-9) + 1
    edges = np.arange(lo, hi + 1) * bin_s
    counts, _ = np.histogram(e, bins=edges)
    return edges, counts


# ---------------------------------------------------------------------------
# tables

EVENT_COLUMNS = ("event_type", "time_s", "source", "trial_id")


def event_rows(trial_id: str, events, source: str) -> list:
    rows = []
    for name in EVENT_TYPES:
        for t in np.asarray(getattr(events, name), dtype=float):
            rows.append({"event_type": name, "time_s": repr(float(t)), "source": source, "trial_id": trial_id})
    return rows


def write_events(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVENT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


@dataclass
class EventTable:
    lfc: np.ndarray
    rfc: np.ndarray
    lfo: np.ndarray
    rfo: np.ndarray


def read_events(path) -> dict:
    """{(trial_id, source): EventTable} from an events table."""
    acc = {}
    with open(Path(path), newline="") as fh:
        for r in csv.DictReader(fh):
            key = (r["trial_id"], r["source"])
            acc.setdefault(key, {k: [] for k in EVENT_TYPES})[r["event_type"]].append(float(r["time_s"]))
    return {k: EventTable(**{e: np.sort(np.array(v[e])) for e in EVENT_TYPES}) for k, v in acc.items()}


def write_report(path, report: AgreementReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_histogram(path, matches_errors: dict, bin_s: float = 0.01) -> None:
    """One row per bin with counts for each error group in ``matches_errors``."""
    allv = np.concatenate([np.asarray(v, dtype=float) for v in matches_errors.values()] or [np.zeros(0)])
    edges, _ = histogram(allv, bin_s)
    cols = {k: np.histogram(np.asarray(v, dtype=float), bins=edges)[0] for k, v in matches_errors.items()}
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_start_s", "bin_end_s", *cols])
        for i in range(len(edges) - 1):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), *(int(c[i]) for c in cols.values())])


def write_scatter(path, pairs: Sequence[tuple]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "side", "est", "gt"])
        for e, g in pairs:
            for name in PARAM_NAMES:
                w.writerow([name, e.side, repr(float(getattr(e, name))), repr(float(getattr(g, name)))])


def params_from_rows(rows: Sequence[dict]) -> list:
    return [
        GaitCycleParams(
            side=r["side"], start=r["start_s"], end=r["end_s"], cadence=r["cadence_spm"],
            step_time=r["step_time_s"], step_length=r["step_length_m"], velocity=r["velocity_mps"],
            double_stance=r["double_stance_s"], single_support=r["single_support_s"],
        )
        for r in rows
    ]


def optional_float(x) -> Optional[float]:
    return None if x is None else float(x)
