"""Domain types, coordinate conventions and trial file I/O.

World frame: right-handed, +Y up, +Z the nominal walking direction.  With
that choice +X points to the subject's left.  Lengths are meters, times
seconds, angles degrees.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

JOINT_NAMES = (
    "mid_hip",
    "sternum",
    "hip_l",
    "hip_r",
    "knee_l",
    "knee_r",
    "ankle_l",
    "ankle_r",
    "toe_l",
    "toe_r",
)
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}
N_JOINTS = len(JOINT_NAMES)
LEG_JOINTS = ("hip_l", "hip_r", "knee_l", "knee_r", "ankle_l", "ankle_r")

KIN_CHANNELS = (
    "hip_flex_l",
    "hip_flex_r",
    "knee_flex_l",
    "knee_flex_r",
    "foot_pos_l",
    "foot_pos_r",
    "pelvis_vel",
    "foot_vel_l",
    "foot_vel_r",
)
KIN_INDEX = {name: i for i, name in enumerate(KIN_CHANNELS)}
N_KIN = len(KIN_CHANNELS)

EVENT_TYPES = ("lfc", "rfc", "lfo", "rfo")
FORWARD = np.array([0.0, 0.0, 1.0])
UP = np.array([0.0, 1.0, 0.0])
LEFT = np.array([1.0, 0.0, 0.0])

MIN_EVENT_SPACING_S = 0.2
HEIGHT_RANGE_M = (0.5, 2.5)


class TrialFormatError(ValueError):
    """Raised when a trial document or value breaks the schema or an invariant."""


def forward_component(a, b) -> float:
    """Forward (+Z) component of ``a - b`` in meters."""
    return float((np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) @ FORWARD)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class EventAnnotations:
    lfc: np.ndarray
    rfc: np.ndarray
    lfo: np.ndarray
    rfo: np.ndarray

    def __post_init__(self):
        for name in EVENT_TYPES:
            object.__setattr__(self, name, _frozen(np.atleast_1d(getattr(self, name))).reshape(-1))

    @classmethod
    def from_dict(cls, d) -> "EventAnnotations":
        missing = [k for k in EVENT_TYPES if k not in d]
        if missing:
            raise TrialFormatError(f"events: missing field(s) {missing}")
        return cls(**{k: np.asarray(d[k], dtype=float).reshape(-1) for k in EVENT_TYPES})

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in EVENT_TYPES}

    def validate(self, duration: Optional[float] = None) -> None:
        for name in EVENT_TYPES:
            t = getattr(self, name)
            if not np.all(np.isfinite(t)):
                raise TrialFormatError(f"events.{name}: non-finite time")
            if t.size > 1 and np.any(np.diff(t) <= MIN_EVENT_SPACING_S):
                raise TrialFormatError(
                    f"events.{name}: times must increase by more than {MIN_EVENT_SPACING_S} s"
                )
            if duration is not None and t.size and (t[0] < 0 or t[-1] > duration + 1e-9):
                raise TrialFormatError(f"events.{name}: time outside [0, {duration}]")

    def shifted(self, dt: float) -> "EventAnnotations":
        return EventAnnotations(**{k: v + dt for k, v in self.as_dict().items()})

    def __eq__(self, other):
        if not isinstance(other, EventAnnotations):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in EVENT_TYPES)


@dataclass(frozen=True, eq=False)
class Trial:
    """One walking bout.

    ``frames`` is T x 10 x 3 in ``JOINT_NAMES`` order, ``gt_kinematics`` is
    T x 9 in ``KIN_CHANNELS`` order.
    """

    frames: np.ndarray
    fps: float
    subject_height: float
    id: str = ""
    gt_kinematics: Optional[np.ndarray] = None
    gt_events: Optional[EventAnnotations] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[1:] != (N_JOINTS, 3):
            raise TrialFormatError(
                f"frames: joint count must be {N_JOINTS} with 3 coordinates, got shape {frames.shape}"
            )
        if frames.shape[0] == 0:
            raise TrialFormatError("frames: empty")
        if not np.all(np.isfinite(frames)):
            raise TrialFormatError("frames: non-finite coordinate")
        if not (math.isfinite(self.fps) and self.fps > 0):
            raise TrialFormatError(f"fps: must be > 0, got {self.fps}")
        lo, hi = HEIGHT_RANGE_M
        if not (lo < self.subject_height < hi):
            raise TrialFormatError(f"height_m: {self.subject_height} outside ({lo}, {hi})")
        object.__setattr__(self, "frames", _frozen(frames))
        object.__setattr__(self, "fps", float(self.fps))
        object.__setattr__(self, "subject_height", float(self.subject_height))
        if self.gt_kinematics is not None:
            kin = np.asarray(self.gt_kinematics, dtype=np.float64)
            if kin.shape != (frames.shape[0], N_KIN):
                raise TrialFormatError(
                    f"kinematics: expected shape ({frames.shape[0]}, {N_KIN}), got {kin.shape}"
                )
            if not np.all(np.isfinite(kin)):
                raise TrialFormatError("kinematics: non-finite value")
            object.__setattr__(self, "gt_kinematics", _frozen(kin))
        if self.gt_events is not None:
            self.gt_events.validate(self.duration)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dt(self) -> float:
        return 1.0 / self.fps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.fps

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) / self.fps

    def joint(self, name: str) -> np.ndarray:
        """T x 3 trajectory of one joint."""
        return self.frames[:, JOINT_INDEX[name]]

    def __eq__(self, other):
        if not isinstance(other, Trial):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            self.id == other.id
            and self.fps == other.fps
            and self.subject_height == other.subject_height
            and np.array_equal(self.frames, other.frames)
            and same(self.gt_kinematics, other.gt_kinematics)
            and (self.gt_events == other.gt_events if self.gt_events is not None
                 else other.gt_events is None)
        )


def trial_to_dict(trial: Trial) -> dict:
    doc = {
        "id": trial.id,
        "height_m": trial.subject_height,
        "fps": trial.fps,
        "joint_names": list(JOINT_NAMES),
        "frames": trial.frames.tolist(),
    }
    if trial.gt_kinematics is not None:
        doc["kinematics"] = trial.gt_kinematics.tolist()
    if trial.gt_events is not None:
        doc["events"] = {k: v.tolist() for k, v in trial.gt_events.as_dict().items()}
    if trial.meta:
        doc["meta"] = trial.meta
    return doc


def trial_from_dict(doc: dict) -> Trial:
    for key in ("id", "height_m", "fps", "joint_names", "frames"):
        if key not in doc:
            raise TrialFormatError(f"missing field '{key}'")
    if list(doc["joint_names"]) != list(JOINT_NAMES):
        raise TrialFormatError(f"joint_names: expected canonical order {list(JOINT_NAMES)}")
    try:
        frames = np.asarray(doc["frames"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise TrialFormatError(f"frames: ragged or non-numeric array ({exc}); check joint count") from exc
    if frames.ndim != 3 or frames.shape[1] != N_JOINTS:
        raise TrialFormatError(f"frames: joint count must be {N_JOINTS}, got shape {frames.shape}")
    kin = doc.get("kinematics")
    events = doc.get("events")
    return Trial(
        frames=frames,
        fps=_number(doc, "fps"),
        subject_height=_number(doc, "height_m"),
        id=str(doc["id"]),
        gt_kinematics=None if kin is None else np.asarray(kin, dtype=np.float64),
        gt_events=None if events is None else EventAnnotations.from_dict(events),
        meta=dict(doc.get("meta", {})),
    )


def _number(doc, key) -> float:
    val = doc[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise TrialFormatError(f"{key}: expected a number, got {val!r}")
    return float(val)


def save_trial(trial: Trial, path) -> None:
    path = Path(path)
    # json writes floats with repr(), which round-trips float64 exactly
    text = json.dumps(trial_to_dict(trial), allow_nan=False)
    path.write_text(text)


def load_trial(path) -> Trial:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trial file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TrialFormatError(f"{path}: not a valid trial document ({exc})") from exc
    if not isinstance(doc, dict):
        raise TrialFormatError(f"{path}: top level must be an object")
    return trial_from_dict(doc)


def load_trials(paths: Sequence) -> list:
    return [load_trial(p) for p in paths]
