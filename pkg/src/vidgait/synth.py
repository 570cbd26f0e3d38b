"""Deterministic synthetic walking trials with exact ground truth.

The generator drives a 10-joint skeleton from commanded cadence and step
length.  The pelvis advances at constant speed, each foot is stationary in
the world during stance and follows a raised-cosine path during swing, and
the knees are placed by two-link inverse kinematics so segment lengths are
exactly constant.  Ground-truth kinematics are computed from the same
trajectories; velocity channels are forward differences over one frame so
the physical-consistency error vanishes identically.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Mapping

import numpy as np

from .core import JOINT_INDEX, N_JOINTS, N_KIN, EventAnnotations, Trial

# segment proportions relative to standing height
THIGH = 0.245
SHANK = 0.246
ANKLE_HEIGHT = 0.039
FOOT_LENGTH = 0.12
TOE_HEIGHT = 0.01
HIP_WIDTH = 0.11
TORSO = 0.29
SWING_CLEARANCE = 0.04
# fraction of full leg length at maximal stance extension
REACH = 0.97
MAX_EXCURSION = 0.75


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class GaitSpec:
    cadence_spm: float = 110.0
    step_length_m: float = 0.6
    height_m: float = 1.7
    duration_s: float = 5.0
    fps: float = 30.0
    # fractions of the left cycle at which RFO, RFC and LFO occur
    phase_offsets: tuple = (0.12, 0.50, 0.62)
    # left-cycle step time over right-cycle step time
    asymmetry: float = 1.0
    noise_sigma_m: float = 0.0
    seed: int = 0
    # time of the first left contact, as a fraction of the cycle
    first_contact_frac: float = 0.3

    def validate(self):
        rfo, rfc, lfo = self.event_fractions()
        if not (0.0 < rfo < rfc < lfo < 1.0):
            raise InfeasibleSpecError(
                f"event fractions must satisfy 0 < RFO < RFC < LFO < 1, got {rfo, rfc, lfo}"
            )
        if not (20.0 <= self.cadence_spm <= 240.0):
            raise InfeasibleSpecError(f"cadence {self.cadence_spm} outside [20, 240] steps/min")
        if self.noise_sigma_m < 0:
            raise InfeasibleSpecError("noise_sigma_m must be >= 0")
        if self.step_length_m <= 0 or self.duration_s <= 0 or self.fps <= 0:
            raise InfeasibleSpecError("step length, duration and fps must be positive")
        if self.asymmetry <= 0:
            raise InfeasibleSpecError("asymmetry must be positive")
        if not (0.0 <= self.first_contact_frac < 1.0):
            raise InfeasibleSpecError("first_contact_frac must lie in [0, 1)")

    @property
    def cycle_s(self) -> float:
        return 120.0 / self.cadence_spm

    @property
    def speed_mps(self) -> float:
        return self.step_length_m * self.cadence_spm / 60.0

    def event_fractions(self) -> tuple:
        """(RFO, RFC, LFO) cycle fractions after applying the asymmetry."""
        rfo, rfc, lfo = (float(x) for x in self.phase_offsets)
        a = float(self.asymmetry)
        rfc_eff = rfc * 2.0 * a / (1.0 + a)
        return rfo, rfc_eff, lfo + (rfc_eff - rfc)


def _raised_cosine(s):
    return 0.5 * (1.0 - np.cos(np.pi * s))


class _Gait:
    """Analytic trajectories for one spec, evaluable at arbitrary times."""

    def __init__(self, spec: GaitSpec, t_end: float):
        self.spec = spec
        H = spec.height_m
        self.l1, self.l2 = THIGH * H, SHANK * H
        self.T = spec.cycle_s
        self.v = spec.speed_mps
        rfo, rfc, lfo = spec.event_fractions()
        self.fr = {"rfo": rfo, "rfc": rfc, "lfo": lfo}
        t0 = spec.first_contact_frac * self.T
        k = np.arange(-2, int(np.ceil((t_end - t0) / self.T)) + 3)
        lfc = t0 + k * self.T
        self.lfc_all = lfc
        # stance: each foot from its contact to its own foot off
        stance_l = lfo * self.T
        a_l = self.v * stance_l / 2.0
        a_r = a_l + spec.step_length_m - self.v * rfc * self.T
        self.contacts = {"l": lfc, "r": lfc + rfc * self.T}
        self.offs = {"l": lfc + lfo * self.T, "r": lfc + (1.0 + rfo) * self.T}
        self.land = {"l": self.v * self.contacts["l"] + a_l, "r": self.v * self.contacts["r"] + a_r}
        self.clearance = SWING_CLEARANCE * H
        self.excursion = self._max_excursion()
        L = self.l1 + self.l2
        if self.excursion > MAX_EXCURSION * L:
            raise InfeasibleSpecError(
                f"step length {spec.step_length_m} m exceeds leg reach for height {H} m"
            )
        self.ankle_h = ANKLE_HEIGHT * H
        self.hip_h = self.ankle_h + np.sqrt((REACH * L) ** 2 - self.excursion**2)

    def _max_excursion(self) -> float:
        # horizontal ankle-to-hip distance over one cycle, sampled finely
        t = self.contacts["l"][2] + np.linspace(0.0, 2.0 * self.T, 4001)
        worst = 0.0
        for side in ("l", "r"):
            z, _ = self._foot(side, t)
            worst = max(worst, float(np.max(np.abs(z - self.v * t))))
        return worst

    def _foot(self, side, t):
        """Ankle forward position and lift above stance height."""
        t = np.asarray(t, dtype=float)
        c, o, x = self.contacts[side], self.offs[side], self.land[side]
        # index of the most recent contact
        k = np.searchsorted(c, t, side="right") - 1
        z = np.array(x[k], dtype=float)
        lift = np.zeros_like(t)
        swing = t >= o[k]
        if np.any(swing):
            ks = k[swing]
            s = (t[swing] - o[ks]) / (c[ks + 1] - o[ks])
            z[swing] = x[ks] + (x[ks + 1] - x[ks]) * _raised_cosine(s)
            lift[swing] = self.clearance * np.sin(np.pi * s) ** 2
        return z, lift

    def joints(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        H = self.spec.height_m
        out = np.zeros((t.size, N_JOINTS, 3))
        pelvis_z = self.v * t
        out[:, JOINT_INDEX["mid_hip"]] = np.stack([np.zeros_like(t), np.full_like(t, self.hip_h), pelvis_z], 1)
        out[:, JOINT_INDEX["sternum"]] = out[:, JOINT_INDEX["mid_hip"]] + [0.0, TORSO * H, 0.0]
        for side, sign in (("l", 1.0), ("r", -1.0)):
            x_lat = sign * HIP_WIDTH * H / 2.0
            hip = out[:, JOINT_INDEX["mid_hip"]] + [x_lat, 0.0, 0.0]
            az, lift = self._foot(side, t)
            ankle = np.stack([np.full_like(t, x_lat), self.ankle_h + lift, az], 1)
            toe = ankle + [0.0, TOE_HEIGHT * H - self.ankle_h, FOOT_LENGTH * H]
            out[:, JOINT_INDEX["hip_" + side]] = hip
            out[:, JOINT_INDEX["knee_" + side]] = self._knee(hip, ankle)
            out[:, JOINT_INDEX["ankle_" + side]] = ankle
            out[:, JOINT_INDEX["toe_" + side]] = toe
        return out

    def _knee(self, hip, ankle):
        d_vec = ankle[:, 1:] - hip[:, 1:]  # (y, z) sagittal components
        d = np.linalg.norm(d_vec, axis=1)
        if np.any(d >= self.l1 + self.l2):
            raise InfeasibleSpecError("ankle out of reach of the hip")
        u = d_vec / d[:, None]
        p = (self.l1**2 - self.l2**2 + d**2) / (2.0 * d)
        h = np.sqrt(self.l1**2 - p**2)
        n = np.stack([u[:, 1], -u[:, 0]], 1)  # perpendicular with forward (+z) sense
        yz = hip[:, 1:] + p[:, None] * u + h[:, None] * n
        return np.concatenate([hip[:, :1], yz], 1)

    def events(self, t_end: float) -> EventAnnotations:
        fr, T = self.fr, self.T
        lfc = self.lfc_all
        table = {"lfc": lfc, "rfc": lfc + fr["rfc"] * T, "lfo": lfc + fr["lfo"] * T, "rfo": lfc + fr["rfo"] * T}
        keep = {k: v[(v >= 0.0) & (v <= t_end)] for k, v in table.items()}
        return EventAnnotations(**keep)


def sagittal_angles(frames: np.ndarray) -> np.ndarray:
    """Hip and knee flexion (degrees) from T x 10 x 3 frames: columns hip_l, hip_r, knee_l, knee_r."""
    out = np.empty((frames.shape[0], 4))
    for j, side in enumerate(("l", "r")):
        hip = frames[:, JOINT_INDEX["hip_" + side]]
        knee = frames[:, JOINT_INDEX["knee_" + side]]
        ankle = frames[:, JOINT_INDEX["ankle_" + side]]
        thigh = np.arctan2(knee[:, 2] - hip[:, 2], hip[:, 1] - knee[:, 1])
        shank = np.arctan2(ankle[:, 2] - knee[:, 2], knee[:, 1] - ankle[:, 1])
        out[:, j] = np.degrees(thigh)
        out[:, 2 + j] = np.degrees(thigh - shank)
    return out


def kinematics_from_frames(frames: np.ndarray, frames_next: np.ndarray, dt: float) -> np.ndarray:
    """T x 9 kinematics; velocities are forward differences to ``frames_next``."""
    kin = np.empty((frames.shape[0], N_KIN))
    kin[:, :4] = sagittal_angles(frames)
    mid = frames[:, JOINT_INDEX["mid_hip"], 2]
    kin[:, 4] = frames[:, JOINT_INDEX["toe_l"], 2] - mid
    kin[:, 5] = frames[:, JOINT_INDEX["toe_r"], 2] - mid
    kin[:, 6] = (frames_next[:, JOINT_INDEX["mid_hip"], 2] - mid) / dt
    kin[:, 7] = (frames_next[:, JOINT_INDEX["toe_l"], 2] - frames[:, JOINT_INDEX["toe_l"], 2]) / dt
    kin[:, 8] = (frames_next[:, JOINT_INDEX["toe_r"], 2] - frames[:, JOINT_INDEX["toe_r"], 2]) / dt
    return kin


def generate(spec: GaitSpec, trial_id: str = "") -> Trial:
    spec.validate()
    n = int(round(spec.duration_s * spec.fps))
    if n < 2:
        raise InfeasibleSpecError("duration too short for the frame rate")
    dt = 1.0 / spec.fps
    t = np.arange(n) * dt
    t_end = t[-1]
    gait = _Gait(spec, t_end + 2 * dt)
    frames = gait.joints(t)
    kin = kinematics_from_frames(frames, gait.joints(t + dt), dt)
    events = gait.events(t_end)
    if spec.noise_sigma_m > 0:
        rng = np.random.default_rng(spec.seed)
        frames = frames + rng.normal(0.0, spec.noise_sigma_m, size=frames.shape)
    meta = {"spec": _spec_dict(spec), "speed_mps": spec.speed_mps}
    return Trial(
        frames=frames,
        fps=spec.fps,
        subject_height=spec.height_m,
        id=trial_id,
        gt_kinematics=kin,
        gt_events=events,
        meta=meta,
    )


def _spec_dict(spec: GaitSpec) -> dict:
    d = asdict(spec)
    d["phase_offsets"] = list(d["phase_offsets"])
    return d


def spec_from_meta(trial: Trial) -> GaitSpec:
    d = dict(trial.meta["spec"])
    d["phase_offsets"] = tuple(d["phase_offsets"])
    return GaitSpec(**d)


DEFAULT_RANGES = {
    "cadence_spm": (60.0, 140.0),
    "step_length_m": (0.35, 0.7),
    "height_m": (1.4, 1.9),
    "duration_s": (4.0, 8.0),
    "first_contact_frac": (0.05, 0.95),
}


def make_dataset(n: int, ranges: Mapping | None = None, seed: int = 0, base: GaitSpec | None = None,
                 prefix: str = "synth") -> list:
    """``n`` trials with spec fields drawn uniformly from ``ranges``.

    A range may be a ``(lo, hi)`` pair or a fixed scalar.  Fields not in
    ``ranges`` come from ``base``.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    ranges = dict(DEFAULT_RANGES if ranges is None else ranges)
    base = base or GaitSpec()
    fields = set(GaitSpec.__dataclass_fields__)
    for key, rng_val in ranges.items():
        if key not in fields:
            raise ValueError(f"unknown spec field {key!r}")
        if isinstance(rng_val, (tuple, list)):
            lo, hi = rng_val
            if not hi >= lo:
                raise ValueError(f"empty range for {key}: {rng_val}")
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(n):
        values = {}
        for key in sorted(ranges):
            r = ranges[key]
            values[key] = float(rng.uniform(r[0], r[1])) if isinstance(r, (tuple, list)) else r
        values["seed"] = int(rng.integers(0, 2**31 - 1))
        spec = replace(base, **values)
        trials.append(generate(spec, trial_id=f"{prefix}_{seed}_{i:04d}"))
    return trials
