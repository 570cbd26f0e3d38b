"""Camera-angle invariant canonicalization of joint sequences.

Each pose is centered on the mid hip, yawed about +Y so the hip-to-hip
vector has no forward component (left hip toward +X), then rolled about +Z
so the mid-hip-to-sternum vector has no lateral component (sternum up).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import JOINT_INDEX, Trial

_EPS = 1e-9


class DegeneratePoseError(ValueError):
    pass


@dataclass(frozen=True)
class CanonicalPose:
    joints: np.ndarray  # 10 x 3, mid hip at the origin
    rotation: np.ndarray  # 3 x 3


@dataclass(frozen=True)
class CanonicalSequence:
    joints: np.ndarray  # T x 10 x 3
    rotations: np.ndarray  # T x 3 x 3

    def __len__(self):
        return self.joints.shape[0]

    def __getitem__(self, i) -> CanonicalPose:
        return CanonicalPose(self.joints[i], self.rotations[i])


def _rotations(frames: np.ndarray) -> np.ndarray:
    """Vectorized canonical rotations for a T x 10 x 3 array."""
    hips = frames[:, JOINT_INDEX["hip_l"]] - frames[:, JOINT_INDEX["hip_r"]]
    torso = frames[:, JOINT_INDEX["sternum"]] - frames[:, JOINT_INDEX["mid_hip"]]
    n_h = np.hypot(hips[:, 0], hips[:, 2])
    if np.any(np.linalg.norm(hips, axis=1) < _EPS) or np.any(n_h < _EPS):
        raise DegeneratePoseError("hip joints coincide or are vertically stacked")
    if np.any(np.linalg.norm(torso, axis=1) < _EPS):
        raise DegeneratePoseError("sternum coincides with mid hip")
    c, s = hips[:, 0] / n_h, hips[:, 2] / n_h
    T = frames.shape[0]
    yaw = np.zeros((T, 3, 3))
    yaw[:, 0, 0] = c
    yaw[:, 0, 2] = s
    yaw[:, 1, 1] = 1.0
    yaw[:, 2, 0] = -s
    yaw[:, 2, 2] = c
    u = np.einsum("tij,tj->ti", yaw, torso)
    n_u = np.hypot(u[:, 0], u[:, 1])
    if np.any(n_u < _EPS):
        raise DegeneratePoseError("torso vector has no frontal-plane component")
    c, s = u[:, 1] / n_u, u[:, 0] / n_u
    roll = np.zeros((T, 3, 3))
    roll[:, 0, 0] = c
    roll[:, 0, 1] = -s
    roll[:, 1, 0] = s
    roll[:, 1, 1] = c
    roll[:, 2, 2] = 1.0
    return roll @ yaw


def canonical_rotation(frame) -> np.ndarray:
    """Rotation that canonicalizes one 10 x 3 skeleton frame."""
    frame = np.asarray(frame, dtype=float)
    return _rotations(frame[None])[0]


def normalize_frames(frames, mode: str = "per_frame") -> CanonicalSequence:
    frames = np.asarray(frames, dtype=float)
    if mode not in ("per_frame", "first_frame"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    centered = frames - frames[:, JOINT_INDEX["mid_hip"]][:, None, :]
    if mode == "per_frame":
        rot = _rotations(frames)
    else:
        rot = np.repeat(_rotations(frames[:1]), frames.shape[0], axis=0)
    joints = np.einsum("tij,tkj->tki", rot, centered)
    return CanonicalSequence(joints=joints, rotations=rot)


def normalize_sequence(trial: Trial, mode: str = "per_frame") -> CanonicalSequence:
    return normalize_frames(trial.frames, mode)
