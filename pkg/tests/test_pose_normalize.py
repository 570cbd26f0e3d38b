import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vidgait.core import JOINT_INDEX, Trial
from vidgait.pose_normalize import DegeneratePoseError, canonical_rotation, normalize_frames, normalize_sequence

from conftest import canonical_frame, yaw_matrix

H_L, H_R, MID, STERNUM = (JOINT_INDEX[k] for k in ("hip_l", "hip_r", "mid_hip", "sternum"))


def _check_canonical(joints, R):
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert abs((joints[H_L] - joints[H_R])[2]) < 1e-9
    assert abs((joints[STERNUM] - joints[MID])[0]) < 1e-9
    assert np.allclose(joints[MID], 0.0, atol=1e-12)


def test_canonical_frame_gives_identity(frame):
    assert np.allclose(canonical_rotation(frame), np.eye(3), atol=1e-12)


def test_yaw_30_recovered(frame):
    Ry = yaw_matrix(np.radians(30))
    R = canonical_rotation(frame @ Ry.T)
    assert np.allclose(R, Ry.T, atol=1e-9)


def test_degenerate_hips(frame):
    f = frame.copy()
    f[H_L] = f[H_R]
    with pytest.raises(DegeneratePoseError):
        canonical_rotation(f)
    f = frame.copy()
    f[STERNUM] = f[MID]
    with pytest.raises(DegeneratePoseError):
        canonical_rotation(f)


def test_constant_sequence(frame):
    seq = normalize_frames(np.stack([frame] * 5))
    assert all(np.array_equal(seq.joints[0], seq.joints[i]) for i in range(5))


def test_first_frame_mode_reuses_rotation(oracle_trial):
    seq = normalize_sequence(oracle_trial, mode="first_frame")
    assert np.all(seq.rotations == seq.rotations[0])
    with pytest.raises(ValueError):
        normalize_sequence(oracle_trial, mode="sideways")


def _random_pose(rng):
    f = canonical_frame() + rng.normal(0, 0.03, (10, 3))
    f[MID] = 0.5 * (f[H_L] + f[H_R])
    # arbitrary tilt so both rotations do real work
    ang = rng.uniform(-0.3, 0.3, 3)
    cx, sx = np.cos(ang[0]), np.sin(ang[0])
    cz, sz = np.cos(ang[2]), np.sin(ang[2])
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return f @ (Rz @ Rx @ yaw_matrix(ang[1])).T


@given(st.integers(0, 10_000), st.floats(-np.pi, np.pi), st.floats(-5, 5), st.floats(-5, 5))
def test_yaw_translation_invariance(seed, yaw, cx, cz):
    rng = np.random.default_rng(seed)
    frames = np.stack([_random_pose(rng) for _ in range(3)])
    moved = frames @ yaw_matrix(yaw).T + np.array([cx, 0.3, cz])
    a = normalize_frames(frames)
    b = normalize_frames(moved)
    assert np.max(np.abs(a.joints - b.joints)) < 1e-9
    for i in range(3):
        _check_canonical(a.joints[i], a.rotations[i])


@given(st.integers(0, 10_000))
def test_distances_preserved(seed):
    f = _random_pose(np.random.default_rng(seed))
    out = normalize_frames(f[None]).joints[0]
    d0 = np.linalg.norm(f[:, None] - f[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.max(np.abs(d0 - d1)) < 1e-9


def test_whole_trial_yaw(oracle_trial):
    R = yaw_matrix(1.1)
    moved = Trial(frames=oracle_trial.frames @ R.T + [2.0, 0.0, -3.0], fps=oracle_trial.fps,
                  subject_height=oracle_trial.subject_height)
    a = normalize_sequence(oracle_trial).joints
    b = normalize_sequence(moved).joints
    assert np.max(np.abs(a - b)) < 1e-9
