"""Joint camera calibration and video/mocap time-offset recovery.

The 3D leg joints from motion capture are sampled at ``t_video + offset`` by
linear interpolation, projected through a pinhole camera without
distortion, and compared to 2D keypoints with a robust Huber loss.  The
camera (intrinsics and extrinsics) and the offset are optimized jointly by
damped Gauss-Newton steps on the iteratively reweighted Huber objective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg

from .core import JOINT_INDEX, LEG_JOINTS

N_LEG = len(LEG_JOINTS)


class CalibrationError(RuntimeError):
    pass


class DegenerateGeometryError(CalibrationError):
    pass


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) <= 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    def to_camera(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.asarray(d["rotation"]), np.asarray(d["translation"]))


def project(camera: CameraModel, point_3d) -> np.ndarray:
    """Pinhole projection of one or more world points to pixels."""
    pc = camera.to_camera(point_3d)
    z = pc[..., 2]
    if np.any(z <= 0):
        raise CalibrationError("point at or behind the camera (non-positive depth)")
    u = camera.fx * pc[..., 0] / z + camera.cx
    v = camera.fy * pc[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def huber(residual, delta: float):
    """Huber penalty of a residual magnitude."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    a = np.abs(np.asarray(residual, dtype=float))
    out = np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def _huber_grad_scale(a, delta):
    """rho'(a) / a, the IRLS weight; 1 in the quadratic zone."""
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def _segment(n_samples: int, rate: float, t):
    idx = np.asarray(t, dtype=float) * rate
    if np.any(idx < -1e-9) or np.any(idx > n_samples - 1 + 1e-9):
        raise CalibrationError("interpolation time outside the mocap range")
    # left segment at sample breakpoints
    i = np.clip(np.ceil(idx) - 1, 0, n_samples - 2).astype(int)
    return i, idx - i


def interpolate_mocap(mocap_3d, t, rate: float = 120.0):
    """Joint positions at time(s) ``t`` (seconds on the mocap clock)."""
    mocap_3d = np.asarray(mocap_3d, dtype=float)
    i, frac = _segment(mocap_3d.shape[0], rate, t)
    frac = np.asarray(frac)[..., None, None]
    return mocap_3d[i] * (1.0 - frac) + mocap_3d[i + 1] * frac


def _mocap_slope(mocap_3d, t, rate):
    i, _ = _segment(mocap_3d.shape[0], rate, t)
    return (mocap_3d[i + 1] - mocap_3d[i]) * rate


@dataclass(frozen=True)
class SyncProblem:
    keypoints_2d: np.ndarray  # T_v x 6 x 3: u, v, confidence
    mocap_3d: np.ndarray  # T_m x 6 x 3 meters
    mocap_rate: float = 120.0
    video_fps: float = 30.0
    initial_offset: float = 0.0
    # mocap-clock time of the first video frame before any offset
    video_t0: float = 0.0

    def __post_init__(self):
        kp = np.asarray(self.keypoints_2d, dtype=float)
        mc = np.asarray(self.mocap_3d, dtype=float)
        if kp.ndim != 3 or kp.shape[1:] != (N_LEG, 3):
            raise ValueError(f"keypoints must be T x {N_LEG} x 3, got {kp.shape}")
        if mc.ndim != 3 or mc.shape[1:] != (N_LEG, 3):
            raise ValueError(f"mocap must be T x {N_LEG} x 3, got {mc.shape}")
        if not (self.mocap_rate > 0 and self.video_fps > 0):
            raise ValueError("rates must be positive")
        object.__setattr__(self, "keypoints_2d", kp)
        object.__setattr__(self, "mocap_3d", mc)

    @property
    def video_times(self) -> np.ndarray:
        return self.video_t0 + np.arange(self.keypoints_2d.shape[0]) / self.video_fps

    def usable_frames(self, window: float) -> np.ndarray:
        """Video frames whose mocap sample stays in range for every offset in the window."""
        t = self.video_times
        t_end = (self.mocap_3d.shape[0] - 1) / self.mocap_rate
        return np.flatnonzero((t - window >= 0.0) & (t + window <= t_end))

    def to_dict(self) -> dict:
        return {"keypoints": self.keypoints_2d.tolist(), "mocap": self.mocap_3d.tolist(),
                "mocap_rate": self.mocap_rate, "video_fps": self.video_fps,
                "initial_offset": self.initial_offset, "video_t0": self.video_t0}

    @classmethod
    def from_dict(cls, d) -> "SyncProblem":
        return cls(np.asarray(d["keypoints"]), np.asarray(d["mocap"]), float(d.get("mocap_rate", 120.0)),
                   float(d.get("video_fps", 30.0)), float(d.get("initial_offset", 0.0)),
                   float(d.get("video_t0", 0.0)))


def save_problem(problem: SyncProblem, path) -> None:
    Path(path).write_text(json.dumps(problem.to_dict()))


def load_problem(path) -> SyncProblem:
    return SyncProblem.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class CalibConfig:
    delta_px: float = 5.0
    # scale applied to each damped Gauss-Newton step
    lr: float = 1.0
    max_iters: int = 300
    offset_window_s: float = 0.5
    conf_threshold: float = 0.5
    damping: float = 1e-3
    # coarse offset scan before refinement; None disables it
    scan_step_s: Optional[float] = None


@dataclass(frozen=True)
class SyncResult:
    camera: CameraModel
    offset: float
    mean_huber: float
    converged: bool
    iterations: int
    at_window_boundary: bool = False
    n_frames: int = 0

    def to_dict(self) -> dict:
        return {"camera": self.camera.to_dict(), "offset_s": self.offset, "mean_huber_px": self.mean_huber,
                "converged": self.converged, "iterations": self.iterations,
                "at_window_boundary": self.at_window_boundary, "sync_frames": self.n_frames}


# ---------------------------------------------------------------------------
# initialization


def _hartley(points):
    c = points.mean(axis=0)
    d = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(points.shape[1]) / max(d, 1e-12)
    T = np.eye(points.shape[1] + 1)
    T[:-1, :-1] *= s
    T[:-1, -1] = -s * c
    return T


def dlt_camera(points_3d, points_2d) -> CameraModel:
    """Camera from 2D-3D correspondences by the direct linear transform."""
    X = np.asarray(points_3d, dtype=float).reshape(-1, 3)
    x = np.asarray(points_2d, dtype=float).reshape(-1, 2)
    if X.shape[0] < 6:
        raise DegenerateGeometryError("insufficient correspondences (need at least 6)")
    spread = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if spread[-1] < 1e-6 * spread[0]:
        raise DegenerateGeometryError("degenerate configuration: 3D points are (nearly) coplanar")
    T3, T2 = _hartley(X), _hartley(x)
    Xh = np.c_[X, np.ones(len(X))] @ T3.T
    xh = np.c_[x, np.ones(len(x))] @ T2.T
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xh[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xh[:, 1:2] * Xh
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-10 * s[0]:
        raise DegenerateGeometryError("degenerate configuration: projection matrix not determined")
    P = np.linalg.inv(T2) @ vt[-1].reshape(3, 4) @ T3
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P, M = -P, -M
    K, R = scipy.linalg.rq(M)
    signs = np.sign(np.diag(K))
    K, R = K * signs, signs[:, None] * R
    t = np.linalg.solve(K, P[:, 3])
    K = K / K[2, 2]
    if np.linalg.det(R) < 0:
        raise DegenerateGeometryError("degenerate configuration: reflected solution")
    return CameraModel(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), R, t)


def initialize(problem: SyncProblem, conf_threshold: float = 0.5, offset: float | None = None) -> CameraModel:
    """DLT camera estimate from confident frames at a fixed offset (default: the initial offset)."""
    offset = problem.initial_offset if offset is None else offset
    conf = problem.keypoints_2d[..., 2]
    t = problem.video_times + offset
    t_end = (problem.mocap_3d.shape[0] - 1) / problem.mocap_rate
    good = np.all(conf > conf_threshold, axis=1) & (t >= 0) & (t <= t_end)
    if good.sum() * N_LEG < 6:
        raise DegenerateGeometryError("insufficient correspondences above the confidence threshold")
    X = interpolate_mocap(problem.mocap_3d, t[good], problem.mocap_rate)
    return dlt_camera(X.reshape(-1, 3), problem.keypoints_2d[good, :, :2].reshape(-1, 2))


# ---------------------------------------------------------------------------
# objective


def _skew(a):
    out = np.zeros(a.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -a[..., 2], a[..., 1]
    out[..., 1, 0], out[..., 1, 2] = a[..., 2], -a[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -a[..., 1], a[..., 0]
    return out


def rodrigues(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th = np.linalg.norm(w)
    K = _skew(w)
    if th < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + math.sin(th) / th * K + (1 - math.cos(th)) / th**2 * K @ K


def orthonormalize(R) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        out = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return out


N_PARAMS = 11  # fx, fy, cx, cy, rotation (3), translation (3), offset


def apply_step(camera: CameraModel, offset: float, step) -> tuple:
    step = np.asarray(step, dtype=float)
    R = orthonormalize(rodrigues(step[4:7]) @ camera.rotation)
    cam = CameraModel(camera.fx + step[0], camera.fy + step[1], camera.cx + step[2], camera.cy + step[3],
                      R, camera.translation + step[7:10])
    return cam, offset + step[10]


def residuals(problem: SyncProblem, camera: CameraModel, offset: float, frames: np.ndarray,
              with_jacobian: bool = False):
    """Per-joint pixel residuals (N x 6 x 2) and, optionally, their N x 6 x 2 x 11 Jacobian.

    The Jacobian is taken with respect to the local step of ``apply_step``.
    """
    t = problem.video_times[frames] + offset
    X = interpolate_mocap(problem.mocap_3d, t, problem.mocap_rate)
    pc = camera.to_camera(X)
    z = pc[..., 2]
    if np.any(z <= 0):
        raise CalibrationError("point at or behind the camera (non-positive depth)")
    x, y = pc[..., 0] / z, pc[..., 1] / z
    r = np.stack([camera.fx * x + camera.cx, camera.fy * y + camera.cy], -1) - problem.keypoints_2d[frames, :, :2]
    if not with_jacobian:
        return r
    J = np.zeros(r.shape + (N_PARAMS,))
    J[..., 0, 0] = x
    J[..., 1, 1] = y
    J[..., 0, 2] = 1.0
    J[..., 1, 3] = 1.0
    # d(pixel)/d(camera-frame point)
    dpc = np.zeros(r.shape + (3,))
    dpc[..., 0, 0] = camera.fx / z
    dpc[..., 0, 2] = -camera.fx * x / z
    dpc[..., 1, 1] = camera.fy / z
    dpc[..., 1, 2] = -camera.fy * y / z
    RX = X @ camera.rotation.T
    J[..., 4:7] = np.einsum("...ij,...jk->...ik", dpc, -_skew(RX))
    J[..., 7:10] = dpc
    dX = _mocap_slope(problem.mocap_3d, t, problem.mocap_rate) @ camera.rotation.T
    J[..., 10] = np.einsum("...ij,...j->...i", dpc, dX)
    return r, J


def objective(problem: SyncProblem, camera: CameraModel, offset: float, frames: np.ndarray,
              delta: float, with_gradient: bool = False):
    """Confidence-weighted mean Huber loss of per-joint reprojection error."""
    conf = problem.keypoints_2d[frames, :, 2]
    wsum = conf.sum()
    if with_gradient:
        r, J = residuals(problem, camera, offset, frames, with_jacobian=True)
    else:
        r = residuals(problem, camera, offset, frames)
    a = np.linalg.norm(r, axis=-1)
    val = float((conf * huber(a, delta)).sum() / wsum)
    if not with_gradient:
        return val
    scale = conf * _huber_grad_scale(a, delta) / wsum
    g = np.einsum("nj,nji,njip->p", scale, r, J)
    return val, g


def _gauss_newton_step(problem, camera, offset, frames, delta, damping):
    conf = problem.keypoints_2d[frames, :, 2]
    r, J = residuals(problem, camera, offset, frames, with_jacobian=True)
    a = np.linalg.norm(r, axis=-1)
    w = (conf * _huber_grad_scale(a, delta))[..., None]
    Jf = J.reshape(-1, N_PARAMS)
    wf = np.repeat(w, 2, axis=-1).reshape(-1)
    rf = r.reshape(-1)
    A = Jf.T @ (wf[:, None] * Jf)
    b = Jf.T @ (wf * rf)
    # column scaling keeps the damping meaningful across pixel, radian and second units
    d = np.sqrt(np.maximum(np.diag(A), 1e-300))
    As = A / np.outer(d, d)
    step = -np.linalg.solve(As + damping * np.eye(N_PARAMS), b / d) / d
    return step


def _scan_offset(problem, frames_all, cfg) -> float:
    best, best_val = problem.initial_offset, np.inf
    w = cfg.offset_window_s
    grid = np.arange(-w, w + 1e-12, cfg.scan_step_s)
    for off in grid:
        try:
            cam = initialize(problem, cfg.conf_threshold, offset=float(off))
            val = objective(problem, cam, float(off), frames_all, cfg.delta_px)
        except CalibrationError:
            continue
        if val < best_val:
            best, best_val = float(off), val
    return best


def calibrate(problem: SyncProblem, config: CalibConfig | None = None) -> SyncResult:
    cfg = config or CalibConfig()
    w = cfg.offset_window_s
    frames = problem.usable_frames(w)
    if frames.size < 30:
        raise CalibrationError(f"only {frames.size} video frames overlap the mocap over the offset window")
    offset = problem.initial_offset
    if cfg.scan_step_s:
        offset = _scan_offset(problem, frames, cfg)
    camera = initialize(problem, cfg.conf_threshold, offset=offset)
    val = objective(problem, camera, offset, frames, cfg.delta_px)
    damping = cfg.damping
    history = [val]
    converged = False
    boundary = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        step = cfg.lr * _gauss_newton_step(problem, camera, offset, frames, cfg.delta_px, damping)
        try:
            cam_new, off_new = apply_step(camera, offset, step)
            hit = abs(off_new) > w
            off_new = float(np.clip(off_new, -w, w))
            new_val = objective(problem, cam_new, off_new, frames, cfg.delta_px)
        except (CalibrationError, ValueError):
            new_val, hit = np.inf, False
        if not np.isfinite(val):
            raise CalibrationError("calibration objective diverged")
        if new_val <= val:
            camera, offset, val = cam_new, off_new, new_val
            boundary = hit
            damping = max(damping / 3.0, 1e-12)
        else:
            damping = damping * 4.0
            if damping > 1e12:
                converged = True
                break
        history.append(val)
        if len(history) > 20:
            old = history[-21]
            if old - val <= 1e-8 * max(abs(old), 1e-300):
                converged = True
                break
    return SyncResult(camera=camera, offset=float(offset), mean_huber=float(val), converged=converged,
                      iterations=it, at_window_boundary=bool(boundary or abs(offset) >= w),
                      n_frames=int(frames.size))


# ---------------------------------------------------------------------------
# screening


@dataclass(frozen=True)
class ScreenDecision:
    accepted: bool
    reasons: tuple = ()


HUBER_LIMIT_PX = 10.0
OFFSET_LIMIT_S = 0.200
MISSING_LIMIT = 0.20
MIN_SYNC_FRAMES = 30


def screen_trial(result, detection_stats: dict, sync_frames: int, events_valid: bool) -> ScreenDecision:
    """Trial inclusion rule; every violated rule is listed."""
    mean_huber = result["mean_huber"] if isinstance(result, dict) else result.mean_huber
    offset = result["offset"] if isinstance(result, dict) else result.offset
    reasons = []
    if not mean_huber < HUBER_LIMIT_PX:
        reasons.append("huber")
    if not abs(offset) < OFFSET_LIMIT_S:
        reasons.append("offset")
    if not detection_stats.get("frac_missing", 0.0) <= MISSING_LIMIT:
        reasons.append("missing detections")
    if detection_stats.get("bbox_swapped", False):
        reasons.append("bbox swap")
    if not sync_frames > MIN_SYNC_FRAMES:
        reasons.append("sync frames")
    if not events_valid:
        reasons.append("events")
    return ScreenDecision(accepted=not reasons, reasons=tuple(reasons))


# ---------------------------------------------------------------------------
# synthetic problems


def default_camera(rng: np.random.Generator | None = None) -> CameraModel:
    """Frontal camera 9 m ahead of the walkway looking back along -Z."""
    R0 = np.diag([1.0, -1.0, -1.0])
    C = np.array([0.0, 1.0, 9.0])
    f, cx, cy = 1000.0, 360.0, 240.0
    if rng is not None:
        R0 = rodrigues(rng.normal(0.0, 0.03, 3)) @ R0
        C = C + rng.normal(0.0, [0.2, 0.1, 0.3])
        f = f * float(rng.uniform(0.9, 1.1))
        cx, cy = cx + float(rng.normal(0, 5)), cy + float(rng.normal(0, 5))
    return CameraModel(f, f * 1.0, cx, cy, R0, -R0 @ C)


def leg_mocap(spec=None, rate: float = 120.0, duration: float = 5.0) -> np.ndarray:
    """T x 6 x 3 leg joints (hips, knees, ankles) from the gait generator."""
    from .synth import GaitSpec, generate

    spec = spec or GaitSpec()
    spec = replace(spec, fps=rate, duration_s=duration, noise_sigma_m=0.0)
    trial = generate(spec)
    idx = [JOINT_INDEX[j] for j in LEG_JOINTS]
    return trial.frames[:, idx]


def synthetic_problem(offset: float, noise_px: float = 0.0, seed: int = 0, camera: CameraModel | None = None,
                      video_duration: float = 4.0, margin: float = 0.6, video_fps: float = 30.0,
                      mocap_rate: float = 120.0, confidence: float = 0.9):
    """SyncProblem with known camera and offset; returns (problem, camera)."""
    from .synth import GaitSpec

    rng = np.random.default_rng(seed)
    camera = camera or default_camera(rng)
    spec = GaitSpec(cadence_spm=float(rng.uniform(90, 130)), step_length_m=float(rng.uniform(0.45, 0.7)),
                    first_contact_frac=float(rng.uniform(0, 1)))
    mocap = leg_mocap(spec, mocap_rate, video_duration + 2 * margin + 0.1)
    n_video = int(round(video_duration * video_fps))
    t_video = margin + np.arange(n_video) / video_fps
    X = interpolate_mocap(mocap, t_video + offset, mocap_rate)
    uv = project(camera, X)
    if noise_px > 0:
        uv = uv + rng.normal(0.0, noise_px, uv.shape)
    kp = np.concatenate([uv, np.full(uv.shape[:-1] + (1,), confidence)], axis=-1)
    return SyncProblem(kp, mocap, mocap_rate, video_fps, 0.0, margin), camera


def result_report(result: SyncResult) -> str:
    return json.dumps(result.to_dict(), indent=2, sort_keys=True)
