import numpy as np
import pytest

from vidgait.calib import (
    CalibConfig, CalibrationError, CameraModel, DegenerateGeometryError, SyncProblem, apply_step, calibrate,
    dlt_camera, huber, initialize, interpolate_mocap, load_problem, objective, orthonormalize, project,
    rodrigues, save_problem, screen_trial, synthetic_problem,
)

IDENT = CameraModel(1000.0, 1000.0, 0.0, 0.0)


def test_project_examples():
    assert np.allclose(project(IDENT, [0, 0, 2.0]), [0, 0])
    assert np.allclose(project(IDENT, [0.1, 0, 2.0]), [50, 0])
    with pytest.raises(CalibrationError):
        project(IDENT, [0, 0, -1.0])


def test_interpolation():
    rng = np.random.default_rng(0)
    mocap = rng.normal(size=(10, 6, 3))
    assert np.array_equal(interpolate_mocap(mocap, 3 / 120), mocap[3])
    assert np.allclose(interpolate_mocap(mocap, 3.5 / 120), 0.5 * (mocap[3] + mocap[4]))
    t = np.arange(50) / 120
    line = np.array([1.0, -2.0, 0.5])[None, None] * t[:, None, None] + np.ones((50, 6, 3))
    for q in rng.uniform(0, 49 / 120, 10):
        assert np.allclose(interpolate_mocap(line, q), 1.0 + np.array([1.0, -2.0, 0.5]) * q, atol=1e-12)
    with pytest.raises(CalibrationError):
        interpolate_mocap(mocap, 1.0)


def test_huber():
    d = 5.0
    assert huber(0.0, d) == 0.0
    assert huber(d, d) == pytest.approx(0.5 * d * d)
    h = 1e-7
    left = (huber(d, d) - huber(d - h, d)) / h
    right = (huber(d + h, d) - huber(d, d)) / h
    assert left == pytest.approx(right, rel=1e-5)
    assert huber(10 * d, d) < 0.5 * (10 * d) ** 2
    with pytest.raises(ValueError):
        huber(1.0, 0.0)


def test_initialize_recovers_camera():
    problem, cam = synthetic_problem(0.0, seed=4)
    est = initialize(problem)
    for a in ("fx", "fy", "cx", "cy"):
        assert getattr(est, a) == pytest.approx(getattr(cam, a), rel=0.01)
    dR = est.rotation @ cam.rotation.T
    angle = np.degrees(np.arccos(np.clip((np.trace(dR) - 1) / 2, -1, 1)))
    assert angle < 1.0


def test_coplanar_points_degenerate():
    rng = np.random.default_rng(1)
    X = np.c_[rng.uniform(-1, 1, (40, 2)), np.zeros(40)] + [0, 0, 5]
    x = project(IDENT, X)
    with pytest.raises(DegenerateGeometryError):
        dlt_camera(X, x)


def test_low_confidence_insufficient():
    problem, _ = synthetic_problem(0.0, seed=0, confidence=0.3)
    with pytest.raises(DegenerateGeometryError, match="insufficient correspondences"):
        initialize(problem)


@pytest.mark.parametrize("offset", [0.1, 0.0, -0.15])
def test_calibrate_noiseless(offset):
    problem, _ = synthetic_problem(offset, seed=2)
    res = calibrate(problem)
    assert abs(res.offset - offset) < 0.005
    assert res.mean_huber < 0.1
    assert res.converged and not res.at_window_boundary


def test_calibrate_noisy_median():
    errs = [abs(calibrate(synthetic_problem(0.1, noise_px=2.0, seed=s)[0]).offset - 0.1) for s in range(5)]
    assert np.median(errs) < 0.015


def test_offset_beyond_window_flagged():
    problem, _ = synthetic_problem(0.4, seed=3)
    res = calibrate(problem, CalibConfig(offset_window_s=0.2))
    assert res.at_window_boundary
    assert abs(res.offset) <= 0.2


def test_too_few_frames():
    problem, _ = synthetic_problem(0.0, seed=0, video_duration=0.5)
    with pytest.raises(CalibrationError):
        calibrate(problem)


def test_objective_gradient_fd():
    rng = np.random.default_rng(7)
    problem, cam = synthetic_problem(0.103, noise_px=3.0, seed=7)
    camera, offset = apply_step(cam, 0.103, np.r_[rng.normal(0, 5, 4), rng.normal(0, 0.01, 3),
                                                   rng.normal(0, 0.02, 3), 0.0])
    frames = problem.usable_frames(0.5)
    val, g = objective(problem, camera, offset, frames, 5.0, with_gradient=True)
    h = np.r_[np.full(4, 1e-4), np.full(6, 1e-7), 1e-7]
    for p in range(11):
        e = np.zeros(11)
        e[p] = h[p]
        fp = objective(problem, *apply_step(camera, offset, e), frames, 5.0)
        fm = objective(problem, *apply_step(camera, offset, -e), frames, 5.0)
        fd = (fp - fm) / (2 * h[p])
        assert abs(fd - g[p]) <= 1e-5 * max(abs(fd), abs(g[p]), 1e-8), p


def test_reorthonormalization_invariance():
    problem, cam = synthetic_problem(0.0, seed=1)
    R = orthonormalize(rodrigues([0.01, -0.02, 0.03]) @ cam.rotation)
    c1 = CameraModel(cam.fx, cam.fy, cam.cx, cam.cy, R, cam.translation)
    c2 = CameraModel(cam.fx, cam.fy, cam.cx, cam.cy, orthonormalize(R), cam.translation)
    X = problem.mocap_3d[::10].reshape(-1, 3)
    assert np.max(np.abs(project(c1, X) - project(c2, X))) < 1e-9


def test_truth_not_worse_than_init():
    problem, cam = synthetic_problem(0.12, seed=5)
    frames = problem.usable_frames(0.5)
    init = initialize(problem)
    assert objective(problem, cam, 0.12, frames, 5.0) <= objective(problem, init, 0.0, frames, 5.0)


def test_problem_roundtrip(tmp_path):
    problem, _ = synthetic_problem(0.05, seed=1)
    save_problem(problem, tmp_path / "p.json")
    back = load_problem(tmp_path / "p.json")
    assert np.array_equal(back.keypoints_2d, problem.keypoints_2d)
    assert back.video_t0 == problem.video_t0
    with pytest.raises(ValueError):
        SyncProblem(np.zeros((5, 4, 3)), problem.mocap_3d)


ACCEPT = dict(mean_huber=9.9, offset=0.150)
OK_DET = {"frac_missing": 0.1, "bbox_swapped": False}


def test_screen_accepts_reference_case():
    d = screen_trial(ACCEPT, OK_DET, 100, True)
    assert d.accepted and d.reasons == ()


@pytest.mark.parametrize("result,det,frames,valid,reasons", [
    (dict(mean_huber=9.9, offset=0.250), OK_DET, 100, True, ("offset",)),
    (ACCEPT, OK_DET, 30, True, ("sync frames",)),
    (dict(mean_huber=10.0, offset=0.1), OK_DET, 100, True, ("huber",)),
    (dict(mean_huber=9.9, offset=0.200), OK_DET, 100, True, ("offset",)),
    (dict(mean_huber=9.9, offset=-0.200), OK_DET, 100, True, ("offset",)),
    (ACCEPT, {"frac_missing": 0.21, "bbox_swapped": False}, 100, True, ("missing detections",)),
    (ACCEPT, {"frac_missing": 0.1, "bbox_swapped": True}, 100, True, ("bbox swap",)),
    (ACCEPT, OK_DET, 100, False, ("events",)),
    (dict(mean_huber=12.0, offset=0.3), {"frac_missing": 0.5, "bbox_swapped": True}, 10, False,
     ("huber", "offset", "missing detections", "bbox swap", "sync frames", "events")),
])
def test_screen_rejections(result, det, frames, valid, reasons):
    d = screen_trial(result, det, frames, valid)
    assert not d.accepted and d.reasons == reasons


def test_screen_inclusive_edges():
    assert screen_trial(ACCEPT, {"frac_missing": 0.20, "bbox_swapped": False}, 31, True).accepted
    assert screen_trial(dict(mean_huber=np.nextafter(10.0, 0), offset=np.nextafter(0.2, 0)), OK_DET, 31,
                        True).accepted
