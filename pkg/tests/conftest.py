import numpy as np
import pytest
from hypothesis import settings

from vidgait.core import JOINT_INDEX, Trial
from vidgait.synth import GaitSpec, generate

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def canonical_frame():
    """A standing skeleton already in canonical orientation at the origin."""
    f = np.zeros((10, 3))
    f[JOINT_INDEX["mid_hip"]] = [0.0, 0.9, 0.0]
    f[JOINT_INDEX["sternum"]] = [0.0, 1.2, 0.0]
    f[JOINT_INDEX["hip_l"]] = [0.11, 0.9, 0.0]
    f[JOINT_INDEX["hip_r"]] = [-0.11, 0.9, 0.0]
    f[JOINT_INDEX["knee_l"]] = [0.11, 0.5, 0.05]
    f[JOINT_INDEX["knee_r"]] = [-0.11, 0.5, -0.03]
    f[JOINT_INDEX["ankle_l"]] = [0.11, 0.1, 0.0]
    f[JOINT_INDEX["ankle_r"]] = [-0.11, 0.1, 0.02]
    f[JOINT_INDEX["toe_l"]] = [0.11, 0.02, 0.15]
    f[JOINT_INDEX["toe_r"]] = [-0.11, 0.02, 0.14]
    return f


def yaw_matrix(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@pytest.fixture
def frame():
    return canonical_frame()


@pytest.fixture(scope="session")
def oracle_trial():
    return generate(GaitSpec(cadence_spm=110, step_length_m=0.6, duration_s=5.0), trial_id="oracle")


@pytest.fixture
def tiny_trial(frame):
    return Trial(frames=np.stack([frame, frame + [0, 0, 0.05]]), fps=30.0, subject_height=1.7, id="tiny")


def pytest_terminal_summary(terminalreporter):
    from _acceptance import RESULTS, line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(line(n))
