import hypothesis
import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from partmotion.motion_repr import MotionSequence, default_skeleton

hypothesis.settings.register_profile("fast", max_examples=20, deadline=None)
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def skel():
    return default_skeleton()


def random_motion(rng, T=30, J=13, fps=20.0, tilt=0.4):
    """Smoothly varying random motion with upright-ish root (no singular heading)."""
    yaw = np.cumsum(rng.normal(0, 0.2, T)) + rng.uniform(-np.pi, np.pi)
    tilt_vec = rng.normal(0, tilt / 2, (T, 2))
    root_rot = (Rotation.from_euler("z", yaw) * Rotation.from_rotvec(
        np.c_[tilt_vec, np.zeros(T)])).as_matrix()
    local = Rotation.random(T * (J - 1), random_state=rng).as_matrix().reshape(T, J - 1, 3, 3)
    rots = np.concatenate([root_rot[:, None], local], axis=1)
    root = np.cumsum(rng.normal(0, 0.05, (T, 3)), axis=0) + [rng.uniform(-5, 5), rng.uniform(-5, 5), 0.9]
    return MotionSequence(fps, root, rots)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
