import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from coupledtrack.geometry import CameraIntrinsics, EgoPose, FrameContext, GroundPlane

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

KITTI = CameraIntrinsics(721.5377, 609.5593, 172.854, 1242, 375)


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def make_ctx(frame=0, ego=None, intr=KITTI, height=1.65, dt=0.1):
    return FrameContext(frame, frame * dt, intr, ego or EgoPose.identity(),
                        GroundPlane.from_camera_height(height))


@pytest.fixture
def ctx():
    return make_ctx()
