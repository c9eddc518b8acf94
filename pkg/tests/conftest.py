import numpy as np
import pytest

from fusiondet.kitti_io import Calibration, GroundTruthObject

# camera = (-y, -z, x) for a LIDAR point (x, y, z)
AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def pinhole(f=100.0, cu=50.0, cv=50.0):
    return np.array([[f, 0, cu, 0], [0, f, cv, 0], [0, 0, 1, 0]], dtype=float)


def identity_calib(f=100.0, cu=50.0, cv=50.0):
    return Calibration(pinhole(f, cu, cv), np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))


def kitti_like_calib(translation=(0.0, 0.0, 0.0), f=721.5377, cu=609.5593, cv=172.854):
    p2 = pinhole(f, cu, cv)
    p2[0, 3] = 44.857
    return Calibration(p2, np.eye(3), np.hstack([AXES, np.reshape(translation, (3, 1))]))


def car(x=0.0, z=20.0, y=1.65, h=1.5, w=1.6, l=3.9, ry=0.0, height_px=50.0, occ=0, trunc=0.0,
        cls="Car", score=None):
    top = 150.0
    return GroundTruthObject(cls, trunc, occ, 0.0, (500.0, top, 560.0, top + height_px),
                             (h, w, l), (x, y, z), ry, score)


@pytest.fixture
def calib():
    return kitti_like_calib()
