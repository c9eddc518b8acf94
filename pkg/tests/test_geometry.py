import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import car, identity_calib, kitti_like_calib, pinhole
from fusiondet.geometry import (
    BevGridSpec,
    Box3D,
    NotVisible,
    OutOfExtent,
    Rect2D,
    box_to_bev_rect,
    box_to_camera_object,
    box_to_corners,
    box_to_image_roi,
    camera_object_to_box,
    lidar_to_image,
    plane_to_lidar,
    rect_to_window,
    wrap_angle,
)
from fusiondet.kitti_io import Calibration, GroundPlane

FULL_GRID = BevGridSpec()
angles = st.floats(-10, 10)


def shoelace(p):
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


class TestTypes:
    def test_box_validation(self):
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 1, 0, 1)
        with pytest.raises(ValueError):
            Box3D(0, 0, float("nan"), 1, 1, 1)

    @given(angles)
    def test_wrap_range(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        k = (a - w) / (2 * math.pi)
        assert abs(k - round(k)) < 1e-9

    def test_wrap_pi(self):
        assert wrap_angle(math.pi) == math.pi
        assert wrap_angle(-math.pi) == math.pi
        assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi).yaw == pytest.approx(math.pi)

    def test_grid_shape(self):
        assert FULL_GRID.shape == (704, 800, 6)
        assert FULL_GRID.slice_height == pytest.approx(0.6)
        with pytest.raises(ValueError):
            BevGridSpec(x_range=(0, 1.05), resolution=0.1)

    def test_rect(self):
        with pytest.raises(ValueError):
            Rect2D(2, 0, 1, 1)


class TestProjection:
    def test_principal_point(self):
        uvd, front = lidar_to_image(np.array([[0.0, 0.0, 10.0]]), identity_calib())
        np.testing.assert_allclose(uvd[0], [50, 50, 10])
        assert front[0]

    def test_behind_flagged(self):
        _, front = lidar_to_image(np.array([[1.0, 2.0, -1.0]]), identity_calib())
        assert not front[0]

    def test_focal_doubling(self):
        pts = np.random.default_rng(0).uniform(-5, 5, (20, 3)) + [0, 0, 20]
        a, _ = lidar_to_image(pts, identity_calib(f=100))
        b, _ = lidar_to_image(pts, identity_calib(f=200))
        np.testing.assert_allclose(b[:, :2] - 50, 2 * (a[:, :2] - 50), rtol=1e-12)

    def test_kitti_axes(self):
        # a point 10 m ahead of the LIDAR lands on the principal point
        c = kitti_like_calib()
        uvd, _ = lidar_to_image(np.array([[10.0, 0, 0]]), c)
        assert uvd[0, 0] == pytest.approx(c.P2[0, 2] + c.P2[0, 3] / 10)
        assert uvd[0, 1] == pytest.approx(c.P2[1, 2])


class TestCorners:
    def test_unit_cube(self):
        c = box_to_corners(Box3D(0, 0, 0, 1, 1, 1))
        assert set(map(tuple, np.abs(c))) == {(0.5, 0.5, 0.5)}
        assert len(set(map(tuple, c))) == 8

    def test_documented_order(self):
        c = box_to_corners(Box3D(0, 0, 0, 4, 2, 1))
        np.testing.assert_allclose(c[:4], [[2, 1, -0.5], [-2, 1, -0.5], [-2, -1, -0.5], [2, -1, -0.5]])
        np.testing.assert_allclose(c[4:, :2], c[:4, :2])
        np.testing.assert_allclose(c[4:, 2], 0.5)

    def test_quarter_turn_swaps_extents(self):
        c = box_to_corners(Box3D(0, 0, 0, 4, 2, 1, math.pi / 2))
        np.testing.assert_allclose(np.ptp(c[:, 0]), 2, atol=1e-12)
        np.testing.assert_allclose(np.ptp(c[:, 1]), 4, atol=1e-12)

    def test_diamond(self):
        s = math.sqrt(2)
        c = box_to_corners(Box3D(0, 0, 0, s, s, 1, math.pi / 4))
        np.testing.assert_allclose(c[:4, :2], [[0, 1], [-1, 0], [0, -1], [1, 0]], atol=1e-12)

    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-3, 3), st.floats(0.1, 10),
           st.floats(0.1, 10), st.floats(0.1, 5), angles)
    def test_centroid_and_area(self, x, y, z, l, w, h, yaw):
        b = Box3D(x, y, z, l, w, h, yaw)
        c = box_to_corners(b)
        np.testing.assert_allclose(c.mean(axis=0), [x, y, z], atol=1e-9)
        assert shoelace(c[:4, :2]) == pytest.approx(l * w, abs=1e-9)


class TestBevRect:
    def test_full_grid_example(self):
        r = box_to_bev_rect(Box3D(35.2, 0, -1, 4, 2, 1.5), FULL_GRID)
        np.testing.assert_allclose(r.as_tuple(), (332, 390, 372, 410), atol=1e-9)

    def test_out_of_extent(self):
        with pytest.raises(OutOfExtent):
            box_to_bev_rect(Box3D(-10, 0, -1, 4, 2, 1.5), FULL_GRID)

    def test_clamped(self):
        r = box_to_bev_rect(Box3D(0.5, 39.5, -1, 4, 2, 1.5), FULL_GRID)
        assert r.u_min == 0 and r.v_max == 800

    def test_quarter_turn(self):
        a = box_to_bev_rect(Box3D(30, 5, -1, 4, 2, 1.5, 0), FULL_GRID)
        b = box_to_bev_rect(Box3D(30, 5, -1, 4, 2, 1.5, math.pi / 2), FULL_GRID)
        assert a.u_max - a.u_min == pytest.approx(b.v_max - b.v_min)
        assert a.v_max - a.v_min == pytest.approx(b.u_max - b.u_min)

    @given(st.floats(5, 65), st.floats(-35, 35), st.floats(0.5, 6), st.floats(0.5, 3), angles)
    def test_matches_corner_oracle(self, x, y, l, w, yaw):
        b = Box3D(x, y, -1, l, w, 1.5, yaw)
        c = box_to_corners(b)
        want = ((c[:, 0].min() - 0) / 0.1, (c[:, 1].min() + 40) / 0.1,
                (c[:, 0].max() - 0) / 0.1, (c[:, 1].max() + 40) / 0.1)
        np.testing.assert_allclose(box_to_bev_rect(b, FULL_GRID).as_tuple(), want, atol=1e-9)


class TestImageRoi:
    def test_centred_ahead(self):
        r = box_to_image_roi(Box3D(0, 0, 10, 2, 2, 2), identity_calib(), (100, 100))
        assert ((r.u_min + r.u_max) / 2, (r.v_min + r.v_max) / 2) == pytest.approx((50, 50))
        # nearest face at depth 9: half-extent 100 * 1 / 9
        assert r.u_max - 50 == pytest.approx(100 / 9)

    def test_behind(self):
        with pytest.raises(NotVisible):
            box_to_image_roi(Box3D(0, 0, -10, 2, 2, 2), identity_calib(), (100, 100))

    def test_clipped(self):
        r = box_to_image_roi(Box3D(0, 0, 3, 2, 2, 2), identity_calib(), (100, 100))
        assert r.as_tuple() == (0, 0, 100, 100)

    @given(st.floats(5, 40), st.floats(-8, 8), st.floats(1, 4), st.floats(1, 2), st.floats(1, 2),
           st.floats(1, 1.5), angles)
    def test_monotone_in_size(self, x, y, l, w, h, k, yaw):
        c = kitti_like_calib()
        small = Box3D(x, y, -0.9, l, w, h, yaw)
        big = Box3D(x, y, -0.9, l * k, w * k, h * k, yaw)
        try:
            a = box_to_image_roi(small, c, (375, 1242))
        except NotVisible:
            return
        b = box_to_image_roi(big, c, (375, 1242))
        assert b.u_min <= a.u_min + 1e-9 and b.v_min <= a.v_min + 1e-9
        assert b.u_max >= a.u_max - 1e-9 and b.v_max >= a.v_max - 1e-9


class TestWindows:
    def test_bev_window(self):
        np.testing.assert_array_equal(rect_to_window(Rect2D(3.2, 1.0, 5.0, 7.9)), [[3, 1, 5, 8]])

    def test_image_window_swaps_axes(self):
        np.testing.assert_array_equal(rect_to_window(Rect2D(10, 2, 20.5, 4), rows_axis="v"),
                                      [[2, 10, 4, 21]])


class TestLabelConversion:
    @settings(deadline=None)
    @given(st.floats(-15, 15), st.floats(5, 60), angles)
    def test_canonical_matches_axis_calib(self, x, z, ry):
        obj = car(x=x, z=z, ry=ry)
        a = camera_object_to_box(obj)
        b = camera_object_to_box(obj, kitti_like_calib())
        np.testing.assert_allclose(a.as_array()[:6], b.as_array()[:6], atol=1e-9)
        assert abs(wrap_angle(a.yaw - b.yaw)) < 1e-9

    def test_heading_convention(self):
        # rotation_y = 0 points along camera +x, i.e. LIDAR -y
        b = camera_object_to_box(car(ry=0.0))
        assert b.yaw == pytest.approx(-math.pi / 2)
        b = camera_object_to_box(car(ry=-math.pi / 2))
        assert b.yaw == pytest.approx(0, abs=1e-12)
        assert b.z == pytest.approx(-1.65 + 0.75)

    def test_roundtrip_through_camera(self):
        c = kitti_like_calib(translation=(0.1, -0.07, -0.3))
        box = Box3D(20, -3, -0.8, 4, 1.7, 1.5, 0.7)
        obj = box_to_camera_object(box, c, class_name="Car", score=0.5)
        back = camera_object_to_box(obj, c)
        np.testing.assert_allclose(back.as_array(), box.as_array(), atol=1e-9)
        assert obj.bbox_height > 0


class TestPlane:
    def test_canonical(self):
        np.testing.assert_allclose(plane_to_lidar(GroundPlane(0, -1, 0, 1.65), None), [0, 0, 1, 1.65])

    def test_with_calib_translation(self):
        # LIDAR mounted 0.3 m above the camera: ground is 1.95 m below the LIDAR
        c = Calibration(pinhole(), np.eye(3), np.hstack([np.array([[0, -1, 0], [0, 0, -1], [1, 0, 0.0]]),
                                                           [[0], [-0.3], [0]]]))
        p = plane_to_lidar(GroundPlane(0, -1, 0, 1.65), c)
        # ground point under the LIDAR satisfies the plane
        assert p @ [0, 0, -1.95, 1] == pytest.approx(0, abs=1e-12)
