import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fusiondet.box_codec import (
    RegressionTarget,
    anchor_diagonal,
    decode,
    decode_array,
    encode,
    encode_array,
)
from fusiondet.geometry import Box3D, wrap_angle


def random_boxes(rng, n):
    return np.column_stack([
        rng.uniform(-80, 80, n), rng.uniform(-80, 80, n), rng.uniform(-3, 3, n),
        rng.uniform(0.2, 12, n), rng.uniform(0.2, 5, n), rng.uniform(0.2, 4, n),
        wrap_angle(rng.uniform(-4, 4, n)),
    ])


def test_diagonal():
    assert anchor_diagonal(Box3D(0, 0, 0, 3, 4, 1)) == 5.0
    assert anchor_diagonal(Box3D(0, 0, 0, 3.9, 1.6, 1)) == pytest.approx(4.215447, abs=1e-6)


def test_identity_is_zero():
    a = Box3D(10, 2, -1, 3.9, 1.6, 1.5, 0.3)
    for mode in ("rpn", "dh"):
        np.testing.assert_array_equal(encode(a, a, mode).as_array(), 0)


def test_hand_example():
    a = Box3D(0, 0, -1, 3, 4, 1.5)
    t = encode(a, Box3D(0.5, 0, -0.7, 3, 4, 1.5))
    assert t.dx == pytest.approx(0.1) and t.dz == pytest.approx(0.2)
    assert t.dtheta is None
    assert encode(a, Box3D(0, 0, -1, 3 * math.e, 4, 1.5)).dl == pytest.approx(1.0)


def test_decode_examples():
    a = Box3D(1, 2, -1, 3.9, 1.6, 1.5, math.pi / 2)
    assert decode(a, RegressionTarget(0, 0, 0, 0, 0, 0)) == a
    assert decode(a, RegressionTarget(0, 0, 0, math.log(2), 0, 0)).l == pytest.approx(7.8)


def test_rpn_decode_keeps_anchor_yaw():
    a = np.array([[5, 0, -1, 3.9, 1.6, 1.5, math.pi / 2]])
    out = decode_array(a, [[0.1, -0.2, 0.3, 0.1, 0.0, -0.1]], "rpn")
    assert out[0, 6] == math.pi / 2


def test_unknown_mode():
    with pytest.raises(ValueError):
        encode_array(np.zeros((1, 7)) + 1, np.zeros((1, 7)) + 1, "bogus")


@pytest.mark.parametrize("mode", ["rpn", "dh"])
def test_roundtrip_1e4(mode):
    rng = np.random.default_rng(0 if mode == "rpn" else 1)
    a, g = random_boxes(rng, 10_000), random_boxes(rng, 10_000)
    back = decode_array(a, encode_array(a, g, mode), mode)
    err = np.abs(back[:, :6] - g[:, :6])
    assert err.max() <= 1e-9
    if mode == "dh":
        assert np.abs(wrap_angle(back[:, 6] - g[:, 6])).max() <= 1e-9
    else:
        np.testing.assert_array_equal(back[:, 6], a[:, 6])


def test_encode_after_decode():
    rng = np.random.default_rng(2)
    a = random_boxes(rng, 1000)
    t = rng.normal(0, 0.5, (1000, 7))
    t[:, 6] = wrap_angle(t[:, 6])
    np.testing.assert_allclose(encode_array(a, decode_array(a, t, "dh"), "dh"), t, atol=1e-9)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-5, 5))
def test_translation_equivariance(sx, sy, sz):
    rng = np.random.default_rng(3)
    a, g = random_boxes(rng, 20), random_boxes(rng, 20)
    a[:, :2] /= 4
    g[:, :2] = a[:, :2] + rng.normal(0, 2, (20, 2))
    shift = np.array([sx, sy, sz, 0, 0, 0, 0])
    np.testing.assert_allclose(encode_array(a + shift, g + shift, "dh"), encode_array(a, g, "dh"),
                               atol=1e-12, rtol=0)


def test_dz_scale():
    a = Box3D(0, 0, -1, 4, 2, 1.5)
    a2 = Box3D(0, 0, -1, 4, 2, 3.0)
    g = Box3D(0, 0, -0.4, 4, 2, 1.5)
    assert encode(a2, g).dz == pytest.approx(encode(a, g).dz / 2, abs=1e-15)
