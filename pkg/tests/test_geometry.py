import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sarbbr.geometry import SensorModel, ground_extent_px, height_from_layover, layover_px, project, shadow_px

HS = SensorModel(36.08, 0.455, 0.871)

finite = st.floats(-1e4, 1e4, allow_nan=False)


def test_origin_maps_to_origin():
    assert project(0, 0, 0, HS) == (0.0, 0.0)


def test_project_table_values():
    # sin(36.08 deg) = 0.588923..., computed independently with mpmath
    import mpmath

    mpmath.mp.dps = 30
    s = mpmath.sin(mpmath.radians(mpmath.mpf("36.08")))
    c = mpmath.cos(mpmath.radians(mpmath.mpf("36.08")))
    rg, az = project(10, 8.71, 0, HS)
    assert rg == pytest.approx(float(10 * s / mpmath.mpf("0.455")), abs=1e-12)
    assert rg == pytest.approx(12.943, abs=5e-4)
    assert az == pytest.approx(10.0, abs=1e-12)
    rg, az = project(10, 8.71, 10, HS)
    assert rg == pytest.approx(float((10 * s - 10 * c) / mpmath.mpf("0.455")), abs=1e-12)
    assert rg == pytest.approx(-4.819, abs=5e-4)
    assert az == pytest.approx(10.0, abs=1e-12)


def test_project_rejects_non_finite():
    with pytest.raises(ValueError):
        project(float("nan"), 0, 0, HS)
    with pytest.raises(ValueError):
        project(0, 0, float("inf"), HS)


@pytest.mark.parametrize("theta", [0.0, 90.0, -5.0, float("nan")])
def test_sensor_rejects_bad_angle(theta):
    with pytest.raises(ValueError):
        SensorModel(theta, 1.0, 1.0)


def test_sensor_rejects_bad_spacing():
    with pytest.raises(ValueError):
        SensorModel(30.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        SensorModel(30.0, 1.0, -1.0)


def test_layover_examples():
    assert layover_px(0.0, HS) == 0.0
    assert layover_px(10.0, HS) == pytest.approx(17.763, abs=5e-4)
    assert layover_px(1.0, SensorModel(60.0, 1.0, 1.0)) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        layover_px(-1.0, HS)


def test_height_from_layover_examples():
    assert height_from_layover(5.0, 0.0) == 5.0
    assert height_from_layover(1.0, 60.0) == pytest.approx(2.0, rel=1e-12)
    assert height_from_layover(8.0820, HS) == pytest.approx(10.0, abs=1e-3)
    with pytest.raises(ValueError):
        height_from_layover(-0.1, HS)


def test_shadow_extent_example():
    # h sin(theta) tan(theta) / spacing for a 10 m wall
    assert shadow_px(10.0, HS) == pytest.approx(9.43, abs=5e-3)


@given(finite, finite, st.floats(-500, 500), st.floats(-500, 500))
def test_azimuth_invariance(x, y, z1, z2):
    assert project(x, y, z1, HS)[1] == project(x, y, z2, HS)[1]


@given(finite, finite, st.floats(1e-3, 1e3))
def test_layover_moves_toward_near_range(x, y, z):
    assert project(x, y, z, HS)[0] < project(x, y, 0, HS)[0]


@given(st.floats(0, 1e4), st.floats(1, 89), st.floats(0.1, 5))
def test_layover_round_trip(h, theta, spacing):
    s = SensorModel(theta, spacing, 1.0)
    back = height_from_layover(layover_px(h, s) * spacing, s)
    assert back == pytest.approx(h, rel=1e-9, abs=1e-12)


@given(finite, st.floats(0, 1e3))
def test_ground_extent(x, d):
    a = project(x, 0, 0, HS)[0]
    b = project(x + d, 0, 0, HS)[0]
    assert b - a == pytest.approx(ground_extent_px(d, HS), rel=1e-9, abs=1e-9)


def test_sensor_dict_round_trip():
    s = SensorModel(40.0, 1.2, 2.3, 5.0, -1.0)
    assert SensorModel.from_dict(s.to_dict()) == s


def test_project_broadcasts_arrays():
    rg, az = project(np.array([0.0, 10.0]), np.array([0.0, 8.71]), 0.0, HS)
    assert rg.shape == (2,)
    assert math.isclose(az[1], 10.0)
