import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from posefit.camera import (
    CameraModel,
    backproject,
    from_vertical_fov,
    load_intrinsics,
    project,
    project_clamped,
)
from posefit.errors import BehindCameraError, ConfigError, ContractError

CAM = CameraModel(1000.0, (500.0, 500.0), (1000, 1000))

pixels = arrays(np.float64, (2,), elements=st.floats(-2000.0, 3000.0))
depths = st.floats(1.0, 1e5)


def test_fov_54_at_720():
    cam = from_vertical_fov(54.0, (1280, 720))
    assert cam.focal_px == pytest.approx(360.0 / math.tan(math.radians(27.0)), rel=1e-15)
    assert cam.principal_point == (640.0, 360.0)


def test_fov_90_unit_focal():
    assert from_vertical_fov(90.0, (2, 2)).focal_px == pytest.approx(1.0, rel=1e-15)


def test_fov_53_13_gives_1000():
    # tan(26.565 deg) = 0.5 to four places
    assert from_vertical_fov(53.13, (1000, 1000)).focal_px == pytest.approx(1000.0, rel=1e-4)


@pytest.mark.parametrize("fov", [0.0, -5.0, 180.0, 200.0])
def test_fov_out_of_range(fov):
    with pytest.raises(ContractError):
        from_vertical_fov(fov, (640, 480))


def test_camera_validation():
    with pytest.raises(ContractError):
        CameraModel(0.0, (1.0, 1.0), (2, 2))
    with pytest.raises(ContractError):
        CameraModel(1.0, (3.0, 1.0), (2, 2))


@pytest.mark.parametrize("z", [1.0, 250.0, 1e6])
def test_optical_axis_hits_principal_point(z):
    np.testing.assert_allclose(project(CAM, [0.0, 0.0, z]), [500.0, 500.0], atol=1e-12)


def test_project_by_formula():
    np.testing.assert_allclose(project(CAM, [100.0, 0.0, 1000.0]), [600.0, 500.0], atol=1e-12)


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project(CAM, [[0.0, 0.0, 10.0], [0.0, 0.0, 0.0]])


def test_project_clamped_flags_instead_of_raising():
    uv, clamped = project_clamped(CAM, [[10.0, 0.0, -5.0], [100.0, 0.0, 1000.0]])
    assert clamped
    np.testing.assert_allclose(uv, [[500.0 + 1000.0 * 10.0, 500.0], [600.0, 500.0]])
    _, clamped = project_clamped(CAM, [[0.0, 0.0, 5.0]])
    assert not clamped


def test_backproject_principal_point():
    np.testing.assert_allclose(backproject(CAM, [500.0, 500.0], 1234.0), [0.0, 0.0, 1234.0], atol=1e-12)


def test_backproject_rejects_non_positive_depth():
    with pytest.raises(ContractError):
        backproject(CAM, [1.0, 2.0], 0.0)


@given(pixels, depths)
def test_round_trip(uv, z):
    np.testing.assert_allclose(project(CAM, backproject(CAM, uv, z)), uv, rtol=0, atol=1e-9)


@given(pixels, depths)
def test_backproject_matches_formula(uv, z):
    expected = [(uv[0] - 500.0) * z / 1000.0, (uv[1] - 500.0) * z / 1000.0, z]
    np.testing.assert_allclose(backproject(CAM, uv, z), expected, rtol=1e-12, atol=1e-9)


@given(arrays(np.float64, (3,), elements=st.floats(-1000.0, 1000.0)), st.floats(1e-3, 1e3))
def test_scale_invariance_along_rays(p, lam):
    p = p.copy()
    p[2] = abs(p[2]) + 10.0
    np.testing.assert_allclose(project(CAM, lam * p), project(CAM, p), rtol=0, atol=1e-9)


def test_intrinsics_file(tmp_path):
    path = tmp_path / "cam.json"
    path.write_text(json.dumps(CAM.to_dict()))
    assert load_intrinsics(path) == CAM
    path.write_text(json.dumps({"focal_px": 1.0}))
    with pytest.raises(ConfigError):
        load_intrinsics(path)
    with pytest.raises(ConfigError):
        load_intrinsics(tmp_path / "none.json")
