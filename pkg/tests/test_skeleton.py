import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from posefit.errors import ConfigError, ContractError
from posefit.skeleton import (
    EVAL_JOINTS,
    NORMALIZED_KNEE_NECK_MM,
    LocalPose3D,
    Pose,
    Skeleton,
    bone_lengths_of,
    calibrate,
    default_skeleton,
    forward_kinematics,
    hat,
    left_jacobians,
    load_skeleton,
    local_pose_from_global,
    rotation_matrices,
)

SK = default_skeleton()
J = SK.joint_count

angles = arrays(np.float64, (J, 3), elements=st.floats(-3.0, 3.0))
shifts = arrays(np.float64, (3,), elements=st.floats(-5000.0, 5000.0))


def chain(lengths=(100.0, 50.0), n=15):
    """Straight chain along +y: joint k hangs off joint k-1."""
    ls = [0.0] + list(lengths) + [10.0] * (n - 1 - len(lengths))
    return Skeleton(
        tuple(f"j{k}" for k in range(n)),
        (-1,) + tuple(range(n - 1)),
        np.array(ls),
        np.tile([0.0, 1.0, 0.0], (n, 1)),
    )


# -- construction ---------------------------------------------------------

def test_default_skeleton_topology():
    assert J == 21
    assert SK.joint_names[0] == "pelvis"
    assert SK.parent[0] == -1
    assert set(EVAL_JOINTS) <= set(SK.joint_names)
    assert np.all(SK.bone_length[1:] > 0)
    np.testing.assert_allclose(np.linalg.norm(SK.rest_direction, axis=1), 1.0, atol=1e-9)


def test_default_skeleton_is_height_normalized():
    assert SK.knee_neck_height() == pytest.approx(NORMALIZED_KNEE_NECK_MM, rel=1e-12)


def _with(index, **changes):
    d = SK.to_dict()
    d["joints"][index] = {**d["joints"][index], **changes}
    return d


@pytest.mark.parametrize("data, message", [
    (_with(1, length_mm=0.0), "positive"),
    (_with(1, rest_direction=[0, 2, 0]), "unit"),
    (_with(1, parent=None), "root"),
    (_with(20, name="l_foot_tip"), "duplicate"),
])
def test_invalid_definitions_rejected(data, message):
    with pytest.raises(ConfigError, match=message):
        Skeleton.from_dict(data)


def test_too_few_joints_rejected():
    sk = chain()
    with pytest.raises(ContractError, match="15"):
        Skeleton(sk.joint_names[:14], sk.parent[:14], sk.bone_length[:14], sk.rest_direction[:14])


def test_parent_must_precede_child():
    sk = chain()
    with pytest.raises(ContractError, match="precede"):
        Skeleton(sk.joint_names, (-1, 2) + sk.parent[2:], sk.bone_length, sk.rest_direction)


def test_serialization_round_trip(tmp_path):
    path = tmp_path / "sk.json"
    path.write_text(json.dumps(SK.to_dict(), sort_keys=True))
    back = load_skeleton(path)
    assert back.joint_names == SK.joint_names
    assert back.parent == SK.parent
    np.testing.assert_array_equal(back.bone_length, SK.bone_length)
    np.testing.assert_array_equal(back.rest_direction, SK.rest_direction)


def test_mapping_form_accepted():
    d = SK.to_dict()
    d["joints"] = {j["name"]: {k: v for k, v in j.items() if k != "name"} for j in d["joints"]}
    assert Skeleton.from_dict(d).joint_names == SK.joint_names


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_skeleton(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_skeleton(bad)


# -- rotations ------------------------------------------------------------

@given(arrays(np.float64, (8, 3), elements=st.floats(-6.0, 6.0)))
def test_rotation_matrices_match_reference(rv):
    np.testing.assert_allclose(rotation_matrices(rv), Rotation.from_rotvec(rv).as_matrix(), atol=1e-12)


def test_rotation_matrices_small_angles():
    rv = np.array([[0.0, 0.0, 0.0], [1e-9, 0.0, 0.0], [0.0, 1e-5, -2e-5]])
    np.testing.assert_allclose(rotation_matrices(rv), Rotation.from_rotvec(rv).as_matrix(), atol=1e-15)


def test_hat_is_cross_product(rng):
    a, b = rng.normal(size=(2, 3))
    np.testing.assert_allclose(hat(a) @ b, np.cross(a, b), atol=1e-15)


def test_left_jacobian_by_differences(rng):
    # exp(theta + eps) ~ exp(hat(J eps)) exp(theta) to first order
    theta = rng.normal(size=(5, 3))
    Jl = left_jacobians(theta)
    R = rotation_matrices(theta)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        dR = (rotation_matrices(theta + e) - rotation_matrices(theta - e)) / (2 * h)
        omega = dR @ np.transpose(R, (0, 2, 1))
        vec = np.stack([omega[:, 2, 1], omega[:, 0, 2], omega[:, 1, 0]], axis=1)
        np.testing.assert_allclose(vec, Jl[:, :, k], atol=1e-8)


# -- forward kinematics ---------------------------------------------------

def test_zero_pose_is_translated_rest_pose():
    P = forward_kinematics(SK, Pose.zero(J, (0.0, 0.0, 3000.0)))
    np.testing.assert_allclose(P, SK.rest_pose() + [0.0, 0.0, 3000.0], atol=1e-12)


def test_hand_rotated_two_bone_chain():
    sk = chain()
    theta = np.zeros((sk.joint_count, 3))
    theta[1] = [math.pi / 2, 0.0, 0.0]
    P = forward_kinematics(sk, Pose(theta, np.zeros(3)))
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    expected_child = np.array([0.0, 100.0, 0.0]) + Rx @ np.array([0.0, 50.0, 0.0])
    np.testing.assert_allclose(P[1], [0.0, 100.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(P[2], expected_child, atol=1e-12)
    np.testing.assert_allclose(P[2], [0.0, 100.0, 50.0], atol=1e-12)


@given(angles, shifts)
def test_fk_conserves_bone_lengths(theta, d):
    P = forward_kinematics(SK, Pose(theta, d))
    np.testing.assert_allclose(bone_lengths_of(SK, P)[1:], SK.bone_length[1:], rtol=1e-9)


@given(angles, shifts, shifts)
def test_fk_translation_equivariant(theta, d, delta):
    a = forward_kinematics(SK, Pose(theta, d + delta))
    b = forward_kinematics(SK, Pose(theta, d)) + delta
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_fk_dimension_mismatch():
    with pytest.raises(ContractError):
        forward_kinematics(SK, Pose.zero(J - 1))


def test_pose_validation():
    with pytest.raises(ContractError):
        Pose(np.full((J, 3), np.nan), np.zeros(3))
    with pytest.raises(ContractError):
        Pose(np.zeros((J, 2)), np.zeros(3))
    p = Pose.zero(J, (1.0, 2.0, 3.0))
    back = Pose.from_vector(p.as_vector(), J)
    np.testing.assert_array_equal(back.theta, p.theta)
    np.testing.assert_array_equal(back.d, p.d)
    assert p.as_vector().shape == (3 * J + 3,)


# -- local pose -----------------------------------------------------------

@given(angles, shifts)
def test_local_pose_root_is_zero_and_matches_fk(theta, d):
    pose = Pose(theta, d)
    local = local_pose_from_global(SK, pose).positions
    assert np.all(local[0] == 0.0)
    P = forward_kinematics(SK, pose)
    np.testing.assert_allclose(local, P - P[0], atol=1e-9)


def test_local_pose_of_zero_pose_is_rest():
    np.testing.assert_allclose(local_pose_from_global(SK, Pose.zero(J, (5.0, 6.0, 7.0))).positions,
                               SK.rest_pose(), atol=1e-9)


def test_local_pose_shape_checked():
    with pytest.raises(ContractError):
        LocalPose3D(np.zeros((J, 2)))


# -- calibration ----------------------------------------------------------

def test_calibrate_identical_predictions_keep_proportions(rng):
    theta = rng.uniform(-0.5, 0.5, (J, 3))
    pred = local_pose_from_global(SK, Pose(theta, np.zeros(3)))
    sk = calibrate([pred] * 5, 1750.0, SK)
    ratio = sk.bone_length[1:] / SK.bone_length[1:]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)
    assert sk.height() == pytest.approx(1750.0, rel=1e-12)


def test_calibrate_scales_knee_neck_with_height():
    rest = LocalPose3D(SK.rest_pose())
    sk = calibrate([rest], 1800.0, SK)
    assert sk.knee_neck_height() == pytest.approx(NORMALIZED_KNEE_NECK_MM * 1800.0 / SK.height(), rel=1e-12)


def test_calibrate_idempotent_on_rest_predictions():
    once = calibrate([LocalPose3D(SK.rest_pose())], 1700.0, SK)
    twice = calibrate([LocalPose3D(once.rest_pose())], 1700.0, once)
    np.testing.assert_allclose(twice.bone_length, once.bone_length, rtol=1e-12)


def test_calibrate_averaging_beats_single_sample():
    height = SK.height()
    wins = 0
    trials = 100
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        noisy = [SK.with_lengths(SK.bone_length + rng.normal(0.0, 10.0, J)).rest_pose() for _ in range(100)]
        many = calibrate(noisy, height, SK)
        one = calibrate(noisy[:1], height, SK)
        err_many = np.abs(many.bone_length - SK.bone_length).mean()
        err_one = np.abs(one.bone_length - SK.bone_length).mean()
        wins += err_many < err_one
    assert wins >= 0.99 * trials


def test_calibrate_errors():
    with pytest.raises(ContractError):
        calibrate([], 1700.0, SK)
    with pytest.raises(ContractError):
        calibrate([LocalPose3D(SK.rest_pose())], 0.0, SK)
    with pytest.raises(ContractError):
        calibrate([np.zeros((J - 1, 3))], 1700.0, SK)


def test_descendants_mask():
    mask = SK.descendants_mask()
    l_sh, l_hand, pelvis = SK.index("l_shoulder"), SK.index("l_hand"), SK.index("pelvis")
    assert mask[l_sh, l_hand] and not mask[l_hand, l_sh]
    assert mask[pelvis, 1:].all() and not mask[:, pelvis].any()
