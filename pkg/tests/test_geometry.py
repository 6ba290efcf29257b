"""Geometry tests: ray frames, spherical transforms, quaternions, augmentation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raybev.errors import SingularAugmentation, ZeroQuaternion, ZeroRange
from raybev.geometry import (
    bev_aug_matrix,
    cartesian_from_spherical,
    inverse_aug,
    quat_to_rotation,
    ray_frame_from_point,
    ray_frames,
    ray_to_ego_linear,
    rotation_z,
    spherical_from_cartesian,
)


# Frames worked out by hand from the row formulas.
HAND_FRAMES = [
    # on the x axis: the frame is the identity
    (np.array([1.0, 0.0, 0.0]), np.eye(3)),
    # on the y axis at range 2
    (np.array([0.0, 2.0, 0.0]), np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])),
    # the 3-4-5 point in the xz plane
    (np.array([3.0, 0.0, 4.0]), np.array([[0.6, 0.0, 0.8], [0.0, 1.0, 0.0], [-0.8, 0.0, 0.6]])),
]


def test_hand_frames_exact():
    for point, expected in HAND_FRAMES:
        frame = ray_frames(point[None, :])[0]
        assert np.max(np.abs(frame - expected)) < 1e-12


def test_zenith_fallback_frame():
    """Points straight above the sensor have no azimuth; a fixed convention applies."""
    frame = ray_frames(np.array([[0.0, 0.0, 5.0]]))[0]
    expected = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    assert np.max(np.abs(frame - expected)) < 1e-12
    assert abs(np.linalg.det(frame) - 1.0) < 1e-12


def test_frame_first_row_is_ray_direction():
    rng = np.random.default_rng(0)
    pts = rng.normal(scale=20.0, size=(500, 3))
    frames = ray_frames(pts)
    rays = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    assert np.max(np.abs(frames[:, 0, :] - rays)) < 1e-12


def test_frames_orthonormal_right_handed():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-80.0, 80.0, size=(2000, 3))
    pts = pts[np.linalg.norm(pts, axis=1) > 1e-6]
    frames = ray_frames(pts)
    gram = frames @ np.transpose(frames, (0, 2, 1))
    assert np.max(np.abs(gram - np.eye(3))) < 1e-9
    assert np.max(np.abs(np.linalg.det(frames) - 1.0)) < 1e-9


def test_ray_frame_from_point_matches_batch():
    p = np.array([4.0, -2.0, 1.5])
    single = ray_frame_from_point(p)
    batch = ray_frames(p[None, :])[0]
    assert np.array_equal(single.rotation, batch)
    assert np.array_equal(single.origin, p)


def test_ray_frames_zero_range_raises():
    with pytest.raises(ZeroRange):
        ray_frames(np.array([[0.0, 0.0, 0.0]]))


def test_spherical_hand_example():
    r, theta, phi = spherical_from_cartesian(np.array([1.0, 1.0, 1.0]))
    assert abs(r - np.sqrt(3.0)) < 1e-12
    assert abs(theta - np.pi / 4) < 1e-12
    assert abs(phi - np.arcsin(1.0 / np.sqrt(3.0))) < 1e-12


def test_spherical_round_trip():
    rng = np.random.default_rng(2)
    pts = rng.normal(scale=30.0, size=(300, 3))
    r, theta, phi = spherical_from_cartesian(pts)
    back = cartesian_from_spherical(r, theta, phi)
    assert np.max(np.abs(back - pts)) < 1e-9


def test_spherical_origin_raises():
    with pytest.raises(ZeroRange):
        spherical_from_cartesian(np.zeros(3))


def test_spherical_directions_match_frame_rows():
    """Perturbing (r, theta, phi) moves the point along the frame rows."""
    rng = np.random.default_rng(3)
    n = 100
    r = rng.uniform(1.0, 50.0, size=n)
    theta = rng.uniform(-np.pi, np.pi, size=n)
    phi = rng.uniform(-1.3, 1.3, size=n)
    pts = cartesian_from_spherical(r, theta, phi)
    frames = ray_frames(pts)
    eps = 1e-6

    def central(dr=0.0, dt=0.0, dp=0.0):
        hi = cartesian_from_spherical(r + dr, theta + dt, phi + dp)
        lo = cartesian_from_spherical(r - dr, theta - dt, phi - dp)
        return (hi - lo) / (2.0 * eps)

    rho = r * np.cos(phi)
    assert np.max(np.abs(central(dr=eps) - frames[:, 0, :])) < 1e-7
    assert np.max(np.abs(central(dt=eps) / rho[:, None] - frames[:, 1, :])) < 1e-7
    assert np.max(np.abs(central(dp=eps) / r[:, None] - frames[:, 2, :])) < 1e-7


def test_quat_identity():
    assert np.array_equal(quat_to_rotation(np.array([1.0, 0.0, 0.0, 0.0])), np.eye(3))


def test_quat_z_quarter_turn():
    s = np.sqrt(0.5)
    rot = quat_to_rotation(np.array([s, 0.0, 0.0, s]))
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.max(np.abs(rot - expected)) < 1e-12


def test_quat_x_half_turn():
    rot = quat_to_rotation(np.array([0.0, 1.0, 0.0, 0.0]))
    assert np.max(np.abs(rot - np.diag([1.0, -1.0, -1.0]))) < 1e-12


def test_quat_scale_invariant():
    q = np.array([0.3, -0.2, 0.9, 0.1])
    a = quat_to_rotation(q)
    b = quat_to_rotation(5.0 * q)
    assert np.max(np.abs(a - b)) < 1e-12


def test_quat_zero_raises():
    with pytest.raises(ZeroQuaternion):
        quat_to_rotation(np.zeros(4))


def test_quat_rotation_is_orthonormal():
    rng = np.random.default_rng(4)
    for _ in range(50):
        q = rng.normal(size=4)
        rot = quat_to_rotation(q)
        assert np.max(np.abs(rot @ rot.T - np.eye(3))) < 1e-12
        assert abs(np.linalg.det(rot) - 1.0) < 1e-12


def test_rotation_z_quarter_turn():
    rot = rotation_z(np.pi / 2)
    assert np.max(np.abs(rot - np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))) < 1e-12


def test_bev_aug_matrix_composition():
    m = bev_aug_matrix(yaw=np.pi / 2, scale=2.0, flip_y=True)
    expected = rotation_z(np.pi / 2) @ np.diag([2.0, -2.0, 1.0])
    assert np.max(np.abs(m - expected)) < 1e-12


def test_inverse_aug():
    m = bev_aug_matrix(yaw=0.7, scale=1.3, flip_y=True)
    assert np.max(np.abs(inverse_aug(m) @ m - np.eye(3))) < 1e-12


def test_ray_to_ego_linear_matches_product():
    p = np.array([6.0, -3.0, 2.0])
    frame = ray_frames(p[None, :])[0]
    m = bev_aug_matrix(yaw=0.4, scale=1.1)
    a = ray_to_ego_linear(frame, m)
    assert np.max(np.abs(a - np.linalg.inv(m) @ frame.T)) < 1e-12


def test_ray_to_ego_linear_singular_raises():
    p = np.array([6.0, -3.0, 2.0])
    frame = ray_frames(p[None, :])[0]
    with pytest.raises(SingularAugmentation):
        ray_to_ego_linear(frame, np.zeros((3, 3)))


@settings(max_examples=80, deadline=None)
@given(
    x=st.floats(-100.0, 100.0),
    y=st.floats(-100.0, 100.0),
    z=st.floats(-100.0, 100.0),
)
def test_frame_properties_hypothesis(x, y, z):
    p = np.array([x, y, z])
    r = np.linalg.norm(p)
    if r < 1e-6:
        return
    frame = ray_frames(p[None, :])[0]
    assert np.max(np.abs(frame @ frame.T - np.eye(3))) < 1e-9
    assert abs(np.linalg.det(frame) - 1.0) < 1e-9
    assert np.max(np.abs(frame[0] - p / r)) < 1e-9
