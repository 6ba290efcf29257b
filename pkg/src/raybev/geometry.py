"""Coordinate frames for ray-aligned radar processing.

Conventions used throughout the package:

* Sensor (radar) frame: x forward, y left, z up, origin at the antenna.
  All BEV operations live in the sensor xy plane.
* Spherical coordinates: range ``r = |p|``, azimuth ``theta = atan2(y, x)``,
  elevation ``phi = asin(z / r)``.
* Ray frame of a point: an orthonormal, right-handed basis whose first axis
  points along the ray from the sensor to the point, the second along the
  horizontal tangential direction (increasing azimuth), and the third along
  the elevation tangential direction. The returned matrix has these axes as
  rows, so it maps sensor-frame vectors into ray-frame coordinates.
* Quaternions are scalar-first ``(w, x, y, z)``.
* The BEV augmentation matrix ``m_aug`` expresses an augmented sensor frame
  in terms of the perception (ego) frame: ``p_sensor = m_aug @ p_ego``.

Matrices are plain float64 numpy arrays; rows are basis vectors where a
frame is involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularAugmentation, ZeroQuaternion, ZeroRange

RANGE_EPS = 1e-12
AXIS_EPS = 1e-6
QUAT_EPS = 1e-12
DET_EPS = 1e-9


@dataclass(frozen=True)
class Quaternion:
    """Rotation quaternion, scalar part first."""

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n < QUAT_EPS:
            raise ZeroQuaternion(f"quaternion norm {n:.3e} below {QUAT_EPS:.0e}")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class RayFrame:
    """Orthonormal basis attached to a point, rows in sensor coordinates.

    ``rotation @ v`` maps a sensor-frame vector ``v`` into ray coordinates;
    ``rotation.T`` maps ray coordinates back. ``origin`` is the point the
    frame was built for, in sensor coordinates.
    """

    rotation: np.ndarray
    origin: np.ndarray


def _as_points(points) -> tuple[np.ndarray, bool]:
    """Coerce to an (n, 3) float64 array; report whether input was a single point."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        if p.shape != (3,):
            raise ValueError(f"expected a 3-vector, got shape {p.shape}")
        return p[None, :], True
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array, got shape {p.shape}")
    return p, False


def spherical_from_cartesian(p):
    """Convert sensor-frame points to spherical coordinates.

    Parameters
    ----------
    p : array-like, shape (3,) or (n, 3)
        Point(s) in the sensor frame.

    Returns
    -------
    (r, theta, phi) : tuple of floats or of (n,) arrays
        Range, azimuth in (-pi, pi], elevation in [-pi/2, pi/2].

    Raises
    ------
    ZeroRange
        If any point lies closer than 1e-12 to the origin.
    """
    pts, single = _as_points(p)
    r = np.linalg.norm(pts, axis=1)
    if np.any(r < RANGE_EPS):
        raise ZeroRange("point at the sensor origin has no spherical coordinates")
    theta = np.arctan2(pts[:, 1], pts[:, 0])
    phi = np.arcsin(np.clip(pts[:, 2] / r, -1.0, 1.0))
    if single:
        return float(r[0]), float(theta[0]), float(phi[0])
    return r, theta, phi


def cartesian_from_spherical(r, theta, phi) -> np.ndarray:
    """Inverse of :func:`spherical_from_cartesian`; broadcasts over arrays."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    c = np.cos(phi)
    xyz = np.stack(
        np.broadcast_arrays(r * c * np.cos(theta), r * c * np.sin(theta), r * np.sin(phi)),
        axis=-1,
    )
    return xyz


def ray_frames(points) -> np.ndarray:
    """Build the ray-aligned frame for each point.

    Parameters
    ----------
    points : array-like, shape (n, 3)
        Points in the sensor frame.

    Returns
    -------
    np.ndarray, shape (n, 3, 3)
        Row-stacked orthonormal bases with determinant +1. Row 0 is the
        radial direction, row 1 the horizontal tangential direction and
        row 2 the elevation tangential direction, all in sensor coordinates.

    Raises
    ------
    ZeroRange
        If any point lies closer than 1e-12 to the origin.

    Notes
    -----
    Points within 1e-6 of the vertical axis have no defined azimuth; they
    fall back to the azimuth-zero frame (row 1 fixed to (0, 1, 0), row 2
    completed by a cross product and re-orthonormalized).
    """
    pts, _ = _as_points(points)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    r = np.linalg.norm(pts, axis=1)
    if np.any(r < RANGE_EPS):
        raise ZeroRange("cannot attach a ray frame to a point at the origin")
    rho = np.hypot(x, y)

    frames = np.empty((pts.shape[0], 3, 3), dtype=np.float64)
    frames[:, 0, 0] = x / r
    frames[:, 0, 1] = y / r
    frames[:, 0, 2] = z / r

    # Away from the vertical axis the closed form is exact.
    safe = rho >= AXIS_EPS
    rho_s = np.where(safe, rho, 1.0)
    frames[:, 1, 0] = np.where(safe, -y / rho_s, 0.0)
    frames[:, 1, 1] = np.where(safe, x / rho_s, 1.0)
    frames[:, 1, 2] = 0.0
    frames[:, 2, 0] = np.where(safe, -x * z / (r * rho_s), 0.0)
    frames[:, 2, 1] = np.where(safe, -y * z / (r * rho_s), 0.0)
    frames[:, 2, 2] = np.where(safe, rho_s / r, 0.0)

    if not np.all(safe):
        idx = np.flatnonzero(~safe)
        for i in idx:
            e_r = frames[i, 0]
            e_el = np.cross(e_r, np.array([0.0, 1.0, 0.0]))
            e_el /= np.linalg.norm(e_el)
            e_az = np.cross(e_el, e_r)
            frames[i, 1] = e_az
            frames[i, 2] = e_el
    return frames


def ray_frame_from_point(p) -> RayFrame:
    """Ray-aligned frame for a single sensor-frame point.

    See :func:`ray_frames` for the basis layout and the vertical-axis
    fallback. Raises :class:`ZeroRange` for points at the origin.
    """
    pts, single = _as_points(p)
    if not single:
        raise ValueError("ray_frame_from_point takes a single 3-vector; use ray_frames")
    return RayFrame(rotation=ray_frames(pts)[0], origin=pts[0].copy())


def _quat_array(q) -> np.ndarray:
    if isinstance(q, Quaternion):
        return q.as_array()
    arr = np.asarray(q, dtype=np.float64)
    if arr.shape != (4,):
        raise ValueError(f"expected a quaternion (w, x, y, z), got shape {arr.shape}")
    return arr


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a quaternion (normalized internally).

    Parameters
    ----------
    q : Quaternion or array-like, shape (4,)
        Scalar-first quaternion; need not be unit length.

    Returns
    -------
    np.ndarray, shape (3, 3)

    Raises
    ------
    ZeroQuaternion
        If the quaternion norm is below 1e-12.
    """
    arr = _quat_array(q)
    n = np.linalg.norm(arr)
    if n < QUAT_EPS:
        raise ZeroQuaternion(f"quaternion norm {n:.3e} below {QUAT_EPS:.0e}")
    return unit_quat_rotations((arr / n)[None, :])[0]


def unit_quat_rotations(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for an (n, 4) batch of unit quaternions.

    Inputs are assumed normalized; callers that start from raw network
    outputs must normalize (and handle near-zero norms) first.
    """
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    out[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[:, 0, 1] = 2.0 * (x * y - w * z)
    out[:, 0, 2] = 2.0 * (x * z + w * y)
    out[:, 1, 0] = 2.0 * (x * y + w * z)
    out[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[:, 1, 2] = 2.0 * (y * z - w * x)
    out[:, 2, 0] = 2.0 * (x * z - w * y)
    out[:, 2, 1] = 2.0 * (y * z + w * x)
    out[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def ray_to_ego_linear(frame, m_aug) -> np.ndarray:
    """Linear map taking ray-frame displacements to perception coordinates.

    Parameters
    ----------
    frame : RayFrame or array-like, shape (3, 3)
        Ray frame (rows are basis vectors in sensor coordinates).
    m_aug : array-like, shape (3, 3)
        BEV augmentation matrix (``p_sensor = m_aug @ p_ego``).

    Returns
    -------
    np.ndarray, shape (3, 3)
        ``inv(m_aug) @ frame.T``. The frame inverse uses the transpose
        (orthonormal rows); the augmentation is inverted generally.

    Raises
    ------
    SingularAugmentation
        If ``|det(m_aug)| <= 1e-9``.
    """
    rot = frame.rotation if isinstance(frame, RayFrame) else np.asarray(frame, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ValueError(f"frame rotation must be (3, 3), got {rot.shape}")
    m = np.asarray(m_aug, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"m_aug must be (3, 3), got {m.shape}")
    det = np.linalg.det(m)
    if abs(det) <= DET_EPS:
        raise SingularAugmentation(f"augmentation matrix determinant {det:.3e}")
    return np.linalg.inv(m) @ rot.T


def inverse_aug(m_aug) -> np.ndarray:
    """Inverse of the augmentation matrix, with the same singularity guard."""
    m = np.asarray(m_aug, dtype=np.float64)
    det = np.linalg.det(m)
    if abs(det) <= DET_EPS:
        raise SingularAugmentation(f"augmentation matrix determinant {det:.3e}")
    return np.linalg.inv(m)


def rotation_z(angle: float) -> np.ndarray:
    """Active rotation about +z by ``angle`` radians."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def bev_aug_matrix(yaw: float = 0.0, scale: float = 1.0, flip_y: bool = False) -> np.ndarray:
    """Compose a BEV augmentation: optional y-flip, uniform xy scale, z-rotation.

    Applied to ego coordinates in that order, i.e.
    ``m = rotation_z(yaw) @ diag(scale, +-scale, 1)``.
    """
    sy = -scale if flip_y else scale
    return rotation_z(yaw) @ np.diag([scale, sy, 1.0])
