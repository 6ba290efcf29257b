"""Gaussian primitives predicted per radar point.

A primitive is parameterized in the ray frame of its source point by a
bounded mean offset, three axis scales, an orientation quaternion, an
opacity and a free feature vector. Raw network outputs are squashed into
valid ranges by `activate`:

* offset: ``d_max * tanh(raw)`` per component (so ``|offset| < d_max``),
* scale: ``min(softplus(raw) + s_min, s_max)`` (positive, bounded),
* orientation: quaternion normalized to unit length; a near-zero raw
  quaternion falls back to the identity rotation,
* opacity: ``sigmoid(raw)``,
* feature: passed through unchanged.

The ray-frame covariance is ``R S S^T R^T`` with ``S = diag(scale)`` and
``R`` the quaternion's rotation matrix. Unification into the perception
frame conjugates with ``A = inv(m_aug) @ frame.T`` and adds ``eps_reg * I``;
the BEV marginal keeps the xy block.

Batch entry points (`activate_arrays`, `covariance_parts`,
`ego_transform_arrays`, `marginalize_arrays`) carry the actual math; the
dataclass API wraps them one primitive at a time so both paths share one
formula.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .geometry import (
    Quaternion,
    RayFrame,
    inverse_aug,
    ray_frames,
    unit_quat_rotations,
)

QUAT_FALLBACK_EPS = 1e-12


@dataclass(frozen=True)
class ActivationLimits:
    """Bounds applied when squashing raw attributes (meters where spatial)."""

    d_max: float = 1.5
    s_min: float = 0.05
    s_max: float = 8.0


@dataclass(frozen=True)
class RawAttributes:
    """Unactivated per-point head outputs."""

    offset: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity_logit: float
    feature: np.ndarray

    @staticmethod
    def from_vector(vec, feature_dim: int) -> "RawAttributes":
        """Split a flat head output of length 11 + feature_dim."""
        v = np.asarray(vec, dtype=np.float64)
        if v.shape != (11 + feature_dim,):
            raise ShapeMismatch(f"expected length {11 + feature_dim}, got shape {v.shape}")
        return RawAttributes(
            offset=v[0:3].copy(),
            scale=v[3:6].copy(),
            quat=v[6:10].copy(),
            opacity_logit=float(v[10]),
            feature=v[11:].copy(),
        )


@dataclass(frozen=True)
class GaussianRay:
    """Activated primitive in the ray frame of its source point."""

    delta_mu: np.ndarray
    scale: np.ndarray
    quat: Quaternion
    opacity: float
    feature: np.ndarray


@dataclass(frozen=True)
class EgoGaussian:
    """Primitive unified into the perception frame."""

    mean: np.ndarray
    covariance: np.ndarray
    opacity: float
    feature: np.ndarray


@dataclass(frozen=True)
class Bev2DGaussian:
    """xy marginal of an ego-frame primitive."""

    mean_xy: np.ndarray
    cov2: np.ndarray
    opacity: float
    feature: np.ndarray


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


@dataclass
class Activation:
    """Activated attribute arrays plus the caches the backward pass needs."""

    delta_mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity: np.ndarray
    feature: np.ndarray
    tanh_offset: np.ndarray
    cap_mask: np.ndarray
    quat_norm: np.ndarray
    quat_fallback: np.ndarray
    offsets_enabled: bool = True


def activate_arrays(
    offset_raw: np.ndarray,
    scale_raw: np.ndarray,
    quat_raw: np.ndarray,
    opacity_logit: np.ndarray,
    feature: np.ndarray,
    limits: ActivationLimits,
    offsets_enabled: bool = True,
) -> Activation:
    """Squash raw attribute arrays for a batch of n primitives.

    Args:
        offset_raw: (n, 3) unbounded mean offsets.
        scale_raw: (n, 3) unbounded scales.
        quat_raw: (n, 4) unnormalized scalar-first quaternions.
        opacity_logit: (n,) opacity logits.
        feature: (n, c) pass-through features.
        limits: activation bounds.
        offsets_enabled: when False the offsets are forced to zero (and the
            backward pass drops their gradient).

    Returns:
        Activation with per-primitive arrays and backward caches.
    """
    offset_raw = np.asarray(offset_raw, dtype=np.float64)
    t = np.tanh(offset_raw)
    delta_mu = limits.d_max * t if offsets_enabled else np.zeros_like(t)

    s_unc = softplus(scale_raw) + limits.s_min
    cap_mask = s_unc < limits.s_max
    scale = np.where(cap_mask, s_unc, limits.s_max)

    quat_raw = np.asarray(quat_raw, dtype=np.float64)
    qnorm = np.linalg.norm(quat_raw, axis=1)
    fallback = qnorm < QUAT_FALLBACK_EPS
    safe_norm = np.where(fallback, 1.0, qnorm)
    quat = quat_raw / safe_norm[:, None]
    if np.any(fallback):
        quat[fallback] = np.array([1.0, 0.0, 0.0, 0.0])

    return Activation(
        delta_mu=delta_mu,
        scale=scale,
        quat=quat,
        opacity=sigmoid(opacity_logit),
        feature=np.asarray(feature, dtype=np.float64),
        tanh_offset=t,
        cap_mask=cap_mask,
        quat_norm=qnorm,
        quat_fallback=fallback,
        offsets_enabled=offsets_enabled,
    )


@dataclass
class CovarianceParts:
    rotation: np.ndarray
    m: np.ndarray
    sigma: np.ndarray


def covariance_parts(scale: np.ndarray, quat_unit: np.ndarray) -> CovarianceParts:
    """Covariances ``R S S^T R^T`` for (n, 3) scales and (n, 4) unit quats.

    Returns the rotation matrices and ``M = R @ diag(scale)`` alongside the
    covariances; the backward pass reuses both.
    """
    rot = unit_quat_rotations(np.asarray(quat_unit, dtype=np.float64))
    m = rot * np.asarray(scale, dtype=np.float64)[:, None, :]
    sigma = m @ m.transpose(0, 2, 1)
    return CovarianceParts(rotation=rot, m=m, sigma=sigma)


@dataclass
class EgoArrays:
    mean: np.ndarray
    cov: np.ndarray
    a: np.ndarray
    p_ego: np.ndarray


def ego_transform_arrays(
    points: np.ndarray,
    delta_mu: np.ndarray,
    sigma: np.ndarray,
    frames: np.ndarray | None,
    m_aug: np.ndarray,
    eps_reg: float = 1e-6,
    ray_centric: bool = True,
) -> EgoArrays:
    """Unify a batch of primitives into the perception frame.

    In ray-centric operation ``A = inv(m_aug) @ frame.T`` rotates both the
    offset and the covariance out of each point's ray frame. In ego-centric
    operation the attributes are taken as already expressed in the
    perception frame (A = I) and only the source position is mapped through
    ``inv(m_aug)``.

    Args:
        points: (n, 3) source positions in the (augmented) sensor frame.
        delta_mu: (n, 3) activated offsets.
        sigma: (n, 3, 3) activated covariances.
        frames: (n, 3, 3) ray frames; required when ray_centric, ignored otherwise.
        m_aug: (3, 3) augmentation matrix.
        eps_reg: diagonal regularizer added after conjugation.
        ray_centric: frame mode switch.

    Returns:
        EgoArrays with means, regularized covariances, the per-primitive
        linear maps A and the mapped source positions.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    minv = inverse_aug(m_aug)
    p_ego = points @ minv.T
    if ray_centric:
        if frames is None:
            frames = ray_frames(points)
        a = np.einsum("ij,njk->nik", minv, frames.transpose(0, 2, 1))
    else:
        a = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    mean = p_ego + np.einsum("nij,nj->ni", a, delta_mu)
    cov = a @ sigma @ a.transpose(0, 2, 1)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    cov[:, np.arange(3), np.arange(3)] += eps_reg
    return EgoArrays(mean=mean, cov=cov, a=a, p_ego=p_ego)


def marginalize_arrays(mean: np.ndarray, cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """xy means and 2x2 covariance blocks of a batch of ego primitives."""
    return mean[:, :2].copy(), cov[:, :2, :2].copy()


def activate(raw: RawAttributes, limits: ActivationLimits | None = None) -> GaussianRay:
    """Activate a single primitive's raw attributes."""
    limits = limits or ActivationLimits()
    act = activate_arrays(
        raw.offset[None, :],
        raw.scale[None, :],
        raw.quat[None, :],
        np.array([raw.opacity_logit]),
        raw.feature[None, :],
        limits,
    )
    q = act.quat[0]
    return GaussianRay(
        delta_mu=act.delta_mu[0],
        scale=act.scale[0],
        quat=Quaternion(q[0], q[1], q[2], q[3]),
        opacity=float(act.opacity[0]),
        feature=act.feature[0],
    )


def ray_covariance(scale, quat) -> np.ndarray:
    """Ray-frame covariance ``R S S^T R^T`` of one primitive.

    Accepts a Quaternion or a length-4 array; the quaternion is normalized
    here (raising on zero norm, see `geometry.quat_to_rotation`).
    """
    if isinstance(quat, Quaternion):
        quat = quat.as_array()
    q = Quaternion(*np.asarray(quat, dtype=np.float64)).normalized()
    return covariance_parts(
        np.asarray(scale, dtype=np.float64)[None, :], q.as_array()[None, :]
    ).sigma[0]


def to_ego(
    g: GaussianRay,
    p_radar,
    frame: RayFrame | np.ndarray,
    m_aug,
    eps_reg: float = 1e-6,
) -> EgoGaussian:
    """Unify one ray-frame primitive into the perception frame.

    Args:
        g: activated primitive.
        p_radar: (3,) source point in the (augmented) sensor frame.
        frame: the point's ray frame (RayFrame or (3, 3) row matrix).
        m_aug: (3, 3) augmentation matrix, ``p_sensor = m_aug @ p_ego``.
        eps_reg: diagonal regularizer.

    Returns:
        EgoGaussian with ``mean = inv(m_aug) @ p_radar + A @ delta_mu`` and
        ``cov = A Sigma_ray A^T + eps_reg * I`` for ``A = inv(m_aug) @ frame.T``.
    """
    rot = frame.rotation if isinstance(frame, RayFrame) else np.asarray(frame, dtype=np.float64)
    sigma = ray_covariance(g.scale, g.quat)
    out = ego_transform_arrays(
        np.asarray(p_radar, dtype=np.float64)[None, :],
        np.asarray(g.delta_mu, dtype=np.float64)[None, :],
        sigma[None, :, :],
        rot[None, :, :],
        np.asarray(m_aug, dtype=np.float64),
        eps_reg=eps_reg,
        ray_centric=True,
    )
    return EgoGaussian(
        mean=out.mean[0], covariance=out.cov[0], opacity=g.opacity, feature=np.asarray(g.feature)
    )


def marginalize_bev(g: EgoGaussian) -> Bev2DGaussian:
    """Drop the z dimension of an ego-frame primitive."""
    mean_xy, cov2 = marginalize_arrays(g.mean[None, :], g.covariance[None, :, :])
    return Bev2DGaussian(
        mean_xy=mean_xy[0], cov2=cov2[0], opacity=g.opacity, feature=np.asarray(g.feature)
    )
