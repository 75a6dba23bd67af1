"""Rotation helpers, the ``Pose`` type and its manifold coordinates.

Tangent convention (fixed for the whole package)::

    xi = (w, d)            w: rotation, rad (3)   d: translation, m (3)
    retract(T, xi) = (R @ Exp(w), t + d)

i.e. a right (body-frame) perturbation of the rotation and an additive
perturbation of the translation expressed in the target frame.  With this
choice the translation block of a pose marginal is directly the position
covariance in the target frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, with Taylor coefficients near zero."""
    w = np.asarray(w, dtype=float)
    t2 = float(w @ w)
    W = skew(w)
    if t2 < 1e-12:
        a, b = 1.0 - t2 / 6.0, 0.5 - t2 / 24.0
    else:
        t = np.sqrt(t2)
        a, b = np.sin(t) / t, (1.0 - np.cos(t)) / t2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    a = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    if c < -0.99:
        # near pi the antisymmetric part vanishes; use the quaternion route
        return Rotation.from_matrix(R).as_rotvec()
    s = 0.5 * float(np.sqrt(a @ a))
    theta = np.arctan2(s, c)
    k = 0.5 + theta**2 / 12.0 if s < 1e-8 else theta / (2.0 * s)
    return k * a


def so3_right_jacobian_inv(w: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3): d Log(R Exp(dw)) = Jr^-1(Log R) dw."""
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * W + W @ W / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * W + coef * (W @ W)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (SVD projection)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def ypr_from_matrix(R: np.ndarray) -> np.ndarray:
    """Yaw-pitch-roll (Z-Y-X intrinsic) angles ``[yaw, pitch, roll]``."""
    return Rotation.from_matrix(R).as_euler("ZYX")


def matrix_from_ypr(ypr: np.ndarray) -> np.ndarray:
    return Rotation.from_euler("ZYX", np.asarray(ypr, dtype=float)).as_matrix()


def ypr_body_jacobian(ypr: np.ndarray) -> np.ndarray:
    """d(yaw, pitch, roll) / dw for a body-frame perturbation ``R @ Exp(w)``.

    Singular at pitch = +-pi/2 (gimbal lock).
    """
    _, pitch, roll = ypr
    sr, cr = np.sin(roll), np.cos(roll)
    cp, tp = np.cos(pitch), np.tan(pitch)
    return np.array(
        [
            [0.0, sr / cp, cr / cp],
            [0.0, cr, -sr],
            [1.0, sr * tp, cr * tp],
        ]
    )


def wrap_angle(a: np.ndarray) -> np.ndarray:
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera pose in the target frame: ``rotation`` maps camera axes to
    target axes (columns are c1, c2, c3) and ``translation`` is the camera
    position."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        E = R.T @ R
        E.flat[::4] -= 1.0
        if np.sqrt(np.sum(E * E)) > ORTHO_TOL or np.linalg.det(R) <= 0:
            R = orthonormalize(R)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __repr__(self) -> str:
        ypr = np.round(ypr_from_matrix(self.rotation), 6).tolist()
        return f"Pose(ypr={ypr}, t={np.round(self.translation, 6).tolist()})"


def se3_retract(p: Pose, xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=float)
    return Pose(p.rotation @ so3_exp(xi[:3]), p.translation + xi[3:])


def se3_local(p: Pose, q: Pose) -> np.ndarray:
    """Tangent vector ``xi`` with ``se3_retract(p, xi) == q``."""
    w = so3_log(p.rotation.T @ q.rotation)
    return np.concatenate([w, q.translation - p.translation])
