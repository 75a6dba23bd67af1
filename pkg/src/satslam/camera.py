"""Pinhole camera: projection, Jacobians, visibility and synthetic measurements.

A landmark ``l`` (target frame) is expressed in camera axes as
``R.T @ (l - t)`` for a pose ``(R, t)``; the boresight is the camera z axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from satslam.geometry import Pose, skew

Z_MIN = 0.01  # m


class BehindCameraError(ValueError):
    """Point at or behind the image plane; not observable from this pose."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float
    sigma_v: np.ndarray = field(default_factory=lambda: np.eye(2))

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")
        S = np.array(self.sigma_v, dtype=float).reshape(2, 2)
        if not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() < -1e-15:
            raise ValueError("sigma_v must be symmetric PSD")
        S.flags.writeable = False
        object.__setattr__(self, "sigma_v", S)

    @classmethod
    def default(cls, sigma: float = 2.0) -> "Intrinsics":
        """512x512 camera, f = 256 px, principal point at the centre."""
        return cls(256.0, 256.0, 256.0, 256.0, 512.0, 512.0, sigma**2 * np.eye(2))

    def with_sigma(self, sigma_v: np.ndarray) -> "Intrinsics":
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height, sigma_v)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "sigma_v": self.sigma_v.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.array(d["sigma_v"]))


class Landmark(NamedTuple):
    id: int
    position: np.ndarray


class PixelMeasurement(NamedTuple):
    pose_index: int
    landmark_id: int
    uv: np.ndarray


def world_to_camera(p: Pose, l: np.ndarray) -> np.ndarray:
    return p.rotation.T @ (np.asarray(l, dtype=float) - p.translation)


def _pixel(lc: np.ndarray, k: Intrinsics) -> np.ndarray:
    return np.array([k.fx * lc[0] / lc[2] + k.cx, k.fy * lc[1] / lc[2] + k.cy])


def project(p: Pose, l: np.ndarray, k: Intrinsics) -> np.ndarray:
    lc = world_to_camera(p, l)
    if lc[2] <= Z_MIN:
        raise BehindCameraError(f"depth {lc[2]:.3g} m <= {Z_MIN} m")
    return _pixel(lc, k)


def project_jacobians(p: Pose, l: np.ndarray, k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dz/dxi, dz/dl)`` with xi the pose tangent ``(w, d)``."""
    lc = world_to_camera(p, l)
    x, y, z = lc
    if z <= Z_MIN:
        raise BehindCameraError(f"depth {z:.3g} m <= {Z_MIN} m")
    dpi = np.array(
        [[k.fx / z, 0.0, -k.fx * x / z**2], [0.0, k.fy / z, -k.fy * y / z**2]]
    )
    Rt = p.rotation.T
    J_pose = np.hstack([dpi @ skew(lc), -dpi @ Rt])
    return J_pose, dpi @ Rt


def project_batch(
    R: np.ndarray, t: np.ndarray, l: np.ndarray, f: np.ndarray, c: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projection of N pose/landmark pairs.

    Args:
        R: (N, 3, 3) rotations, t: (N, 3) positions, l: (N, 3) landmarks,
        f: (N, 2) focal lengths, c: (N, 2) principal points.

    Returns:
        uv (N, 2), depth (N,), J_pose (N, 2, 6), J_land (N, 2, 3). Rows with
        depth <= Z_MIN contain garbage and must be masked by the caller.
    """
    Rt = np.swapaxes(R, 1, 2)
    lc = (Rt @ (l - t)[:, :, None])[:, :, 0]
    z = lc[:, 2]
    zs = np.where(np.abs(z) > 1e-300, z, 1.0)
    uv = f * lc[:, :2] / zs[:, None] + c
    n = len(z)
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = f[:, 0] / zs
    dpi[:, 1, 1] = f[:, 1] / zs
    dpi[:, 0, 2] = -f[:, 0] * lc[:, 0] / zs**2
    dpi[:, 1, 2] = -f[:, 1] * lc[:, 1] / zs**2
    S = np.zeros((n, 3, 3))
    S[:, 0, 1], S[:, 0, 2], S[:, 1, 2] = -lc[:, 2], lc[:, 1], -lc[:, 0]
    S[:, 1, 0], S[:, 2, 0], S[:, 2, 1] = lc[:, 2], -lc[:, 1], lc[:, 0]
    J_land = dpi @ Rt
    J_pose = np.concatenate([dpi @ S, -J_land], axis=2)
    return uv, z, J_pose, J_land


def visible(p: Pose, l: np.ndarray, k: Intrinsics) -> bool:
    lc = world_to_camera(p, l)
    if lc[2] <= Z_MIN:
        return False
    u, v = _pixel(lc, k)
    return bool(0.0 <= u <= k.width and 0.0 <= v <= k.height)


def visible_mask(p: Pose, points: np.ndarray, k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Visibility of an (N, 3) array of points; returns (mask, noise-free uv)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    lc = (points - p.translation) @ p.rotation
    z = lc[:, 2]
    front = z > Z_MIN
    zs = np.where(front, z, 1.0)
    uv = np.column_stack([k.fx * lc[:, 0] / zs + k.cx, k.fy * lc[:, 1] / zs + k.cy])
    inside = (uv[:, 0] >= 0) & (uv[:, 0] <= k.width) & (uv[:, 1] >= 0) & (uv[:, 1] <= k.height)
    return front & inside, uv


def observe_scene(
    p: Pose,
    scene: Sequence[Landmark],
    k: Intrinsics,
    rng: np.random.Generator,
    pose_index: int = 0,
) -> list[PixelMeasurement]:
    """Noisy pixel measurements of every landmark visible from ``p``.

    Noise is drawn only for visible landmarks, in scene order. Measurements
    are not clipped to the image after noise is added.
    """
    if len(scene) == 0:
        return []
    pts = np.array([lm.position for lm in scene], dtype=float)
    mask, uv = visible_mask(p, pts, k)
    idx = np.flatnonzero(mask)
    lam, V = np.linalg.eigh(k.sigma_v)
    L = V * np.sqrt(np.clip(lam, 0.0, None))
    noise = rng.standard_normal((len(idx), 2)) @ L.T
    return [
        PixelMeasurement(pose_index, int(scene[j].id), uv[j] + noise[n])
        for n, j in enumerate(idx)
    ]


def back_project(uv: np.ndarray, depth: float, p: Pose, k: Intrinsics) -> np.ndarray:
    """Target-frame point seen at pixel ``uv`` with camera-frame depth ``depth``."""
    if not depth > Z_MIN:
        raise ValueError(f"depth must exceed {Z_MIN} m, got {depth}")
    u, v = uv
    lc = np.array([depth * (u - k.cx) / k.fx, depth * (v - k.cy) / k.fy, depth])
    return p.rotation @ lc + p.translation
