"""Synthetic landmark scene and the reconnaissance orbit that seeds the map."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from satslam.camera import Intrinsics, Landmark, back_project, observe_scene, world_to_camera
from satslam.dynamics import OrbitParams, RelativeState, cw_closed_form, cw_propagate_noisy, pointing_rotation
from satslam.geometry import Pose, matrix_from_ypr, ypr_from_matrix
from satslam.graph import Estimate, FactorGraph, PriorFactor, ProjectionFactor, landmark_key, pose_key

RECON_STEPS = 60
MIN_LANDMARKS = 8
SIGMA_P = np.diag([1e-6] * 6)


class DegenerateSceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    num_landmarks: int = 200
    geometry: str = "ellipsoid"  # or "box"
    extents: tuple = (1.5, 1.5, 3.0)  # semi-axes (ellipsoid) / half-widths (box), m
    center: tuple = (0.0, 0.0, 1.5)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_landmarks < MIN_LANDMARKS:
            raise ValueError(f"need at least {MIN_LANDMARKS} landmarks")
        if self.geometry not in ("ellipsoid", "box"):
            raise ValueError(f"unknown scene geometry {self.geometry!r}")
        if np.any(np.asarray(self.extents, float) <= 0):
            raise ValueError("extents must be positive")


def _ellipsoid_points(n: int, axes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # uniform on the sphere, then thin by the ellipsoid area element
    gmax = 1.0 / axes.min()
    out: list[np.ndarray] = []
    count = 0
    while count < n:
        u = rng.standard_normal((2 * n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        g = np.sqrt(np.sum((u / axes) ** 2, axis=1))
        keep = u[rng.random(len(u)) < g / gmax]
        out.append(keep)
        count += len(keep)
    return np.concatenate(out)[:n] * axes


def _box_points(n: int, half: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    a, b, c = half
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = (2.0 * rng.random((n, 3)) - 1.0) * half
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def generate_scene(cfg: SceneConfig, rng: np.random.Generator | None = None) -> list[Landmark]:
    """Landmarks uniformly distributed on the configured surface, ids 0..N-1."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    ext = np.asarray(cfg.extents, float)
    if cfg.geometry == "ellipsoid":
        pts = _ellipsoid_points(cfg.num_landmarks, ext, rng)
    else:
        pts = _box_points(cfg.num_landmarks, ext, rng)
    pts = pts + np.asarray(cfg.center, float)
    return [Landmark(i, p) for i, p in enumerate(pts)]


def scene_to_json(scene: Sequence[Landmark]) -> str:
    return json.dumps({"landmarks": [{"id": int(l.id), "xyz": np.asarray(l.position).tolist()}
                                     for l in scene]})


def scene_from_json(s: str) -> list[Landmark]:
    return [Landmark(int(d["id"]), np.array(d["xyz"], float)) for d in json.loads(s)["landmarks"]]


def save_scene(scene: Sequence[Landmark], path: Path) -> None:
    Path(path).write_text(scene_to_json(scene))


def load_scene(path: Path) -> list[Landmark]:
    return scene_from_json(Path(path).read_text())


def perturb_attitude(R: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add N(0, sigma^2) to each yaw-pitch-roll angle of ``R``."""
    noise = rng.standard_normal(3) * sigma
    if sigma == 0.0:
        return R
    return matrix_from_ypr(ypr_from_matrix(R) + noise)


@dataclass
class ReconResult:
    graph: FactorGraph
    estimate: Estimate
    final_state: RelativeState  # planner's knowledge (undisturbed CW)
    true_states: list[RelativeState]
    true_poses: list[Pose]
    scene: list[Landmark]
    map_ids: list[int] = field(default_factory=list)

    @property
    def true_final_state(self) -> RelativeState:
        return self.true_states[-1]

    @property
    def k(self) -> int:
        return len(self.true_poses) - 1


def run_reconnaissance(
    scene: Sequence[Landmark],
    orbit: OrbitParams,
    s0: RelativeState,
    k: Intrinsics,
    recon_target: np.ndarray,
    rng: np.random.Generator,
    attitude_noise_sigma: float = 0.0,
    sigma_p: np.ndarray = SIGMA_P,
    steps: int = RECON_STEPS,
    pixel_noise: bool = True,
) -> ReconResult:
    """Simulate one relative orbit and build the (unoptimized) initial graph.

    Pose variables start from the undisturbed CW solution with nominal
    pointing; each landmark starts at the back-projection of its first noisy
    sighting, using the true depth. Priors pin the first two poses to truth.
    With ``pixel_noise=False`` measurements are exact while the factors keep
    the camera's pixel covariance.
    """
    rng_proc, rng_att, rng_meas = rng.spawn(3)
    truth = cw_propagate_noisy(s0, orbit, steps, rng_proc)
    target = np.asarray(recon_target, float)
    true_poses = [
        Pose(perturb_attitude(pointing_rotation(s.r, s.v, target), attitude_noise_sigma, rng_att), s.r)
        for s in truth
    ]
    nominal = [cw_closed_form(s0, orbit.nu, i * orbit.dt) for i in range(steps + 1)]
    est_poses = [Pose(pointing_rotation(s.r, s.v, target), s.r) for s in nominal]

    positions = {int(l.id): np.asarray(l.position, float) for l in scene}
    g = FactorGraph()
    est: Estimate = {}
    for i, p in enumerate(est_poses):
        est[g.add_pose_variable(p, i)] = p
    for i in (0, 1):
        g.add_prior(PriorFactor(pose_key(i), true_poses[i], sigma_p))

    k_meas = k if pixel_noise else k.with_sigma(np.zeros((2, 2)))
    map_ids: list[int] = []
    for i, T in enumerate(true_poses):
        for m in observe_scene(T, scene, k_meas, rng_meas, pose_index=i):
            lk = landmark_key(m.landmark_id)
            if lk not in g.variables:
                depth = world_to_camera(T, positions[m.landmark_id])[2]
                init = back_project(m.uv, depth, est_poses[i], k)
                g.add_landmark_variable(init, m.landmark_id)
                est[lk] = g.variables[lk]
                map_ids.append(m.landmark_id)
            g.add_projection(ProjectionFactor(pose_key(i), lk, m.uv, k.sigma_v, k))
    if len(map_ids) < MIN_LANDMARKS:
        raise DegenerateSceneError(f"only {len(map_ids)} landmarks observed during reconnaissance")
    return ReconResult(g, est, nominal[-1], truth, true_poses, list(scene), map_ids)
