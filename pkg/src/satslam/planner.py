"""Information-gain planner over camera observation targets.

Each candidate target fixes the attitude along the free-drift CW path; the
candidate's future belief is the current graph augmented with the predicted
poses and noise-free predicted projections of already-mapped landmarks. The
score is the entropy reduction, computed from log-determinants of the
information matrices in tangent coordinates.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from satslam.camera import Intrinsics, PixelMeasurement, visible_mask
from satslam.dynamics import (
    DegenerateGeometryError,
    OrbitParams,
    RelativeState,
    cw_closed_form,
    pointing_rotation,
)
from satslam.geometry import Pose
from satslam.graph import (
    LANDMARK,
    POSE,
    Estimate,
    FactorGraph,
    ProjectionFactor,
    SingularInformationError,
    StructuralError,
    information_matrix,
    landmark_key,
    linearize,
    log_det,
    pose_key,
)

log = logging.getLogger(__name__)

LOG_2PI_E = float(np.log(2.0 * np.pi * np.e))

DEFAULT_BOX_LOWER = (-1.2, -2.0, -2.0)
DEFAULT_BOX_UPPER = (2.5, 2.0, 5.0)


class NoInformativePlanError(RuntimeError):
    """Every candidate produced a singular future information matrix."""


@dataclass(frozen=True)
class PlannerConfig:
    m_candidates: int = 10
    box_lower: tuple = DEFAULT_BOX_LOWER
    box_upper: tuple = DEFAULT_BOX_UPPER
    horizon: int = 12
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = np.asarray(self.box_lower, float), np.asarray(self.box_upper, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(lo > hi):
            raise ValueError("box_lower must not exceed box_upper")
        if self.m_candidates < 1 or self.horizon < 1:
            raise ValueError("m_candidates and horizon must be >= 1")


@dataclass
class CandidatePlan:
    target: np.ndarray
    poses: list[Pose]
    predicted: list[PixelMeasurement] = field(default_factory=list)
    reward: float = -np.inf
    first_index: int = 0


@dataclass(frozen=True)
class BeliefSummary:
    logdet_lambda: float
    tangent_dim: int


@dataclass
class PlanResult:
    target: np.ndarray
    rewards: list[float]
    candidates: list[CandidatePlan]
    prior: BeliefSummary
    diagnostics: list[dict]

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.rewards))


def sample_targets(cfg: PlannerConfig, rng: np.random.Generator) -> list[np.ndarray]:
    lo, hi = np.asarray(cfg.box_lower, float), np.asarray(cfg.box_upper, float)
    return [lo + (hi - lo) * u for u in rng.random((cfg.m_candidates, 3))]


def predict_plan(s_k: RelativeState, nu: float, dt: float, L: int, target: np.ndarray) -> list[Pose]:
    """Poses at t_{k+1..k+L} on the undisturbed CW path, pointing at ``target``."""
    if L < 1:
        raise ValueError("horizon must be >= 1")
    poses = []
    for i in range(1, L + 1):
        s = cw_closed_form(s_k, nu, i * dt)
        try:
            R = pointing_rotation(s.r, s.v, target)
        except DegenerateGeometryError as exc:
            raise DegenerateGeometryError(str(exc), step=i) from None
        poses.append(Pose(R, s.r))
    return poses


def predict_measurements(
    poses: Sequence[Pose],
    map_estimate: Mapping[int, np.ndarray],
    k: Intrinsics,
    first_index: int = 0,
) -> list[PixelMeasurement]:
    """Noise-free projections of mapped landmarks visible from each pose.

    ``map_estimate`` maps landmark id to position; pose ``i`` of ``poses`` gets
    ``pose_index = first_index + i``.
    """
    if not map_estimate:
        return []
    ids = list(map_estimate)
    pts = np.array([map_estimate[j] for j in ids], dtype=float)
    out = []
    for i, p in enumerate(poses):
        mask, uv = visible_mask(p, pts, k)
        out.extend(PixelMeasurement(first_index + i, int(ids[n]), uv[n]) for n in np.flatnonzero(mask))
    return out


def map_of(e: Estimate) -> dict[int, np.ndarray]:
    return {key.index: np.asarray(v) for key, v in e.items() if key.kind == LANDMARK}


def augment(
    base: FactorGraph, plan: CandidatePlan, base_estimate: Estimate, k: Intrinsics
) -> tuple[FactorGraph, Estimate]:
    """Copy of ``base`` with the plan's poses and predicted projection factors."""
    g = base.copy()
    e = dict(base_estimate)
    keys = []
    for i, p in enumerate(plan.poses):
        key = g.add_pose_variable(p, plan.first_index + i)
        e[key] = p
        keys.append(key)
    for m in plan.predicted:
        lk = landmark_key(m.landmark_id)
        if lk not in base.variables:
            raise StructuralError(f"predicted measurement of unmapped landmark {m.landmark_id}")
        g.add_projection(ProjectionFactor(pose_key(m.pose_index), lk, m.uv, k.sigma_v, k))
    return g, e


def entropy_gaussian(dim: int, logdet_sigma: float) -> float:
    return 0.5 * dim * LOG_2PI_E + 0.5 * logdet_sigma


def info_gain(prior: BeliefSummary, post_logdet: float, post_dim: int) -> float:
    n_new = post_dim - prior.tangent_dim
    return -0.5 * n_new * LOG_2PI_E + 0.5 * (post_logdet - prior.logdet_lambda)


def belief_summary(g: FactorGraph, e: Estimate) -> BeliefSummary:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ls = linearize(g, e)
    return BeliefSummary(log_det(information_matrix(ls)), g.tangent_dim)


def _score(args) -> tuple[float, dict]:
    base, base_estimate, plan, k, prior = args
    g, e = augment(base, plan, base_estimate, k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ls = linearize(g, e)
    diag = {"predicted": len(plan.predicted), "skipped": ls.skipped, "singular": False}
    try:
        ld = log_det(information_matrix(ls))
    except SingularInformationError:
        diag["singular"] = True
        return -np.inf, diag
    diag["logdet"] = ld
    return info_gain(prior, ld, g.tangent_dim), diag


def plan_active(
    base: FactorGraph,
    base_estimate: Estimate,
    s_k: RelativeState,
    cfg: PlannerConfig,
    k: Intrinsics,
    rng: np.random.Generator,
    orbit: OrbitParams,
    targets: Sequence[np.ndarray] | None = None,
    map_fn: Callable | None = None,
) -> PlanResult:
    """Pick the observation target with the largest expected information gain.

    ``targets`` overrides the random candidate draw. ``map_fn`` may be an
    order-preserving map (e.g. ``executor.map``) to score candidates in
    parallel; the result does not depend on evaluation order.
    """
    prior = belief_summary(base, base_estimate)
    if not np.isfinite(prior.logdet_lambda):
        raise SingularInformationError("base belief is not well posed")
    cands = [np.asarray(t, float) for t in targets] if targets is not None else sample_targets(cfg, rng)
    landmarks = map_of(base_estimate)
    first = max((key.index for key in base.keys(POSE)), default=-1) + 1

    plans, jobs = [], []
    diagnostics: list[dict] = []
    for target in cands:
        try:
            poses = predict_plan(s_k, orbit.nu, orbit.dt, cfg.horizon, target)
        except DegenerateGeometryError as exc:
            log.info("candidate %s infeasible: %s", target, exc)
            plans.append(CandidatePlan(target, [], [], -np.inf, first))
            jobs.append(None)
            continue
        pred = predict_measurements(poses, landmarks, k, first)
        plan = CandidatePlan(target, poses, pred, -np.inf, first)
        plans.append(plan)
        jobs.append((base, base_estimate, plan, k, prior))

    live = [j for j in jobs if j is not None]
    scored = list((map_fn or map)(_score, live))
    it = iter(scored)
    rewards = []
    for plan, job in zip(plans, jobs):
        if job is None:
            rewards.append(-np.inf)
            diagnostics.append({"predicted": 0, "skipped": 0, "singular": True, "degenerate": True})
            continue
        r, d = next(it)
        plan.reward = r
        rewards.append(r)
        diagnostics.append(d)
    if all(r == -np.inf for r in rewards):
        raise NoInformativePlanError("all candidate plans yield a singular information matrix")
    best = int(np.argmax(rewards))  # first index on ties
    return PlanResult(plans[best].target, rewards, plans, prior, diagnostics)
