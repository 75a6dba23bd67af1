"""Monte-Carlo evaluation: reconnaissance, planning, pointing strategies,
SLAM episodes, metrics and their persistence."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from satslam.camera import Z_MIN, Intrinsics, PixelMeasurement, observe_scene, project_batch
from satslam.dynamics import (
    OrbitParams,
    RelativeState,
    closed_orbit_vy,
    cw_propagate_noisy,
    mean_motion,
    pointing_rotation,
)
from satslam.geometry import Pose, se3_retract, wrap_angle, ypr_from_matrix
from satslam.graph import (
    LANDMARK,
    Estimate,
    FactorGraph,
    ProjectionFactor,
    SingularInformationError,
    landmark_key,
    marginal_covariances,
    optimize_map,
    pose_key,
)
from satslam.planner import PlannerConfig, PlanResult, plan_active, predict_plan
from satslam.scene import ReconResult, SceneConfig, generate_scene, perturb_attitude, run_reconnaissance

log = logging.getLogger(__name__)

STRATEGIES = ("tau1", "tau2", "active")
PASSIVE_TARGETS = {"tau1": (0.0, 0.0, 2.0), "tau2": (0.0, 0.0, 0.0)}

# child-stream tags for np.random.SeedSequence spawn keys
_RECON, _PLANNER, _EPISODE = 0, 1, 2


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    altitude: float = 550e3
    sigma_w: float = 1e-10  # isotropic (m/s^2)^2
    r0: tuple = (1.0, 6.0, 5.0)
    vx0: float = 0.0131
    vz0: float = 0.0
    vy0: float | None = None  # None: closed-orbit value -2 nu x0
    steps_per_orbit: int = 60
    camera_sigma: float = 2.0
    pixel_noise: bool = True  # False: exact measurements, factors keep camera_sigma
    scene: SceneConfig = field(default_factory=SceneConfig)
    recon_target: tuple = (0.0, 0.0, 1.5)
    m_candidates: int = 10
    box_lower: tuple = (-1.2, -2.0, -2.0)
    box_upper: tuple = (2.5, 2.0, 5.0)
    horizons: tuple = (12, 23)
    strategies: tuple = STRATEGIES
    num_plans: int = 10
    num_runs_per_plan: int = 10
    attitude_noise_sigma: float = float(np.deg2rad(0.1))
    master_seed: int = 0
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.scene, dict):
            self.scene = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in self.scene.items()})
        for name in ("r0", "recon_target", "box_lower", "box_upper", "horizons", "strategies"):
            setattr(self, name, tuple(getattr(self, name)))
        if not self.horizons or min(self.horizons) < 1:
            raise ValueError("horizons must be a non-empty list of positive counts")
        if self.num_plans < 1 or self.num_runs_per_plan < 1:
            raise ValueError("num_plans and num_runs_per_plan must be >= 1")
        bad = set(self.strategies) - set(STRATEGIES)
        if bad:
            raise ValueError(f"unknown strategies {sorted(bad)}")

    @property
    def nu(self) -> float:
        return mean_motion(self.altitude)

    @property
    def orbit(self) -> OrbitParams:
        T = 2 * np.pi / self.nu
        return OrbitParams(self.nu, self.sigma_w * np.eye(3), T / self.steps_per_orbit)

    @property
    def camera(self) -> Intrinsics:
        return Intrinsics.default(self.camera_sigma)

    @property
    def s0(self) -> RelativeState:
        vy = closed_orbit_vy(self.r0[0], self.nu) if self.vy0 is None else self.vy0
        return RelativeState(self.r0, (self.vx0, vy, self.vz0), 0.0)

    def planner(self, horizon: int) -> PlannerConfig:
        return PlannerConfig(self.m_candidates, self.box_lower, self.box_upper, horizon, self.master_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = asdict(self.scene)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def child_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Counter-keyed child stream; streams for distinct keys never interact."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key)))


# ---------------------------------------------------------------------------
# records and metrics
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    plan_id: int
    run_id: int
    strategy: str
    horizon: int
    target: list
    failed: bool = False
    cause: str = ""
    true_positions: list = field(default_factory=list)
    est_positions: list = field(default_factory=list)
    true_ypr: list = field(default_factory=list)
    est_ypr: list = field(default_factory=list)
    U_r: list = field(default_factory=list)
    U_phi: list = field(default_factory=list)
    e_r: list = field(default_factory=list)
    e_phi: list = field(default_factory=list)
    coverage: list = field(default_factory=list)
    U_M: float = float("nan")
    e_M: float = float("nan")
    rewards: list | None = None
    solver: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    @property
    def key(self) -> tuple:
        return (self.plan_id, self.run_id, self.strategy, self.horizon)


def metric_coverage(observed_ids_by_step: Sequence[Iterable[int]], recon_map_size: int) -> list[float]:
    """Cumulative fraction of the reconnaissance map seen up to each step."""
    if recon_map_size <= 0:
        raise ValueError("reconnaissance map must be non-empty")
    seen: set[int] = set()
    out = []
    for ids in observed_ids_by_step:
        seen.update(ids)
        out.append(len(seen) / recon_map_size)
    return out


def metric_position_error(r_true: np.ndarray, r_est: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(r_true) - np.asarray(r_est)))


def metric_attitude_error(R_true: np.ndarray, R_est: np.ndarray) -> float:
    d = wrap_angle(ypr_from_matrix(R_true) - ypr_from_matrix(R_est))
    return float(np.linalg.norm(d))


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class PlanContext:
    """Everything shared by the episodes of one plan id."""

    plan_id: int
    recon: ReconResult
    warm_start: Estimate  # MAP of the reconnaissance graph, only a solver starting point
    plans: dict = field(default_factory=dict)  # horizon -> PlanResult


def prepare_plan(cfg: ExperimentConfig, plan_id: int, horizons: Sequence[int] | None = None) -> PlanContext:
    scene = generate_scene(cfg.scene)
    recon = run_reconnaissance(scene, cfg.orbit, cfg.s0, cfg.camera, np.array(cfg.recon_target),
                               child_rng(cfg.master_seed, plan_id, _RECON), cfg.attitude_noise_sigma,
                               pixel_noise=cfg.pixel_noise)
    ctx = PlanContext(plan_id, recon, {})
    if "active" in cfg.strategies:
        for L in horizons or cfg.horizons:
            ctx.plans[L] = plan_active(recon.graph, recon.estimate, recon.final_state, cfg.planner(L),
                                       cfg.camera, child_rng(cfg.master_seed, plan_id, _PLANNER, L),
                                       cfg.orbit)
    try:
        ctx.warm_start = optimize_map(recon.graph, recon.estimate).estimate
    except SingularInformationError as exc:
        log.warning("plan %d: reconnaissance MAP failed (%s); using raw initial guess", plan_id, exc)
        ctx.warm_start = dict(recon.estimate)
    return ctx


def resect_pose(
    init: Pose,
    measurements: Sequence[PixelMeasurement],
    landmarks: dict,
    k: Intrinsics,
    max_iterations: int = 50,
) -> Pose:
    """Refine a pose against fixed landmark positions (damped Gauss-Newton).

    Only used to give the MAP solver a starting point for newly added poses;
    returns ``init`` unchanged when there are fewer than three measurements.
    """
    if len(measurements) < 3:
        return init
    L = np.array([landmarks[landmark_key(m.landmark_id)] for m in measurements], dtype=float)
    z = np.array([m.uv for m in measurements], dtype=float)
    n = len(L)
    f = np.tile([k.fx, k.fy], (n, 1))
    c = np.tile([k.cx, k.cy], (n, 1))
    W = np.linalg.inv(np.linalg.cholesky(k.sigma_v))

    def evaluate(P: Pose):
        uv, depth, Jp, _ = project_batch(np.broadcast_to(P.rotation, (n, 3, 3)),
                                         np.broadcast_to(P.translation, (n, 3)), L, f, c)
        r = (uv - z) @ W.T
        J = W @ Jp
        # a landmark behind the camera makes the candidate pose unusable
        cost = float(np.sum(r * r)) if np.all(depth > Z_MIN) else np.inf
        return r.ravel(), J.reshape(-1, 6), cost

    P = init
    r, J, cost = evaluate(P)
    if not np.isfinite(cost):
        return init
    lam = 1e-3
    for _ in range(max_iterations):
        H = J.T @ J
        try:
            d = -np.linalg.solve(H + lam * np.diag(np.diag(H)), J.T @ r)
        except np.linalg.LinAlgError:
            break
        P_new = se3_retract(P, d)
        r_new, J_new, c_new = evaluate(P_new)
        if c_new < cost:
            done = cost - c_new < 1e-10 * cost
            P, r, J, cost = P_new, r_new, J_new, c_new
            lam /= 3.0
            if done:
                break
        else:
            lam *= 4.0
            if lam > 1e10:
                break
    return P


def strategy_target(strategy: str, plan: PlanResult | None) -> np.ndarray:
    if strategy == "active":
        if plan is None:
            raise ValueError("active strategy needs a plan")
        return np.asarray(plan.target, float)
    return np.asarray(PASSIVE_TARGETS[strategy], float)


def run_episode(
    cfg: ExperimentConfig,
    recon: ReconResult,
    strategy: str,
    horizon: int,
    rng: np.random.Generator,
    plan: PlanResult | None = None,
    warm_start: Estimate | None = None,
    plan_id: int = 0,
    run_id: int = 0,
) -> RunRecord:
    """Fly ``horizon`` steps pointing at the strategy's target, extend the
    reconnaissance graph with the new observations, solve for the MAP and
    compute the metric series."""
    orbit, k = cfg.orbit, cfg.camera
    if strategy == "active" and plan is None:
        plan = plan_active(recon.graph, recon.estimate, recon.final_state, cfg.planner(horizon), k,
                           rng.spawn(1)[0], orbit)
    target = strategy_target(strategy, plan)
    rec = RunRecord(plan_id, run_id, strategy, horizon, target.tolist(),
                    rewards=list(map(float, plan.rewards)) if strategy == "active" else None)
    rng_proc, rng_att, rng_meas = rng.spawn(3)

    truth = cw_propagate_noisy(recon.true_final_state, orbit, horizon, rng_proc)[1:]
    true_poses = [
        Pose(perturb_attitude(pointing_rotation(s.r, s.v, target), cfg.attitude_noise_sigma, rng_att), s.r)
        for s in truth
    ]
    first = recon.k + 1
    try:
        planned = predict_plan(recon.final_state, orbit.nu, orbit.dt, horizon, target)
    except Exception as exc:  # degenerate pointing geometry along the nominal path
        rec.failed, rec.cause = True, f"planning geometry: {exc}"
        return rec

    k_meas = k if cfg.pixel_noise else k.with_sigma(np.zeros((2, 2)))
    map_ids = set(recon.map_ids)
    mapped = [lm for lm in recon.scene if lm.id in map_ids]
    g = recon.graph.copy()
    init = dict(warm_start if warm_start is not None else recon.estimate)
    observed: list[list[int]] = []
    for i, (T, P) in enumerate(zip(true_poses, planned)):
        key = g.add_pose_variable(P, first + i)
        ms = observe_scene(T, mapped, k_meas, rng_meas, pose_index=first + i)
        # start the solver from a resection against the current map
        init[key] = resect_pose(P, ms, init, k)
        for m in ms:
            g.add_projection(ProjectionFactor(key, landmark_key(m.landmark_id), m.uv, k.sigma_v, k))
        observed.append([m.landmark_id for m in ms])
    rec.coverage = metric_coverage(observed, len(recon.map_ids))

    try:
        res = optimize_map(g, init)
        new_keys = [pose_key(first + i) for i in range(horizon)]
        lkeys = g.keys(LANDMARK)
        cov = marginal_covariances(g, res.estimate, new_keys + lkeys)
    except SingularInformationError as exc:
        rec.failed, rec.cause = True, f"{type(exc).__name__}: {exc}"
        return rec
    est = res.estimate
    rec.solver = {"cost": res.cost, "iterations": res.iterations, "skipped": res.skipped}
    for key, T in zip(new_keys, true_poses):
        That = est[key]
        C = cov[key]
        rec.true_positions.append(T.translation.tolist())
        rec.est_positions.append(That.translation.tolist())
        rec.true_ypr.append(ypr_from_matrix(T.rotation).tolist())
        rec.est_ypr.append(ypr_from_matrix(That.rotation).tolist())
        rec.U_phi.append(float(np.trace(C[:3, :3])))
        rec.U_r.append(float(np.trace(C[3:, 3:])))
        rec.e_r.append(metric_position_error(T.translation, That.translation))
        rec.e_phi.append(metric_attitude_error(T.rotation, That.rotation))
    truth_l = {lm.id: np.asarray(lm.position) for lm in recon.scene}
    rec.U_M = float(np.mean([np.trace(cov[lk]) for lk in lkeys]))
    rec.e_M = float(np.mean([np.linalg.norm(truth_l[lk.index] - est[lk]) for lk in lkeys]))
    return rec


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


SERIES = ("U_r", "e_r", "U_phi", "e_phi", "coverage")
STEP_HEADER = ["step", "U_r", "e_r", "U_phi", "e_phi", "c", "n_records", "n_failed"]
MAP_HEADER = ["plan_id", "U_M", "e_M", "n_records"]


def fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class AggregateTable:
    strategy: str
    horizon: int
    steps: dict  # series name -> list of per-step means
    per_plan: dict  # plan_id -> (U_M, e_M, n)
    n_records: int
    n_failed: int

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STEP_HEADER)
        for i in range(self.horizon):
            w.writerow([i + 1] + [fmt(self.steps[s][i]) for s in SERIES]
                       + [self.n_records, self.n_failed])
        return buf.getvalue()

    def map_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MAP_HEADER)
        for pid in sorted(self.per_plan):
            U, e, n = self.per_plan[pid]
            w.writerow([pid, fmt(U), fmt(e), n])
        return buf.getvalue()


def aggregate(records: Sequence[RunRecord], strategy: str, horizon: int) -> AggregateTable:
    """Per-step means over all successful (plan, run) records and per-plan map means.

    Records are reduced in sorted key order so the result is independent of
    the order in which episodes finished.
    """
    rs = sorted((r for r in records if r.strategy == strategy and r.horizon == horizon),
                key=lambda r: r.key)
    ok = [r for r in rs if not r.failed]
    steps = {}
    for s in SERIES:
        if ok:
            steps[s] = np.mean(np.array([getattr(r, s) for r in ok], dtype=float), axis=0).tolist()
        else:
            steps[s] = [float("nan")] * horizon
    per_plan = {}
    for pid in sorted({r.plan_id for r in ok}):
        sel = [r for r in ok if r.plan_id == pid]
        per_plan[pid] = (float(np.mean([r.U_M for r in sel])), float(np.mean([r.e_M for r in sel])), len(sel))
    return AggregateTable(strategy, horizon, steps, per_plan, len(ok), len(rs) - len(ok))


def run_plan(cfg: ExperimentConfig, plan_id: int) -> list[RunRecord]:
    t0 = time.perf_counter()
    ctx = prepare_plan(cfg, plan_id)
    records = []
    for L in cfg.horizons:
        for run_id in range(1, cfg.num_runs_per_plan + 1):
            for strategy in cfg.strategies:
                # common random numbers: all strategies share the run's streams
                rng = child_rng(cfg.master_seed, plan_id, _EPISODE, L, run_id)
                rec = run_episode(cfg, ctx.recon, strategy, L, rng, ctx.plans.get(L),
                                  ctx.warm_start, plan_id, run_id)
                if rec.failed:
                    log.warning("episode %s failed: %s", rec.key, rec.cause)
                records.append(rec)
    log.info("plan %d done in %.1f s", plan_id, time.perf_counter() - t0)
    return records


def record_path(out: Path, r: RunRecord) -> Path:
    return out / "records" / f"plan{r.plan_id:02d}_run{r.run_id:02d}_{r.strategy}_L{r.horizon}.json"


def write_records(out: Path, records: Sequence[RunRecord]) -> None:
    d = out / "records"
    try:
        d.mkdir(parents=True, exist_ok=True)
        for r in records:
            record_path(out, r).write_text(json.dumps(r.to_dict(), indent=1))
    except OSError as exc:
        raise OSError(f"cannot write records under {d}: {exc}") from exc


def load_records(out: Path) -> list[RunRecord]:
    files = sorted((Path(out) / "records").glob("*.json"))
    return [RunRecord.from_dict(json.loads(f.read_text())) for f in files]


def write_aggregates(out: Path, records: Sequence[RunRecord], horizons, strategies) -> dict:
    tables = {}
    for L in horizons:
        for s in strategies:
            t = aggregate(records, s, L)
            tables[(s, L)] = t
            try:
                (out / f"aggregate_{s}_L{L}.csv").write_text(t.steps_csv())
                (out / f"map_{s}_L{L}.csv").write_text(t.map_csv())
            except OSError as exc:
                raise OSError(f"cannot write aggregates under {out}: {exc}") from exc
    return tables


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> tuple[dict, list[RunRecord]]:
    """Full protocol: per plan, reconnaissance + one plan per horizon + episodes."""
    out = Path(cfg.output_dir)
    plan_ids = list(range(1, cfg.num_plans + 1))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            chunks = list(ex.map(run_plan, [cfg] * len(plan_ids), plan_ids))
    else:
        chunks = [run_plan(cfg, pid) for pid in plan_ids]
    records = sorted((r for c in chunks for r in c), key=lambda r: r.key)
    n_failed = sum(r.failed for r in records)
    if n_failed:
        log.warning("%d of %d episodes failed and are excluded from the means", n_failed, len(records))
    tables = {}
    if write:
        out.mkdir(parents=True, exist_ok=True)
        write_records(out, records)
        tables = write_aggregates(out, records, cfg.horizons, cfg.strategies)
        meta = {"config": cfg.to_dict(), "n_records": len(records), "n_failed": n_failed,
                "reconnaissance": "regenerated per plan id"}
        (out / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    else:
        tables = {(s, L): aggregate(records, s, L) for L in cfg.horizons for s in cfg.strategies}
    return tables, records


def export_plot_csvs(out: Path, records: Sequence[RunRecord], error_scale: float = 1.0) -> list[Path]:
    """Per-figure CSVs: pose metrics per step, map metrics per plan, coverage per step."""
    out = Path(out)
    horizons = sorted({r.horizon for r in records})
    strategies = [s for s in STRATEGIES if any(r.strategy == s for r in records)]
    written = []
    for L in horizons:
        tabs = {s: aggregate(records, s, L) for s in strategies}
        p = out / f"fig_pose_L{L}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step"] + [f"{s}_{m}" for s in strategies for m in ("e_r", "U_r", "e_phi", "U_phi")])
            for i in range(L):
                row = [i + 1]
                for s in strategies:
                    t = tabs[s].steps
                    row += [fmt(error_scale * t["e_r"][i]), fmt(t["U_r"][i]),
                            fmt(error_scale * t["e_phi"][i]), fmt(t["U_phi"][i])]
                w.writerow(row)
        written.append(p)
        p = out / f"fig_map_L{L}.csv"
        pids = sorted({pid for t in tabs.values() for pid in t.per_plan})
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["plan_id"] + [f"{s}_{m}" for s in strategies for m in ("U_M", "e_M")])
            for pid in pids:
                row = [pid]
                for s in strategies:
                    U, e, _ = tabs[s].per_plan.get(pid, (float("nan"),) * 3)
                    row += [fmt(U), fmt(error_scale * e)]
                w.writerow(row)
        written.append(p)
        p = out / f"fig_coverage_L{L}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step"] + strategies)
            for i in range(L):
                w.writerow([i + 1] + [fmt(tabs[s].steps["coverage"][i]) for s in strategies])
        written.append(p)
    return written
