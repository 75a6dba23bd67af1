"""Factor graph over camera poses and landmarks, with Gauss-Newton style
linearization, Levenberg-Marquardt MAP estimation and information-matrix
utilities (log-determinants, marginal covariances).

Every factor is whitened at construction (``W = chol(Sigma)^-1``) so the
stacked Jacobian ``A`` satisfies ``information = A.T @ A``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from satslam.camera import Z_MIN, Intrinsics, project_batch
from satslam.geometry import (
    Pose,
    se3_local,
    se3_retract,
    so3_right_jacobian_inv,
    ypr_body_jacobian,
    ypr_from_matrix,
)

log = logging.getLogger(__name__)

POSE = "pose"
LANDMARK = "landmark"
DIM = {POSE: 6, LANDMARK: 3}
SCHEMA_VERSION = 1


class StructuralError(KeyError):
    """Factor or estimate refers to a variable the graph does not hold."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class SingularInformationError(np.linalg.LinAlgError):
    """Information matrix is not (numerically) positive definite."""


class RankDeficiencyError(SingularInformationError):
    def __init__(self, null_dim: int):
        super().__init__(f"normal equations rank deficient: null-space dimension {null_dim}")
        self.null_dim = null_dim


class VariableKey(NamedTuple):
    kind: str
    index: int

    def __repr__(self) -> str:
        return f"{self.kind[0]}{self.index}"


def pose_key(i: int) -> VariableKey:
    return VariableKey(POSE, int(i))


def landmark_key(j: int) -> VariableKey:
    return VariableKey(LANDMARK, int(j))


Value = Union[Pose, np.ndarray]
Estimate = dict  # VariableKey -> Pose | (3,) ndarray


def _whitener(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    try:
        Lc = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise ValueError("factor covariance must be positive definite") from exc
    return sla.solve_triangular(Lc, np.eye(len(S)), lower=True)


@dataclass(frozen=True, eq=False)
class PriorFactor:
    key: VariableKey
    prior_pose: Pose
    sigma_p: np.ndarray
    whiten: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "sigma_p", np.array(self.sigma_p, dtype=float).reshape(6, 6))
        object.__setattr__(self, "whiten", _whitener(self.sigma_p))

    @property
    def keys(self) -> tuple[VariableKey, ...]:
        return (self.key,)

    dim = 6


@dataclass(frozen=True, eq=False)
class ProjectionFactor:
    pose_key: VariableKey
    landmark_key: VariableKey
    z: np.ndarray
    sigma_v: np.ndarray
    intrinsics: Intrinsics
    whiten: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "z", np.array(self.z, dtype=float).reshape(2))
        object.__setattr__(self, "sigma_v", np.array(self.sigma_v, dtype=float).reshape(2, 2))
        object.__setattr__(self, "whiten", _whitener(self.sigma_v))

    @property
    def keys(self) -> tuple[VariableKey, ...]:
        return (self.pose_key, self.landmark_key)

    dim = 2


Factor = Union[PriorFactor, ProjectionFactor]


class FactorGraph:
    """Variables (with initial values, in insertion order) and factors."""

    def __init__(self) -> None:
        self.variables: dict[VariableKey, Value] = {}
        self.factors: list[Factor] = []
        self._next = {POSE: 0, LANDMARK: 0}

    # -- construction -------------------------------------------------------
    def _add_variable(self, kind: str, init: Value, index: int | None) -> VariableKey:
        idx = self._next[kind] if index is None else int(index)
        key = VariableKey(kind, idx)
        if key in self.variables:
            raise StructuralError(f"duplicate variable {key!r}")
        self.variables[key] = init
        self._next[kind] = max(self._next[kind], idx + 1)
        return key

    def add_pose_variable(self, init: Pose, index: int | None = None) -> VariableKey:
        if not isinstance(init, Pose):
            raise TypeError("pose variables take a Pose initial value")
        return self._add_variable(POSE, init, index)

    def add_landmark_variable(self, init: np.ndarray, index: int | None = None) -> VariableKey:
        init = np.array(init, dtype=float).reshape(3)
        init.flags.writeable = False
        return self._add_variable(LANDMARK, init, index)

    def _check(self, keys: Iterable[VariableKey], kinds: Iterable[str]) -> None:
        for key, kind in zip(keys, kinds):
            if key not in self.variables:
                raise StructuralError(f"unknown variable {key!r}")
            if key.kind != kind:
                raise StructuralError(f"{key!r} is not a {kind} variable")

    def add_prior(self, f: PriorFactor) -> None:
        self._check(f.keys, (POSE,))
        self.factors.append(f)

    def add_projection(self, f: ProjectionFactor) -> None:
        self._check(f.keys, (POSE, LANDMARK))
        self.factors.append(f)

    def add_factor(self, f: Factor) -> None:
        if isinstance(f, PriorFactor):
            self.add_prior(f)
        else:
            self.add_projection(f)

    def copy(self) -> "FactorGraph":
        """Structural copy; factors and values are immutable and shared."""
        g = FactorGraph()
        g.variables = dict(self.variables)
        g.factors = list(self.factors)
        g._next = dict(self._next)
        return g

    # -- queries ------------------------------------------------------------
    @property
    def tangent_dim(self) -> int:
        return sum(DIM[k.kind] for k in self.variables)

    @property
    def residual_dim(self) -> int:
        return sum(f.dim for f in self.factors)

    def keys(self, kind: str | None = None) -> list[VariableKey]:
        return [k for k in self.variables if kind is None or k.kind == kind]

    def initial_estimate(self) -> Estimate:
        return dict(self.variables)

    def column_offsets(self) -> dict[VariableKey, int]:
        offs, o = {}, 0
        for k in self.variables:
            offs[k] = o
            o += DIM[k.kind]
        return offs

    def observation_counts(self) -> dict[VariableKey, int]:
        counts = {k: 0 for k in self.keys(LANDMARK)}
        for f in self.factors:
            if isinstance(f, ProjectionFactor):
                counts[f.landmark_key] += 1
        return counts

    def __repr__(self) -> str:
        return (f"FactorGraph({len(self.keys(POSE))} poses, {len(self.keys(LANDMARK))} "
                f"landmarks, {len(self.factors)} factors)")

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        variables = []
        for k, v in self.variables.items():
            if k.kind == POSE:
                variables.append({"kind": POSE, "index": k.index,
                                  "rotation": v.rotation.tolist(),
                                  "translation": v.translation.tolist()})
            else:
                variables.append({"kind": LANDMARK, "index": k.index, "position": v.tolist()})
        factors = []
        for f in self.factors:
            if isinstance(f, PriorFactor):
                factors.append({"type": "prior", "key": list(f.key),
                                "rotation": f.prior_pose.rotation.tolist(),
                                "translation": f.prior_pose.translation.tolist(),
                                "sigma": f.sigma_p.tolist()})
            else:
                factors.append({"type": "projection", "pose": list(f.pose_key),
                                "landmark": list(f.landmark_key), "z": f.z.tolist(),
                                "sigma": f.sigma_v.tolist(),
                                "intrinsics": f.intrinsics.to_dict()})
        return {"schema": SCHEMA_VERSION, "variables": variables, "factors": factors}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "FactorGraph":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported graph schema {d.get('schema')!r}")
        g = cls()
        for v in d["variables"]:
            if v["kind"] == POSE:
                g.add_pose_variable(Pose(np.array(v["rotation"]), v["translation"]), v["index"])
            else:
                g.add_landmark_variable(v["position"], v["index"])
        intr_cache: dict[str, Intrinsics] = {}
        for f in d["factors"]:
            if f["type"] == "prior":
                g.add_prior(PriorFactor(VariableKey(*f["key"]),
                                        Pose(np.array(f["rotation"]), f["translation"]),
                                        np.array(f["sigma"])))
            else:
                tag = json.dumps(f["intrinsics"], sort_keys=True)
                k = intr_cache.setdefault(tag, Intrinsics.from_dict(f["intrinsics"]))
                g.add_projection(ProjectionFactor(VariableKey(*f["pose"]),
                                                  VariableKey(*f["landmark"]),
                                                  f["z"], np.array(f["sigma"]), k))
        return g

    @classmethod
    def from_json(cls, s: str) -> "FactorGraph":
        return cls.from_dict(json.loads(s))


def estimate_to_dict(e: Estimate) -> list[dict]:
    out = []
    for k, v in e.items():
        if k.kind == POSE:
            out.append({"kind": POSE, "index": k.index, "rotation": v.rotation.tolist(),
                        "translation": v.translation.tolist()})
        else:
            out.append({"kind": LANDMARK, "index": k.index, "position": np.asarray(v).tolist()})
    return out


def estimate_from_dict(items: list[dict]) -> Estimate:
    e: Estimate = {}
    for v in items:
        if v["kind"] == POSE:
            e[pose_key(v["index"])] = Pose(np.array(v["rotation"]), v["translation"])
        else:
            e[landmark_key(v["index"])] = np.array(v["position"], dtype=float)
    return e


# ---------------------------------------------------------------------------
# linearization
# ---------------------------------------------------------------------------


@dataclass
class LinearSystem:
    jacobian: sp.csr_matrix
    residual: np.ndarray
    column_order: list[VariableKey]
    offsets: dict[VariableKey, int]
    skipped: int = 0
    single_sighting: int = 0

    @property
    def cost(self) -> float:
        return 0.5 * float(self.residual @ self.residual)


class _Packed:
    """Factor data stacked into arrays, reusable across linearization points."""

    def __init__(self, g: FactorGraph):
        self.order = list(g.variables)
        self.offsets = g.column_offsets()
        self.ncols = g.tangent_dim
        self.poses = g.keys(POSE)
        self.lands = g.keys(LANDMARK)
        pidx = {k: i for i, k in enumerate(self.poses)}
        lidx = {k: i for i, k in enumerate(self.lands)}

        self.priors = [f for f in g.factors if isinstance(f, PriorFactor)]
        projs = [f for f in g.factors if isinstance(f, ProjectionFactor)]
        # row layout follows factor insertion order
        row = 0
        prior_rows, proj_rows = [], []
        for f in g.factors:
            (prior_rows if isinstance(f, PriorFactor) else proj_rows).append(row)
            row += f.dim
        self.nrows = row
        self.prior_rows = np.array(prior_rows, dtype=int)
        self.proj_rows = np.array(proj_rows, dtype=int)
        n = len(projs)
        self.n_proj = n
        self.proj_pose = np.array([pidx[f.pose_key] for f in projs], dtype=int)
        self.proj_land = np.array([lidx[f.landmark_key] for f in projs], dtype=int)
        self.z = np.array([f.z for f in projs]).reshape(n, 2)
        self.W = np.array([f.whiten for f in projs]).reshape(n, 2, 2)
        self.f = np.array([[f.intrinsics.fx, f.intrinsics.fy] for f in projs]).reshape(n, 2)
        self.c = np.array([[f.intrinsics.cx, f.intrinsics.cy] for f in projs]).reshape(n, 2)
        pose_cols = np.array([self.offsets[k] for k in self.poses], dtype=int)
        land_cols = np.array([self.offsets[k] for k in self.lands], dtype=int)
        self.proj_pose_col = pose_cols[self.proj_pose] if n else np.zeros(0, int)
        self.proj_land_col = land_cols[self.proj_land] if n else np.zeros(0, int)
        counts = np.bincount(self.proj_land, minlength=len(self.lands)) if n else np.zeros(len(self.lands))
        self.single_sighting = int(np.sum(counts == 1))

        self.prior_pose = np.array([pidx[f.key] for f in self.priors], dtype=int)
        n_p, n_l = len(self.poses), len(self.lands)
        self.sel_pose = sp.csr_matrix((np.ones(n), (self.proj_pose, np.arange(n))), shape=(n_p, n))
        self.sel_land = sp.csr_matrix((np.ones(n), (self.proj_land, np.arange(n))), shape=(n_l, n))
        a, b = np.meshgrid(np.arange(6), np.arange(3), indexing="ij")
        self.hpl_index = (((6 * self.proj_pose[:, None, None] + a) * (3 * n_l))
                          + 3 * self.proj_land[:, None, None] + b).ravel()
        pc = [self.offsets[k] + np.arange(6) for k in self.poses]
        lc = [self.offsets[k] + np.arange(3) for k in self.lands]
        self.pose_cols = np.concatenate(pc) if pc else np.zeros(0, int)
        self.land_cols = np.concatenate(lc) if lc else np.zeros(0, int)

        # sparsity pattern for projection rows: 2 rows x 9 cols each
        r = self.proj_rows[:, None] + np.arange(2)[None, :]  # (n, 2)
        cols = np.concatenate(
            [self.proj_pose_col[:, None] + np.arange(6), self.proj_land_col[:, None] + np.arange(3)],
            axis=1,
        )  # (n, 9)
        self.proj_I = np.repeat(r[:, :, None], 9, axis=2).ravel()
        self.proj_J = np.repeat(cols[:, None, :], 2, axis=1).ravel()

    def arrays(self, e: Estimate) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        try:
            R = np.array([e[k].rotation for k in self.poses]).reshape(-1, 3, 3)
            t = np.array([e[k].translation for k in self.poses]).reshape(-1, 3)
            L = np.array([e[k] for k in self.lands], dtype=float).reshape(-1, 3)
        except KeyError as exc:
            raise StructuralError(f"estimate misses variable {exc.args[0]!r}") from None
        return R, t, L

    def residual_only(self, e: Estimate) -> tuple[np.ndarray, int]:
        return self._evaluate(e, need_jacobian=False)[:2]

    def _blocks(self, e: Estimate, need_jacobian: bool = True):
        """Residual vector, behind-camera count, whitened projection Jacobians
        ``(n, 2, 9)`` and whitened prior blocks ``(row, pose_index, J)``."""
        R, t, L = self.arrays(e)
        res = np.zeros(self.nrows)
        skipped = 0
        J = None
        if self.n_proj:
            uv, depth, Jp, Jl = project_batch(R[self.proj_pose], t[self.proj_pose], L[self.proj_land],
                                              self.f, self.c)
            ok = depth > Z_MIN
            skipped = int(np.sum(~ok))
            r = (self.W @ (uv - self.z)[:, :, None])[:, :, 0]
            r[~ok] = 0.0
            res[self.proj_rows[:, None] + np.arange(2)] = r
            if need_jacobian:
                J = self.W @ np.concatenate([Jp, Jl], axis=2)
                J[~ok] = 0.0
        prior_blocks = []
        for f, row, i in zip(self.priors, self.prior_rows, self.prior_pose):
            xi = se3_local(f.prior_pose, e[f.key])
            res[row:row + 6] = f.whiten @ xi
            if need_jacobian:
                Jf = np.eye(6)
                Jf[:3, :3] = so3_right_jacobian_inv(xi[:3])
                prior_blocks.append((row, i, f.whiten @ Jf))
        return res, skipped, J, prior_blocks

    def _evaluate(self, e: Estimate, need_jacobian: bool = True):
        res, skipped, J, prior_blocks = self._blocks(e, need_jacobian)
        if not need_jacobian:
            return res, skipped, None
        I_parts, J_parts, D_parts = [], [], []
        if self.n_proj:
            I_parts.append(self.proj_I)
            J_parts.append(self.proj_J)
            D_parts.append(J.ravel())
        ii, jj = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
        for row, i, B in prior_blocks:
            I_parts.append((row + ii).ravel())
            J_parts.append((self.offsets[self.poses[i]] + jj).ravel())
            D_parts.append(B.ravel())
        if I_parts:
            A = sp.csr_matrix(
                (np.concatenate(D_parts), (np.concatenate(I_parts), np.concatenate(J_parts))),
                shape=(self.nrows, self.ncols),
            )
        else:
            A = sp.csr_matrix((self.nrows, self.ncols))
        return res, skipped, A

    def normal_equations(self, e: Estimate) -> tuple[np.ndarray, int, "_BlockSystem"]:
        """Residual, skipped count and the blocks of ``A.T A`` / ``A.T r``
        (poses first, then landmarks, in key order)."""
        res, skipped, J, prior_blocks = self._blocks(e)
        n_p, n_l = len(self.poses), len(self.lands)
        Hpp = np.zeros((6 * n_p, 6 * n_p))
        Hpl = np.zeros((6 * n_p, 3 * n_l))
        Hll = np.zeros((n_l, 3, 3))
        gp = np.zeros((n_p, 6))
        gl = np.zeros((n_l, 3))
        if self.n_proj:
            r = res[self.proj_rows[:, None] + np.arange(2)]
            Jp, Jl = J[:, :, :6], J[:, :, 6:]
            JpT, JlT = np.swapaxes(Jp, 1, 2), np.swapaxes(Jl, 1, 2)
            Hpp_b = (self.sel_pose @ (JpT @ Jp).reshape(-1, 36)).reshape(n_p, 6, 6)
            Hll = (self.sel_land @ (JlT @ Jl).reshape(-1, 9)).reshape(n_l, 3, 3)
            gp = self.sel_pose @ (JpT @ r[:, :, None])[:, :, 0]
            gl = self.sel_land @ (JlT @ r[:, :, None])[:, :, 0]
            Hpl = np.bincount(self.hpl_index, weights=(JpT @ Jl).ravel(),
                              minlength=Hpl.size).reshape(Hpl.shape)
            idx = np.arange(n_p)
            Hpp.reshape(n_p, 6, n_p, 6)[idx, :, idx, :] = Hpp_b
        H4 = Hpp.reshape(n_p, 6, n_p, 6)
        for row, i, B in prior_blocks:
            H4[i, :, i, :] += B.T @ B
            gp[i] += B.T @ res[row:row + 6]
        return res, skipped, _BlockSystem(Hpp, Hpl, Hll, gp.ravel(), gl.ravel())

    def linearize(self, e: Estimate) -> LinearSystem:
        res, skipped, A = self._evaluate(e)
        if skipped:
            warnings.warn(f"{skipped} projection factor(s) behind the camera were skipped",
                          RuntimeWarning, stacklevel=3)
        return LinearSystem(A, res, list(self.order), dict(self.offsets), skipped,
                            self.single_sighting)

    def retract(self, e: Estimate, delta: np.ndarray) -> Estimate:
        out: Estimate = {}
        for k in self.order:
            o = self.offsets[k]
            if k.kind == POSE:
                out[k] = se3_retract(e[k], delta[o:o + 6])
            else:
                out[k] = np.asarray(e[k]) + delta[o:o + 3]
        return out


def linearize(g: FactorGraph, e: Estimate) -> LinearSystem:
    """Whitened Jacobian and residual of all factors at estimate ``e``.

    Projection factors whose landmark is behind the camera at ``e`` are
    replaced by zero rows; their number is reported in ``skipped``.
    """
    return _Packed(g).linearize(e)


def information_matrix(ls: LinearSystem | sp.spmatrix | np.ndarray) -> sp.csc_matrix:
    A = ls.jacobian if isinstance(ls, LinearSystem) else ls
    A = sp.csr_matrix(A)
    return (A.T @ A).tocsc()


# ---------------------------------------------------------------------------
# factorization
# ---------------------------------------------------------------------------

PIVOT_RTOL = 1e-12
DENSE_DENSITY = 0.05
DENSE_MAX_N = 400


class CholeskyFactor:
    """Cholesky-type factorization of an SPD matrix.

    Small or dense matrices use LAPACK; large sparse ones use SuperLU with a
    minimum-degree ordering on ``A + A.T``, symmetric mode and no off-diagonal
    pivoting, so that ``U``'s diagonal holds the LDL^T pivots.
    """

    def __init__(self, m, rtol: float = PIVOT_RTOL):
        self.n = m.shape[0]
        if self.n == 0:
            self._kind, self.logdet = "empty", 0.0
            return
        diag = m.diagonal() if sp.issparse(m) else np.diag(m)
        scale = float(np.max(np.abs(diag))) if len(diag) else 0.0
        if not scale > 0 or not np.all(np.isfinite(diag)):
            raise SingularInformationError("information matrix has an empty diagonal")
        density = m.nnz / self.n**2 if sp.issparse(m) else 1.0
        if sp.issparse(m) and self.n > DENSE_MAX_N and density < DENSE_DENSITY:
            self._sparse(sp.csc_matrix(m), scale, rtol)
        else:
            self._dense(m.toarray() if sp.issparse(m) else np.asarray(m, dtype=float), scale, rtol)

    def _dense(self, M: np.ndarray, scale: float, rtol: float) -> None:
        try:
            c, low = sla.cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularInformationError(str(exc)) from None
        piv = np.diag(c) ** 2
        if not np.all(piv > rtol * scale):
            raise SingularInformationError(
                f"{int(np.sum(piv <= rtol * scale))} pivot(s) below {rtol:g} relative")
        self._kind, self._c = "dense", (c, low)
        self.logdet = float(2.0 * np.sum(np.log(np.diag(c))))

    def _sparse(self, M: sp.csc_matrix, scale: float, rtol: float) -> None:
        try:
            lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                           options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise SingularInformationError(str(exc)) from None
        if not np.array_equal(lu.perm_r, lu.perm_c):
            # off-diagonal pivoting happened: not a symmetric factorization
            self._dense(M.toarray(), scale, rtol)
            return
        d = lu.U.diagonal()
        if not np.all(d > rtol * scale):
            raise SingularInformationError(
                f"{int(np.sum(d <= rtol * scale))} pivot(s) below {rtol:g} relative")
        self._kind, self._lu = "sparse", lu
        self.logdet = float(np.sum(np.log(d)))

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self._kind == "dense":
            return sla.cho_solve(self._c, b, check_finite=False)
        if self._kind == "sparse":
            return self._lu.solve(np.asarray(b, dtype=float))
        return np.asarray(b, dtype=float)


def log_det(m) -> float:
    """log|m| of an SPD matrix from its Cholesky pivots."""
    return CholeskyFactor(m).logdet


def null_space_dim(m, rtol: float = 1e-9) -> int:
    """Numerical null-space dimension of a symmetric PSD matrix (dense eigensolve)."""
    M = m.toarray() if sp.issparse(m) else np.asarray(m)
    lam = np.linalg.eigvalsh(M)
    top = max(float(lam[-1]), 0.0) if len(lam) else 0.0
    return int(np.sum(lam <= rtol * top)) if top > 0 else len(lam)


# ---------------------------------------------------------------------------
# MAP estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverSettings:
    lambda_init: float = 1e-4
    lambda_factor: float = 2.0  # initial growth after a rejected step; doubles on each rejection
    lambda_max: float = 1e12
    rel_decrease_tol: float = 1e-6
    step_tol: float = 1e-8
    max_iterations: int = 100


class MapResult(NamedTuple):
    estimate: Estimate
    cost: float
    iterations: int
    skipped: int


@dataclass
class _BlockSystem:
    """``A.T A`` split into pose/landmark blocks; landmark blocks are 3x3."""

    Hpp: np.ndarray
    Hpl: np.ndarray
    Hll: np.ndarray  # (n_landmarks, 3, 3)
    gp: np.ndarray
    gl: np.ndarray

    @property
    def diag(self) -> tuple[np.ndarray, np.ndarray]:
        return np.diag(self.Hpp).copy(), np.diagonal(self.Hll, axis1=1, axis2=2).ravel()

    def solve_damped(self, lam: float) -> tuple[np.ndarray, np.ndarray]:
        """Solve ``(H + lam*diag(H)) x = g`` by eliminating the landmarks."""
        dp, dl = self.diag
        B = self.Hll.copy()
        B[:, [0, 1, 2], [0, 1, 2]] += lam * dl.reshape(-1, 3)
        try:
            Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError:
            raise SingularInformationError("singular landmark block") from None
        n = len(B)
        HB = (np.swapaxes(self.Hpl.reshape(-1, n, 3), 0, 1) @ Binv).swapaxes(0, 1).reshape(-1, 3 * n)
        S = self.Hpp + np.diag(lam * dp) - HB @ self.Hpl.T
        xp = CholeskyFactor(0.5 * (S + S.T)).solve(self.gp - HB @ self.gl) if len(S) else np.zeros(0)
        xl = (Binv @ (self.gl - self.Hpl.T @ xp).reshape(n, 3, 1)).ravel()
        return xp, xl


def optimize_map(g: FactorGraph, init: Estimate, cfg: SolverSettings = SolverSettings()) -> MapResult:
    """Levenberg-Marquardt on the pose/landmark manifold.

    Damping is Marquardt-style (``lambda * diag(H)``), updated from the ratio
    of actual to predicted cost decrease. Steps that push more landmarks
    behind a camera are rejected. The returned cost is
    ``0.5 * ||whitened residual||^2``.
    """
    pk = _Packed(g)
    x = {k: init[k] for k in pk.order} if all(k in init for k in pk.order) else None
    if x is None:
        missing = [k for k in pk.order if k not in init]
        raise StructuralError(f"initial estimate misses {len(missing)} variable(s), e.g. {missing[0]!r}")
    res, skipped, A = pk._evaluate(x)
    H = (A.T @ A).tocsc()
    try:
        CholeskyFactor(H)
    except SingularInformationError:
        raise RankDeficiencyError(null_space_dim(H)) from None

    cost = 0.5 * float(res @ res)
    lam = cfg.lambda_init
    it = 0
    sys_ = pk.normal_equations(x)[2]
    while it < cfg.max_iterations:
        if cost == 0.0:
            break
        it += 1
        dp, dl = sys_.diag
        growth = cfg.lambda_factor
        accepted = False
        while lam <= cfg.lambda_max:
            try:
                xp, xl = sys_.solve_damped(lam)
            except SingularInformationError:
                lam *= growth
                continue
            delta = np.zeros(pk.ncols)
            delta[pk.pose_cols] = -xp
            delta[pk.land_cols] = -xl
            x_new = pk.retract(x, delta)
            res_new, skipped_new = pk.residual_only(x_new)
            cost_new = 0.5 * float(res_new @ res_new)
            # dropping behind-camera factors must not pass for a cost decrease
            if cost_new <= cost and skipped_new <= skipped:
                accepted = True
                break
            lam *= growth
            growth *= 2.0
        if not accepted:
            break
        # model decrease 0.5 * x^T (lam D x + g) for the step x = -delta
        predicted = 0.5 * float(xp @ (lam * dp * xp + sys_.gp) + xl @ (lam * dl * xl + sys_.gl))
        rho = (cost - cost_new) / predicted if predicted > 0 else 0.0
        step = float(np.linalg.norm(delta))
        rel = (cost - cost_new) / cost
        x, cost, skipped = x_new, cost_new, skipped_new
        lam = max(lam * max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3), 1e-12)
        if rel < cfg.rel_decrease_tol or step < cfg.step_tol or cost == 0.0:
            break
        sys_ = pk.normal_equations(x)[2]
    _, skipped = pk.residual_only(x)
    if skipped:
        log.warning("%d projection factor(s) behind the camera at the MAP estimate", skipped)
    return MapResult(x, cost, it, skipped)


# ---------------------------------------------------------------------------
# marginals
# ---------------------------------------------------------------------------


def _pose_to_ypr(block: np.ndarray, T: Pose) -> np.ndarray:
    J = np.eye(6)
    J[:3, :3] = ypr_body_jacobian(ypr_from_matrix(T.rotation))
    return J @ block @ J.T


def marginal_covariances(
    g: FactorGraph, e: Estimate, keys: Iterable[VariableKey] | None = None,
    rotation_coords: str = "ypr",
) -> dict[VariableKey, np.ndarray]:
    """Diagonal blocks of the inverse information matrix at ``e``.

    Pose blocks are 6x6 in (rotation, position) order; the rotation part is
    mapped to yaw-pitch-roll coordinates unless ``rotation_coords="tangent"``.
    """
    if rotation_coords not in ("ypr", "tangent"):
        raise ValueError(f"unknown rotation_coords {rotation_coords!r}")
    keys = list(g.variables) if keys is None else list(keys)
    for k in keys:
        if k not in g.variables:
            raise StructuralError(f"unknown variable {k!r}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ls = linearize(g, e)
    fac = CholeskyFactor(information_matrix(ls))
    cols = np.concatenate([ls.offsets[k] + np.arange(DIM[k.kind]) for k in keys]) if keys else []
    E = np.zeros((ls.jacobian.shape[1], len(cols)))
    E[cols, np.arange(len(cols))] = 1.0
    X = fac.solve(E)
    out, c = {}, 0
    for k in keys:
        n = DIM[k.kind]
        block = X[ls.offsets[k]:ls.offsets[k] + n, c:c + n]
        block = 0.5 * (block + block.T)
        if k.kind == POSE and rotation_coords == "ypr":
            block = _pose_to_ypr(block, e[k])
        out[k] = block
        c += n
    return out


def marginal_covariance(g: FactorGraph, e: Estimate, key: VariableKey,
                        rotation_coords: str = "ypr") -> np.ndarray:
    return marginal_covariances(g, e, [key], rotation_coords)[key]
