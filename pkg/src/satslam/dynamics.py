"""Clohessy-Wiltshire relative motion in the target frame and camera pointing.

Target frame axes: x radial, y along-track, z orbit normal.  All values SI.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from satslam.geometry import Pose

MU_EARTH = 3.986004418e14  # m^3/s^2
R_EARTH = 6378.137e3  # m

EPS_POS = 1e-9
EPS_CROSS = 1e-12


class DegenerateGeometryError(ValueError):
    """Pointing frame undefined (chaser on the target point, or velocity
    parallel to the boresight)."""

    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step


def _vec3(x) -> np.ndarray:
    a = np.array(x, dtype=float).reshape(3)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RelativeState:
    r: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "r", _vec3(self.r))
        object.__setattr__(self, "v", _vec3(self.v))
        object.__setattr__(self, "t", float(self.t))
        if not (np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.v)) and np.isfinite(self.t)):
            raise ValueError("relative state must be finite")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.v])

    @classmethod
    def from_vector(cls, x: np.ndarray, t: float = 0.0) -> "RelativeState":
        return cls(x[:3], x[3:], t)


@dataclass(frozen=True)
class OrbitParams:
    nu: float
    sigma_w: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dt: float | None = None  # defaults to one sixtieth of the orbital period

    def __post_init__(self) -> None:
        if not self.nu > 0:
            raise ValueError("mean motion must be positive")
        S = np.array(self.sigma_w, dtype=float).reshape(3, 3)
        if not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() < -1e-15:
            raise ValueError("sigma_w must be symmetric PSD")
        S.flags.writeable = False
        object.__setattr__(self, "sigma_w", S)
        dt = self.period / 60.0 if self.dt is None else float(self.dt)
        if not dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "dt", dt)

    @property
    def period(self) -> float:
        return 2.0 * np.pi / self.nu


def mean_motion(altitude: float, mu: float = MU_EARTH, body_radius: float = R_EARTH) -> float:
    if altitude < 0 or mu <= 0 or body_radius <= 0:
        raise ValueError(f"invalid orbit: altitude={altitude}, mu={mu}, radius={body_radius}")
    return float(np.sqrt(mu / (body_radius + altitude) ** 3))


def closed_orbit_vy(x0: float, nu: float) -> float:
    """Along-track velocity that closes the relative orbit (no secular drift)."""
    return -2.0 * nu * x0


def cw_stm(nu: float, t: float) -> np.ndarray:
    """6x6 state transition matrix for ``[x, y, z, vx, vy, vz]``."""
    nt = nu * t
    s, c = np.sin(nt), np.cos(nt)
    return np.array(
        [
            [4 - 3 * c, 0, 0, s / nu, 2 * (1 - c) / nu, 0],
            [6 * (s - nt), 1, 0, -2 * (1 - c) / nu, (4 * s - 3 * nt) / nu, 0],
            [0, 0, c, 0, 0, s / nu],
            [3 * nu * s, 0, 0, c, 2 * s, 0],
            [-6 * nu * (1 - c), 0, 0, -2 * s, 4 * c - 3, 0],
            [0, 0, -nu * s, 0, 0, c],
        ]
    )


def cw_rhs(x: np.ndarray, nu: float, w: np.ndarray | None = None) -> np.ndarray:
    """Time derivative of ``[r, v]`` under the CW equations."""
    acc = np.array(
        [3 * nu**2 * x[0] + 2 * nu * x[4], -2 * nu * x[3], -(nu**2) * x[2]]
    )
    if w is not None:
        acc = acc + w
    return np.concatenate([x[3:], acc])


def cw_closed_form(s0: RelativeState, nu: float, t: float) -> RelativeState:
    if not nu > 0:
        raise ValueError("mean motion must be positive")
    return RelativeState.from_vector(cw_stm(nu, t) @ s0.as_vector(), s0.t + t)


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    lam, V = np.linalg.eigh(S)
    return V * np.sqrt(np.clip(lam, 0.0, None))


def cw_propagate_noisy(
    s0: RelativeState, p: OrbitParams, steps: int, rng: np.random.Generator
) -> list[RelativeState]:
    """Propagate with a zero-order-hold disturbance ``w ~ N(0, sigma_w)`` per step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    phi = cw_stm(p.nu, p.dt)
    L = _psd_sqrt(p.sigma_w)
    dt = p.dt
    out = [s0]
    x = s0.as_vector()
    for i in range(steps):
        w = L @ rng.standard_normal(3)
        x = phi @ x
        x[:3] += 0.5 * w * dt * dt
        x[3:] += w * dt
        out.append(RelativeState.from_vector(x, s0.t + (i + 1) * dt))
    return out


def pointing_rotation(r_ct: np.ndarray, v_ct: np.ndarray, r_o: np.ndarray) -> np.ndarray:
    """Camera attitude ``[c1 c2 c3]`` with the boresight c3 aimed at ``r_o``.

    c2 is normal to the plane spanned by the velocity and the line of sight.
    """
    r_oc = np.asarray(r_o, dtype=float) - np.asarray(r_ct, dtype=float)
    dist = np.linalg.norm(r_oc)
    if dist <= EPS_POS:
        raise DegenerateGeometryError("chaser coincides with the observation target")
    c3 = r_oc / dist
    n = np.cross(np.asarray(v_ct, dtype=float), r_oc)
    nn = np.linalg.norm(n)
    if nn <= EPS_CROSS:
        raise DegenerateGeometryError("velocity parallel to the boresight")
    c2 = n / nn
    c1 = np.cross(c2, c3)
    return np.column_stack([c1, c2, c3])


def pointing_pose(s: RelativeState, r_o: np.ndarray) -> Pose:
    return Pose(pointing_rotation(s.r, s.v, r_o), s.r)
