import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cw_rk4
from satslam.dynamics import (
    MU_EARTH,
    R_EARTH,
    DegenerateGeometryError,
    OrbitParams,
    RelativeState,
    closed_orbit_vy,
    cw_closed_form,
    cw_propagate_noisy,
    cw_stm,
    mean_motion,
    pointing_rotation,
)

NU = mean_motion(550e3)
SEED0_TERMINAL_DEVIATION = 17.604418332326944


def test_mean_motion_hst_altitude():
    assert mean_motion(550e3, MU_EARTH, R_EARTH) == pytest.approx(1.0948e-3, rel=1e-4)
    # cross-check against the nominal chaser along-track speed of -0.0022 m/s
    assert -2 * mean_motion(550e3) * 1.0 == pytest.approx(-0.0022, abs=1e-4)


def test_mean_motion_unit_normalization():
    R = 7.0e6
    assert mean_motion(0.0, R**3, R) == pytest.approx(1.0)


@pytest.mark.parametrize("args", [(-R_EARTH, MU_EARTH, R_EARTH), (1.0, 0.0, R_EARTH), (1.0, MU_EARTH, -1.0)])
def test_mean_motion_domain(args):
    with pytest.raises(ValueError):
        mean_motion(*args)


def test_closed_orbit_vy():
    assert closed_orbit_vy(1.0, 1.0948e-3) == pytest.approx(-2.1896e-3)
    assert closed_orbit_vy(0.0, NU) == 0.0
    assert closed_orbit_vy(-1.0, 1.0) == 2.0


def test_closed_form_equilibrium():
    s = cw_closed_form(RelativeState(np.zeros(3), np.zeros(3)), NU, 1234.5)
    assert np.all(s.r == 0) and np.all(s.v == 0)


def test_closed_orbit_returns_after_one_period():
    s0 = RelativeState([1, 6, 5], [0.0131, closed_orbit_vy(1.0, NU), 0.0])
    s1 = cw_closed_form(s0, NU, 2 * np.pi / NU)
    assert np.linalg.norm(s1.r - s0.r) < 1e-6
    assert np.linalg.norm(s1.v - s0.v) < 1e-9
    # independent integration agrees
    xr = cw_rk4(s0.as_vector(), NU, 2 * np.pi / NU)
    assert np.linalg.norm(xr[:3] - s0.r) < 1e-6


def test_rounded_velocity_drifts_slightly():
    # -0.0022 m/s is a rounded closed-orbit value: the y secular term is -6 pi (2 x0 + vy0/nu)
    s0 = RelativeState([1, 6, 5], [0.0131, -0.0022, 0.0])
    T = 2 * np.pi / NU
    s1 = cw_closed_form(s0, NU, T)
    expected = -6 * np.pi * (2 * 1.0 + (-0.0022) / NU)
    assert s1.r[1] - s0.r[1] == pytest.approx(expected, rel=1e-9)
    xr = cw_rk4(s0.as_vector(), NU, T)
    assert xr[1] - s0.r[1] == pytest.approx(expected, abs=1e-6)


def test_open_orbit_secular_drift_sign():
    # vy0 above the closed value -> drift towards -y (the orbit "falls behind")
    s0 = RelativeState([1, 0, 0], [0.0, closed_orbit_vy(1.0, NU) + 1e-4, 0.0])
    T = 2 * np.pi / NU
    drift_cf = cw_closed_form(s0, NU, T).r[1]
    drift_rk = cw_rk4(s0.as_vector(), NU, T)[1]
    assert drift_cf < -1.0
    assert drift_cf == pytest.approx(drift_rk, abs=1e-6)
    assert drift_cf == pytest.approx(-6 * np.pi * 1e-4 / NU, rel=1e-9)


@given(t1=st.floats(0, 6000), t2=st.floats(0, 6000))
def test_stm_composes(t1, t2):
    P = cw_stm(NU, t1 + t2)
    Q = cw_stm(NU, t1) @ cw_stm(NU, t2)
    assert np.linalg.norm(P - Q) <= 1e-9 * np.linalg.norm(P)


@given(z0=st.floats(-10, 10), vz0=st.floats(-0.02, 0.02))
@settings(max_examples=20, deadline=None)
def test_cross_track_harmonic(z0, vz0):
    s0 = RelativeState([0.3, -2.0, z0], [0.001, -0.0006, vz0])
    ts = np.linspace(0, 2 * np.pi / NU, 4001)
    zs = np.array([cw_closed_form(s0, NU, t).r[2] for t in ts])
    amp = np.hypot(z0, vz0 / NU)
    assert np.max(np.abs(zs)) == pytest.approx(amp, abs=1e-6 + 1e-6 * amp)


def test_closed_form_matches_rk4_everywhere():
    s0 = RelativeState([1, 6, 5], [0.0131, -0.0022, 0.0])
    T = 2 * np.pi / NU
    _, samples = cw_rk4(s0.as_vector(), NU, T, h=0.1, record_every=100)
    h = T / int(round(T / 0.1))
    for i, x in enumerate(samples):
        cf = cw_closed_form(s0, NU, i * 100 * h)
        assert np.linalg.norm(cf.r - x[:3]) < 1e-5


# -- noisy propagation --------------------------------------------------------


def test_noise_free_propagation_equals_closed_form():
    p = OrbitParams(NU, np.zeros((3, 3)))
    s0 = RelativeState([1, 6, 5], [0.0131, -0.0022, 0.0])
    traj = cw_propagate_noisy(s0, p, 60, np.random.default_rng(3))
    assert len(traj) == 61
    for i, s in enumerate(traj):
        ref = cw_closed_form(s0, NU, i * p.dt)
        np.testing.assert_allclose(s.r, ref.r, atol=1e-9)
        np.testing.assert_allclose(s.v, ref.v, atol=1e-12)


def test_noisy_propagation_deterministic():
    p = OrbitParams(NU, 1e-10 * np.eye(3))
    s0 = RelativeState([1, 6, 5], [0.0131, -0.0022, 0.0])
    a = cw_propagate_noisy(s0, p, 60, np.random.default_rng(0))
    b = cw_propagate_noisy(s0, p, 60, np.random.default_rng(0))
    assert all(np.array_equal(x.r, y.r) and np.array_equal(x.v, y.v) for x, y in zip(a, b))


def test_noisy_propagation_seed0_regression():
    # frozen from a run at seed 0; a 1e-10 (m/s^2)^2 zero-order-hold disturbance
    # over one orbit of 60 steps moves the chaser metres, not centimetres
    p = OrbitParams(NU, 1e-10 * np.eye(3))
    s0 = RelativeState([1, 6, 5], [0.0131, closed_orbit_vy(1.0, NU), 0.0])
    traj = cw_propagate_noisy(s0, p, 60, np.random.default_rng(0))
    ref = cw_closed_form(s0, NU, 60 * p.dt)
    dev = np.linalg.norm(traj[-1].r - ref.r)
    assert dev == pytest.approx(SEED0_TERMINAL_DEVIATION, rel=1e-9)


def test_noisy_propagation_zoh_increment():
    # one step from rest with a single known disturbance draw
    p = OrbitParams(NU, 4e-10 * np.eye(3), dt=10.0)
    rng = np.random.default_rng(11)
    w = 2e-5 * np.random.default_rng(11).standard_normal(3)
    s1 = cw_propagate_noisy(RelativeState(np.zeros(3), np.zeros(3)), p, 1, rng)[1]
    np.testing.assert_allclose(s1.v, w * 10.0, rtol=1e-12, atol=1e-20)
    np.testing.assert_allclose(s1.r, 0.5 * w * 100.0, rtol=1e-12, atol=1e-20)


def test_orbit_params_validation():
    with pytest.raises(ValueError):
        OrbitParams(0.0)
    with pytest.raises(ValueError):
        OrbitParams(NU, -np.eye(3))
    assert OrbitParams(NU).dt == pytest.approx(2 * np.pi / NU / 60)


# -- pointing -----------------------------------------------------------------


def test_pointing_hand_case():
    R = pointing_rotation([0, 0, -1], [0, 1, 0], [0, 0, 0])
    np.testing.assert_allclose(R[:, 2], [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(R[:, 1], [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(R[:, 0], [0, -1, 0], atol=1e-15)


def test_pointing_degenerate():
    with pytest.raises(DegenerateGeometryError):
        pointing_rotation([0, 0, -1], [0, 0, 2], [0, 0, 0])
    with pytest.raises(DegenerateGeometryError):
        pointing_rotation([1, 2, 3], [0, 1, 0], [1, 2, 3])


def test_pointing_orthonormal_random():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        r, v, o = rng.normal(0, 10, 3), rng.normal(0, 0.01, 3), rng.normal(0, 2, 3)
        R = pointing_rotation(r, v, o)
        assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-12
        assert np.linalg.det(R) > 0
        np.testing.assert_allclose(np.linalg.norm(R, axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(R[:, 0], np.cross(R[:, 1], R[:, 2]), atol=1e-15)
        los = (o - r) / np.linalg.norm(o - r)
        np.testing.assert_allclose(R[:, 2], los, atol=1e-12)

