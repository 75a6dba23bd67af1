import json
import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from oracles import central_diff, dense_information, dense_logdet, random_rotation
from satslam.camera import project, project_jacobians
from satslam.geometry import Pose, se3_local, se3_retract
from satslam.graph import (
    FactorGraph,
    PriorFactor,
    ProjectionFactor,
    RankDeficiencyError,
    SingularInformationError,
    StructuralError,
    CholeskyFactor,
    estimate_from_dict,
    estimate_to_dict,
    information_matrix,
    landmark_key,
    linearize,
    log_det,
    marginal_covariance,
    marginal_covariances,
    optimize_map,
    pose_key,
)
from toy import K, SIGMA_P, make_toy


# -- structure ------------------------------------------------------------------


def test_dimensions():
    g = FactorGraph()
    g.add_pose_variable(Pose.identity())
    assert g.tangent_dim == 6
    g.add_pose_variable(Pose.identity())
    for _ in range(3):
        g.add_landmark_variable(np.zeros(3))
    assert g.tangent_dim == 21


def test_structural_errors():
    g = FactorGraph()
    with pytest.raises(StructuralError):
        g.add_prior(PriorFactor(pose_key(0), Pose.identity(), SIGMA_P))
    g.add_pose_variable(Pose.identity(), 0)
    with pytest.raises(StructuralError):
        g.add_pose_variable(Pose.identity(), 0)
    with pytest.raises(StructuralError):
        g.add_projection(ProjectionFactor(pose_key(0), landmark_key(3), [1, 2], K.sigma_v, K))
    with pytest.raises(StructuralError):
        optimize_map(g, {})


def test_non_positive_covariance_rejected():
    with pytest.raises(ValueError):
        PriorFactor(pose_key(0), Pose.identity(), np.zeros((6, 6)))


def test_prior_at_its_own_value():
    g = FactorGraph()
    p = Pose(random_rotation(np.random.default_rng(0)), [1, 2, 3])
    g.add_pose_variable(p)
    g.add_prior(PriorFactor(pose_key(0), p, SIGMA_P))
    ls = linearize(g, g.initial_estimate())
    assert np.all(ls.residual == 0)
    np.testing.assert_allclose(ls.jacobian.toarray(), 1e3 * np.eye(6), atol=1e-9)


def test_information_matches_dense_accumulation():
    toy = make_toy(3, 5, np.random.default_rng(1))
    e = toy.truth
    H = information_matrix(linearize(toy.graph, e)).toarray()
    D = dense_information(toy.graph, e)
    assert np.linalg.norm(H - D) <= 1e-8 * np.linalg.norm(D)
    # projection part alone matches to machine precision
    g2 = make_toy(3, 5, np.random.default_rng(1), priors=False).graph
    H2 = information_matrix(linearize(g2, e)).toarray()
    assert np.linalg.norm(H2 - dense_information(g2, e)) <= 1e-12 * np.linalg.norm(H2)


def test_information_matrix_identity_and_random():
    assert np.array_equal(information_matrix(sp.eye(4)).toarray(), np.eye(4))
    rng = np.random.default_rng(2)
    A = sp.random(200, 90, density=0.05, random_state=3, format="csr")
    H = information_matrix(A).toarray()
    D = A.toarray().T @ A.toarray()
    assert np.max(np.abs(H - D)) <= 1e-12 * max(1.0, np.max(np.abs(D)))
    B = rng.standard_normal((40, 30))
    assert np.linalg.eigvalsh(information_matrix(B).toarray()).min() >= -1e-10


def test_log_det_examples():
    assert log_det(np.eye(7)) == 0.0
    assert log_det(np.diag([2.0, 8.0])) == pytest.approx(np.log(16.0), rel=1e-15)
    rng = np.random.default_rng(4)
    X = rng.standard_normal((50, 50))
    M = X @ X.T + 50 * np.eye(50)
    assert log_det(M) == pytest.approx(dense_logdet(M), rel=1e-9)


def test_log_det_sparse_path_matches_dense():
    toy = make_toy(10, 150, np.random.default_rng(5))
    H = information_matrix(linearize(toy.graph, toy.truth))
    assert H.shape[0] > 400  # exercises the sparse factorization
    assert log_det(H) == pytest.approx(dense_logdet(H.toarray()), rel=1e-9)
    b = np.arange(H.shape[0], dtype=float)
    x = CholeskyFactor(H).solve(b)
    np.testing.assert_allclose(H @ x, b, rtol=1e-6, atol=1e-6)


def test_singular_information():
    with pytest.raises(SingularInformationError):
        log_det(np.diag([1.0, 0.0]))
    with pytest.raises(SingularInformationError):
        log_det(np.array([[1.0, 2.0], [2.0, 1.0]]))


# -- marginals -------------------------------------------------------------------


def test_prior_only_marginal_is_prior_covariance():
    g = FactorGraph()
    p = Pose(random_rotation(np.random.default_rng(6)), [0, 1, 0])
    g.add_pose_variable(p)
    S = np.diag([1e-6, 2e-6, 3e-6, 4e-6, 5e-6, 6e-6])
    g.add_prior(PriorFactor(pose_key(0), p, S))
    C = marginal_covariance(g, g.initial_estimate(), pose_key(0), rotation_coords="tangent")
    np.testing.assert_allclose(C, S, rtol=1e-10)


def test_marginals_match_dense_inverse():
    toy = make_toy(4, 20, np.random.default_rng(7))
    e = toy.truth
    H = information_matrix(linearize(toy.graph, e)).toarray()
    Sigma = np.linalg.inv(H)
    offs = toy.graph.column_offsets()
    cov = marginal_covariances(toy.graph, e, rotation_coords="tangent")
    for k, C in cov.items():
        n = C.shape[0]
        ref = Sigma[offs[k]:offs[k] + n, offs[k]:offs[k] + n]
        assert np.linalg.norm(C - ref) <= 1e-8 * np.linalg.norm(ref)


def test_ypr_marginal_uses_rate_jacobian():
    from satslam.geometry import so3_exp, ypr_from_matrix
    toy = make_toy(3, 10, np.random.default_rng(8))
    k = pose_key(2)
    C_t = marginal_covariance(toy.graph, toy.truth, k, rotation_coords="tangent")
    C_y = marginal_covariance(toy.graph, toy.truth, k)
    R = toy.truth[k].rotation
    J = central_diff(lambda w: ypr_from_matrix(R @ so3_exp(w)), np.zeros(3))
    np.testing.assert_allclose(C_y[:3, :3], J @ C_t[:3, :3] @ J.T, rtol=1e-5, atol=1e-14)
    np.testing.assert_allclose(C_y[3:, 3:], C_t[3:, 3:], rtol=1e-12)
    with pytest.raises(ValueError):
        marginal_covariance(toy.graph, toy.truth, k, rotation_coords="quaternion")


def test_adding_a_factor_never_loses_information():
    rng = np.random.default_rng(9)
    toy = make_toy(4, 15, rng)
    e = toy.truth
    before = marginal_covariances(toy.graph, e, rotation_coords="tangent")
    ld0 = log_det(information_matrix(linearize(toy.graph, e)))
    g = toy.graph.copy()
    z = project(e[pose_key(1)], e[landmark_key(3)], K) + 1.0
    g.add_projection(ProjectionFactor(pose_key(1), landmark_key(3), z, K.sigma_v, K))
    after = marginal_covariances(g, e, rotation_coords="tangent")
    assert log_det(information_matrix(linearize(g, e))) >= ld0
    for k in before:
        assert np.trace(after[k]) <= np.trace(before[k]) + 1e-10


# -- linearization ---------------------------------------------------------------


def test_behind_camera_factor_is_skipped():
    g = FactorGraph()
    g.add_pose_variable(Pose.identity())
    g.add_landmark_variable([0, 0, 5])
    g.add_projection(ProjectionFactor(pose_key(0), landmark_key(0), [256, 256], K.sigma_v, K))
    e = g.initial_estimate()
    e[landmark_key(0)] = np.array([0.0, 0.0, -5.0])
    with pytest.warns(RuntimeWarning):
        ls = linearize(g, e)
    assert ls.skipped == 1
    assert ls.jacobian.count_nonzero() == 0 and np.all(ls.residual == 0)


def test_first_order_linearization():
    rng = np.random.default_rng(10)
    toy = make_toy(3, 8, rng, noise=2.0)
    e = toy.truth
    ls = linearize(toy.graph, e)
    from satslam.graph import _Packed
    pk = _Packed(toy.graph)
    d = rng.standard_normal(toy.graph.tangent_dim)
    errs = []
    for h in (1e-3, 1e-4):
        r_h, _ = pk.residual_only(pk.retract(e, h * d))
        errs.append(np.linalg.norm(r_h - ls.residual - h * (ls.jacobian @ d)))
    # second-order remainder: shrinks ~100x for a 10x smaller step
    assert errs[1] < errs[0] / 50


def test_row_order_and_column_permutation_invariance():
    toy = make_toy(3, 6, np.random.default_rng(11))
    e = toy.truth
    ld = log_det(information_matrix(linearize(toy.graph, e)))
    g2 = FactorGraph()
    keys = list(toy.graph.variables)[::-1]
    for k in keys:
        v = toy.graph.variables[k]
        if k.kind == "pose":
            g2.add_pose_variable(v, k.index)
        else:
            g2.add_landmark_variable(v, k.index)
    for f in toy.graph.factors[::-1]:
        g2.add_factor(f)
    assert log_det(information_matrix(linearize(g2, e))) == pytest.approx(ld, rel=1e-10)


# -- MAP estimation ---------------------------------------------------------------


def test_noise_free_converges_immediately():
    toy = make_toy(3, 8, np.random.default_rng(12))
    res = optimize_map(toy.graph, toy.truth)
    assert res.iterations <= 2
    assert res.cost < 1e-16


def test_perturbed_toy_recovers_generative_model():
    rng = np.random.default_rng(13)
    toy = make_toy(3, 8, rng, noise=2.0)
    init = {}
    for k, v in toy.truth.items():
        if k.kind == "pose":
            xi = np.concatenate([rng.normal(0, 0.01, 3), rng.normal(0, 0.1, 3)])
            init[k] = se3_retract(v, xi) if k.index >= 2 else v
        else:
            init[k] = v + rng.normal(0, 0.1, 3)
    res = optimize_map(toy.graph, init)
    costs = [0.5 * float(r @ r) for r in [linearize(toy.graph, init).residual]]
    assert res.cost <= costs[0]
    pix = []
    for f in toy.graph.factors:
        if isinstance(f, ProjectionFactor):
            pix.append(project(res.estimate[f.pose_key], res.estimate[f.landmark_key], K)
                       - project(toy.truth[f.pose_key], toy.truth[f.landmark_key], K))
    rms = np.sqrt(np.mean(np.square(pix)))
    assert rms < 3.0


def test_map_cost_monotone_from_far_start():
    rng = np.random.default_rng(14)
    toy = make_toy(4, 12, rng, noise=2.0)
    init = {k: (v + rng.normal(0, 0.3, 3) if k.kind == "landmark" else v) for k, v in toy.truth.items()}
    c0 = linearize(toy.graph, init).cost
    res = optimize_map(toy.graph, init)
    assert res.cost <= c0
    assert res.cost == pytest.approx(linearize(toy.graph, res.estimate).cost, rel=1e-12)


def test_no_priors_rank_deficiency():
    toy = make_toy(3, 8, np.random.default_rng(15), priors=False)
    with pytest.raises(RankDeficiencyError) as info:
        optimize_map(toy.graph, toy.truth)
    assert info.value.null_dim >= 7
    H = information_matrix(linearize(toy.graph, toy.truth)).toarray()
    s = np.linalg.svd(H, compute_uv=False)
    assert np.sum(s <= 1e-9 * s[0]) == info.value.null_dim


# -- serialization -------------------------------------------------------------------


def test_json_round_trip():
    toy = make_toy(3, 6, np.random.default_rng(16), noise=1.0)
    s = toy.graph.to_json()
    g2 = FactorGraph.from_json(s)
    assert g2.to_json() == s
    assert json.loads(s)["schema"] == 1
    e2 = estimate_from_dict(json.loads(json.dumps(estimate_to_dict(toy.truth))))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert linearize(g2, e2).cost == linearize(toy.graph, toy.truth).cost
    with pytest.raises(ValueError):
        FactorGraph.from_dict({"schema": 99})
