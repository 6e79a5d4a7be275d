import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_scores, random_instance

from facadeloc.likelihood import (LikelihoodParams, SceneScorer, distance_weight, likelihood_ratio,
                                  pose_likelihood, similarity, similarity_max)
from facadeloc.localizer import orientation_set
from facadeloc.mapdata import BuildingMap, make_building
from facadeloc.projection import Pose, PredictedFacade, project_map
from facadeloc.scene import CameraIntrinsics, ObservedFacade, SceneModel
from facadeloc.synthworld import DEFAULT_INTRINSICS, SynthConfig, generate_map, render_scene, sample_pose

SIGMA = 50.0


def z(a, b, theta, d=0.0, bld="A"):
    return PredictedFacade(a, b, theta, bld, d)


def o(a, b, theta, dist=None):
    return ObservedFacade(a, b, theta, dist)


def as_objects(pred, obs):
    return ([PredictedFacade(a, b, t, bld, d) for a, b, t, bld, d in pred],
            [ObservedFacade(a, b, t, dist) for a, b, t, dist in obs])


def test_distance_weight_examples():
    assert distance_weight(0.0, SIGMA) == 1.0
    assert distance_weight(SIGMA, SIGMA) == pytest.approx(math.exp(-0.5))
    assert distance_weight(3 * SIGMA, SIGMA) == pytest.approx(0.011109, abs=1e-6)
    with pytest.raises(ValueError):
        LikelihoodParams(sigma_m=0.0)


def test_similarity_examples():
    assert similarity([z(0, 100, 0.0)], [o(0, 100, 0.0)]) == pytest.approx(100.0)
    assert similarity([z(0, 100, 0.0)], [o(0, 100, 90.0)]) == pytest.approx(0.0, abs=1e-12)
    d = SIGMA * math.sqrt(2.0 * math.log(2.0))  # weight 0.5
    assert similarity([z(0, 50, 30.0, d)], [o(25, 75, 30.0)]) == pytest.approx(12.5)


def test_similarity_max_examples():
    assert similarity_max([z(0, 40, 10.0, 80.0)], [o(0, 100, 0.0)]) == pytest.approx(100.0)
    d = SIGMA * math.sqrt(-2.0 * math.log(0.8))  # weight 0.8
    assert similarity_max([z(0, 50, 0.0, d)], []) == pytest.approx(40.0)
    assert similarity_max([], []) == 0.0


def test_pose_likelihood_examples():
    bmap = BuildingMap((make_building("A", [(-5, SIGMA), (5, SIGMA), (5, SIGMA + 1), (-5, SIGMA + 1)]),))
    intr = CameraIntrinsics(1000, 90.0)
    zs = project_map(bmap, Pose(0, 0, 0), intr)
    # a 10 m wall seen from 50 m: its nearest endpoint sits at sqrt(50^2 + 5^2)
    scene = SceneModel(intr, [o(zs[0].start_col, zs[0].end_col, zs[0].theta_deg)])
    expected = distance_weight(zs[0].distance_m, SIGMA)
    assert pose_likelihood(scene, Pose(0, 0, 0), bmap) == pytest.approx(expected)
    # camera facing away: Z empty, p = 0
    assert pose_likelihood(scene, Pose(0, 0, 180), bmap) == 0.0


def test_perfect_match_at_sigma():
    s = similarity([z(10, 60, 20.0, SIGMA)], [o(10, 60, 20.0)])
    smax = similarity_max([z(10, 60, 20.0, SIGMA)], [o(10, 60, 20.0)])
    assert float(likelihood_ratio(s, smax)) == pytest.approx(math.exp(-0.5))


def test_ratio_zero_when_nothing():
    assert float(likelihood_ratio(0.0, 0.0)) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans(), st.booleans())
def test_interval_equals_brute_force(seed, identity_aware, cap):
    rng = np.random.default_rng(seed)
    _, pred, obs = random_instance(rng, max_facades=12, max_cols=300)
    params = LikelihoodParams(SIGMA, identity_aware, cap)
    Z, Zhat = as_objects(pred, obs)
    s_ref, smax_ref = brute_scores(pred, obs, SIGMA, identity_aware, cap)
    assert similarity(Z, Zhat, params) == pytest.approx(s_ref, abs=1e-9)
    assert similarity_max(Z, Zhat, params) == pytest.approx(smax_ref, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans())
def test_capped_likelihood_bounded(seed, identity_aware):
    rng = np.random.default_rng(seed)
    _, pred, obs = random_instance(rng, max_facades=20, max_cols=500)
    Z, Zhat = as_objects(pred, obs)
    params = LikelihoodParams(SIGMA, identity_aware, True)
    s, smax = similarity(Z, Zhat, params), similarity_max(Z, Zhat, params)
    assert 0.0 <= s <= smax + 1e-9
    assert 0.0 <= float(likelihood_ratio(s, smax)) <= 1.0


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 500))
def test_empty_columns_do_not_change_p(seed, pad):
    rng = np.random.default_rng(seed)
    _, pred, obs = random_instance(rng, max_facades=10, max_cols=200)
    Z, Zhat = as_objects(pred, obs)
    Zs = [PredictedFacade(f.start_col + pad, f.end_col + pad, f.theta_deg, f.building, f.distance_m) for f in Z]
    Zh = [ObservedFacade(f.start_col + pad, f.end_col + pad, f.theta_deg, f.identity_dist) for f in Zhat]
    p0 = likelihood_ratio(similarity(Z, Zhat), similarity_max(Z, Zhat))
    p1 = likelihood_ratio(similarity(Zs, Zh), similarity_max(Zs, Zh))
    assert float(p1) == pytest.approx(float(p0), abs=1e-12)


def test_monotone_in_angle():
    ps = []
    for dt in np.linspace(0, 90, 31):
        Z, Zh = [z(0, 80, 40.0, 20.0)], [o(10, 90, 40.0 + dt)]
        ps.append(float(likelihood_ratio(similarity(Z, Zh), similarity_max(Z, Zh))))
    assert all(b <= a + 1e-12 for a, b in zip(ps, ps[1:]))


@given(st.integers(0, 2 ** 32 - 1))
def test_identity_all_same_equals_geometry(seed):
    rng = np.random.default_rng(seed)
    _, pred, obs = random_instance(rng, max_facades=12, max_cols=300, n_buildings=1)
    obs = [(a, b, t, {"B0": 1.0}) for a, b, t, _ in obs]
    Z, Zhat = as_objects(pred, obs)
    on = LikelihoodParams(SIGMA, identity_aware=True)
    assert similarity(Z, Zhat, on) == similarity(Z, Zhat)
    assert similarity_max(Z, Zhat, on) == similarity_max(Z, Zhat)


def test_soft_identity_weight():
    Z = [z(0, 10, 0.0, 0.0, "A")]
    Zh = [o(0, 10, 0.0, {"A": 0.25, "B": 0.75})]
    assert similarity(Z, Zh, LikelihoodParams(identity_aware=True)) == pytest.approx(2.5)


def test_raw_sum_double_counts():
    Z = [z(0, 10, 0.0), z(0, 10, 0.0, 0.0, "B")]
    Zh = [o(0, 10, 0.0)]
    assert similarity(Z, Zh, LikelihoodParams(cap_per_column=False)) == pytest.approx(20.0)
    assert similarity(Z, Zh) == pytest.approx(10.0)


@pytest.mark.parametrize("identity_aware,occlusion", [(False, False), (True, False), (True, True)])
def test_scorer_matches_pose_likelihood(identity_aware, occlusion):
    bmap = generate_map(SynthConfig(seed=2, n_buildings=12))
    rng = np.random.default_rng(7)
    pose = sample_pose(bmap, rng, DEFAULT_INTRINSICS, min_facades=2)
    scene, _ = render_scene(bmap, pose, DEFAULT_INTRINSICS)
    params = LikelihoodParams(identity_aware=identity_aware, occlusion=occlusion)
    scorer = SceneScorer(scene, bmap, params=params)
    gammas = orientation_set(9.0)
    for dx, dy in ((0, 0), (7, -3), (-15, 12)):
        got = scorer.likelihoods(pose.x + dx, pose.y + dy, gammas)
        want = [pose_likelihood(scene, Pose(pose.x + dx, pose.y + dy, g), bmap, params=params) for g in gammas]
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_noiseless_true_pose_high_when_close():
    # a single wall well inside sigma
    bmap = BuildingMap((make_building("A", [(-10, 5), (10, 5), (10, 8), (-10, 8)]),))
    scene, _ = render_scene(bmap, Pose(0, 0, 0), DEFAULT_INTRINSICS)
    assert pose_likelihood(scene, Pose(0, 0, 0), bmap, params=LikelihoodParams(sigma_m=200.0)) >= 0.95
