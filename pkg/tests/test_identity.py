import numpy as np
import pytest
from hypothesis import given, strategies as st

from facadeloc.identity import (CorrespondenceSet, PixelIdentityField, ReferenceLabeling, dumps_correspondences,
                                dumps_field, field_from_columns, identity_at_pose, label_reference_greedy,
                                label_reference_marginalized, likelihood_peaks, loads_correspondences,
                                loads_field, pixel_accuracy, transfer_identity)
from facadeloc.localizer import LikelihoodGrid, PoseSampling, reference_sampling
from facadeloc.mapdata import BuildingMap, FormatError, ValidationError, make_building
from facadeloc.projection import Pose
from facadeloc.scene import BUILDING, SKY, CameraIntrinsics, ObservedFacade, SceneModel, SemanticLabelMap
from facadeloc.synthworld import DEFAULT_INTRINSICS, SynthConfig, generate_map, render_scene, sample_pose

INTR = CameraIntrinsics(100, 90.0)


def seg_scene(lo, hi, width=100, height=10, facades=()):
    lab = np.full((height, width), SKY, dtype=np.uint8)
    lab[2:8, lo:hi] = BUILDING
    return SceneModel(CameraIntrinsics(width, 90.0), tuple(facades), None, SemanticLabelMap(lab))


def wall(bid, x0, x1, y=10.0):
    return make_building(bid, [(x0, y), (x1, y), (x1, y + 0.5), (x0, y + 0.5)])


def col_labels(f):
    """Column -> argmax id for rows inside the building band."""
    return f.argmax_ids()[4]


def test_identity_at_pose_single():
    f = identity_at_pose(seg_scene(25, 75), Pose(0, 0, 0), BuildingMap((wall("A", -5, 5),)))
    lab = col_labels(f)
    assert set(lab[25:75]) == {"A"} and set(lab[:25]) == {None}
    assert f.labeled.sum() == 50 * 6


def test_identity_at_pose_split():
    # A covers [0, 30), B covers [30, 60)
    bmap = BuildingMap((wall("A", -10, -4), wall("B", -4, 2)))
    f = identity_at_pose(seg_scene(0, 50), Pose(0, 0, 0), bmap)
    lab = col_labels(f)
    assert list(lab[:30]) == ["A"] * 30 and list(lab[30:50]) == ["B"] * 20
    none = identity_at_pose(seg_scene(80, 95), Pose(0, 0, 0), bmap)
    assert not none.labeled.any()


def two_pose_labeling(p, who, width=10):
    s = PoseSampling(np.array([[0.0, 0.0], [10.0, 0.0]]), np.zeros(1))
    cols = np.array([[[who[0]] * width], [[who[1]] * width]])
    return ReferenceLabeling(LikelihoodGrid(s, np.array(p)[:, None]), cols, ["A", "B"])


def test_greedy_and_marginal_examples():
    scene = seg_scene(0, 10, width=10)
    bmap = BuildingMap(())
    lab = two_pose_labeling([0.9, 0.4], (1, 0))
    g = label_reference_greedy(scene, None, bmap, labeling=lab)
    assert g.at(3, 4) == {"B": 1.0}
    lab = two_pose_labeling([0.6, 0.2], (0, 1))
    m = label_reference_marginalized(scene, None, bmap, labeling=lab)
    assert m.at(3, 4) == pytest.approx({"A": 0.75, "B": 0.25})
    lab = two_pose_labeling([0.6, 0.2], (0, 0))
    assert label_reference_marginalized(scene, None, bmap, labeling=lab).at(0, 3) == {"A": 1.0}
    zero = two_pose_labeling([0.0, 0.0], (0, 1))
    assert not label_reference_greedy(scene, None, bmap, labeling=zero).labeled.any()
    assert not label_reference_marginalized(scene, None, bmap, labeling=zero).labeled.any()


def test_single_pose_greedy_equals_marginal():
    bmap = generate_map(SynthConfig(seed=1, n_buildings=10))
    pose = sample_pose(bmap, np.random.default_rng(4), min_facades=2)
    scene, _ = render_scene(bmap, pose)
    s = PoseSampling(np.array([[pose.x, pose.y]]), np.array([pose.gamma_deg]))
    g = label_reference_greedy(scene, None, bmap, sampling=s)
    m = label_reference_marginalized(scene, None, bmap, sampling=s)
    assert g == m
    assert g == identity_at_pose(scene, pose, bmap)


def test_greedy_at_rendered_grid_pose():
    bmap = generate_map(SynthConfig(seed=6, n_buildings=12))
    pose = sample_pose(bmap, np.random.default_rng(1), grid_spacing_m=10.0, orientation_step_deg=3.0,
                       min_facades=3, min_distinct=2, max_nearest_m=40.0)
    scene, truth = render_scene(bmap, pose)
    g = label_reference_greedy(scene, (pose.x, pose.y), bmap)
    assert g == identity_at_pose(scene, pose, bmap)
    assert pixel_accuracy(g, truth) > 0.95


def test_zero_facade_scene_empty_field():
    bmap = generate_map(SynthConfig(seed=1, n_buildings=5))
    scene = seg_scene(10, 20, width=DEFAULT_INTRINSICS.width_cols)
    scene = SceneModel(DEFAULT_INTRINSICS, (), None, scene.segmentation)
    assert not label_reference_greedy(scene, (100.0, 100.0), bmap).labeled.any()


def test_transfer_examples():
    ref = field_from_columns(np.ones((5, 20), dtype=bool),
                             np.array([[1.0, 0.0]] * 10 + [[0.0, 1.0]] * 10), ["A", "B"])
    q = SceneModel(INTR, (ObservedFacade(0, 40, 10.0), ObservedFacade(40, 60, 20.0), ObservedFacade(60, 90, 0.0)))
    only_a = CorrespondenceSet("q", [("r", [(c, 2, c % 10, 1) for c in range(10)])])
    assert transfer_identity(q, only_a, {"r": ref}) == [{"A": 1.0}, None, None]
    mixed = [(40 + k, 1, k, 0) for k in range(6)] + [(50, 1, 15, 3), (55, 1, 19, 4)]
    out = transfer_identity(q, CorrespondenceSet("q", [("r", mixed)]), {"r": ref})
    assert out[1] == pytest.approx({"A": 0.75, "B": 0.25})
    with pytest.raises(ValidationError):
        transfer_identity(q, CorrespondenceSet("q", [("zz", [])]), {"r": ref})


@given(st.lists(st.tuples(st.integers(0, 99), st.integers(0, 19)), max_size=40), st.randoms())
def test_transfer_permutation_invariant(pts, rnd):
    ref = field_from_columns(np.ones((5, 20), dtype=bool),
                             np.array([[0.3, 0.7]] * 7 + [[1.0, 0.0]] * 13), ["A", "B"])
    q = SceneModel(INTR, (ObservedFacade(0, 50, 10.0), ObservedFacade(50, 100, 20.0)))
    matches = [(c, 0, rc, 2) for c, rc in pts]
    a = transfer_identity(q, CorrespondenceSet("q", [("r", matches)]), {"r": ref})
    rnd.shuffle(matches)
    b = transfer_identity(q, CorrespondenceSet("q", [("r", matches)]), {"r": ref})
    assert a == b


def test_pixel_accuracy_examples():
    mask = np.ones((2, 4), dtype=bool)
    truth = field_from_columns(mask, np.array([[1.0, 0]] * 4), ["A", "B"])
    assert pixel_accuracy(truth, truth) == 1.0
    half = field_from_columns(mask, np.array([[1.0, 0]] * 2 + [[0, 1.0]] * 2), ["A", "B"])
    assert pixel_accuracy(half, truth) == 0.5
    assert pixel_accuracy(PixelIdentityField.empty(4, 2), truth) == 0.0
    assert np.isnan(pixel_accuracy(truth, PixelIdentityField.empty(4, 2)))
    with pytest.raises(ValidationError):
        pixel_accuracy(PixelIdentityField.empty(3, 2), truth)


def test_field_round_trip():
    rng = np.random.default_rng(0)
    mask = rng.random((6, 9)) < 0.5
    cd = rng.random((9, 3))
    cd /= cd.sum(axis=1, keepdims=True)
    f = field_from_columns(mask, cd, ["A", "B", "C"])
    text = dumps_field(f)
    assert loads_field(text) == f
    assert dumps_field(loads_field(text)) == text
    with pytest.raises(FormatError):
        loads_field('{"width": 2}')


def test_correspondence_round_trip():
    c = CorrespondenceSet("q0", [("r1", [(1, 2, 3.5, 4), (5, 6, 7, 8)]), ("r2", [])])
    text = dumps_correspondences(c)
    back = loads_correspondences(text)
    assert back == c and dumps_correspondences(back) == text
    with pytest.raises(FormatError):
        loads_correspondences('{"query": "q", "refs": [{"ref": "r", "matches": [[1, 2, 3]]}]}')


def test_likelihood_peaks():
    s = reference_sampling((0.0, 0.0), orientation_step_deg=90.0)
    v = np.zeros((9, 4))
    assert likelihood_peaks(LikelihoodGrid(s, v)) == 0
    v[0, 0] = 1.0
    v[8, 2] = 0.9
    assert likelihood_peaks(LikelihoodGrid(s, v)) == 2
    v[4, 1] = 0.95  # bridges both corners through the centre
    v[8, 1] = 0.85
    v[0, 1] = 0.85
    assert likelihood_peaks(LikelihoodGrid(s, v)) == 1
