import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import raycast_columns

from facadeloc.mapdata import BuildingMap, make_building
from facadeloc.projection import Pose, bearing_to_pixel, pixel_to_bearing, project_map
from facadeloc.scene import CameraIntrinsics, facade_angle_from_vp
from facadeloc.synthworld import SynthConfig, free_location, generate_map

INTR = CameraIntrinsics(100, 90.0)


def wall_map(*walls):
    """Thin buildings whose south face is the given segment."""
    out = []
    for k, ((x0, y0), (x1, y1)) in enumerate(walls):
        out.append(make_building(f"W{k}", [(x0, y0), (x1, y1), (x1, y1 + 0.5), (x0, y0 + 0.5)]))
    return BuildingMap(tuple(out))


def test_fronto_parallel_example():
    z = project_map(wall_map(((-5, 10), (5, 10))), Pose(0, 0, 0), INTR)
    assert len(z) == 1
    assert (z[0].start_col, z[0].end_col) == (25, 75)
    assert z[0].theta_deg == pytest.approx(0.0, abs=1e-9)
    assert z[0].distance_m == pytest.approx(math.sqrt(125.0))
    assert z[0].building == "W0"


def test_behind_camera_excluded():
    assert project_map(wall_map(((-5, -10), (5, -10))), Pose(0, 0, 0), INTR) == []


def test_back_face_culled():
    # camera north of the wall sees only the north face of the thin building
    z = project_map(wall_map(((-5, 10), (5, 10))), Pose(0, 20, 180), INTR)
    assert len(z) == 1
    assert z[0].distance_m == pytest.approx(math.hypot(5, 9.5))


def test_occlusion_trims_far_edge():
    bmap = wall_map(((-5, 10), (5, 10)), ((-4, 20), (4, 20)))
    z = project_map(bmap, Pose(0, 0, 0), INTR, occlusion=False)
    assert sorted((f.start_col, f.end_col) for f in z) == [(25, 75), (40, 60)]
    z = project_map(bmap, Pose(0, 0, 0), INTR, occlusion=True)
    assert [(f.building, f.start_col, f.end_col) for f in z] == [("W0", 25, 75)]


def test_edge_crossing_border_is_clipped():
    z = project_map(wall_map(((-50, 10), (5, 10))), Pose(0, 0, 0), INTR)
    assert (z[0].start_col, z[0].end_col) == (0, 75)
    # the near endpoint (-4, 2) lies outside the FOV; distance uses the clipped point on X = -Z
    z = project_map(wall_map(((-4, 2), (10, 10))), Pose(0, 0, 0), INTR)
    t = 2.0 / 22.0
    assert z[0].distance_m == pytest.approx(math.hypot(-4 + 14 * t, 2 + 8 * t))


def test_theta_matches_vp_convention():
    # a facade receding along the optical axis and one at 45 degrees in camera coordinates
    intr = CameraIntrinsics(400, 120.0)
    z = project_map(BuildingMap((make_building("A", [(3, 10), (3, 30), (2, 30), (2, 10)]),)), Pose(0, 0, 0), intr)
    assert z[0].theta_deg == pytest.approx(facade_angle_from_vp(intr.cx, intr))
    diag = BuildingMap((make_building("D", [(2, 6), (8, 12), (7, 13), (1, 7)]),))
    z = project_map(diag, Pose(0, 0, 0), intr)
    # the (1, 1) direction vanishes at cx + f
    assert z[0].theta_deg == pytest.approx(facade_angle_from_vp(intr.cx + intr.focal_cols, intr))


def test_bearing_examples():
    assert pixel_to_bearing(50, INTR) == 0.0
    assert bearing_to_pixel(math.degrees(math.atan(0.5)), INTR) == pytest.approx(75.0)
    with pytest.raises(ValueError):
        bearing_to_pixel(46.0, INTR)


def test_bearing_round_trip():
    rng = np.random.default_rng(0)
    err = 0.0
    for b in rng.uniform(-44.999, 44.999, 1000):
        err = max(err, abs(pixel_to_bearing(bearing_to_pixel(b, INTR), INTR) - b))
    assert err < 1e-9


def column_owners(facades, width):
    out = [[] for _ in range(width)]
    for f in facades:
        for c in range(f.start_col, f.end_col):
            out[c].append(f)
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 360, exclude_max=True))
def test_projection_matches_raycast(seed, gamma):
    bmap = generate_map(SynthConfig(seed=seed % 50, n_buildings=6, extent_m=150.0, min_separation_m=8.0))
    rng = np.random.default_rng(seed)
    while True:
        x, y = rng.uniform(-20, 170, 2)
        if free_location(bmap, x, y, 0.5):
            break
    intr = CameraIntrinsics(120, 70.0)
    polys = [[list(p) for p in b.polygon] for b in bmap.buildings]
    hits = raycast_columns(polys, x, y, gamma, intr.width_cols, intr.hfov_deg)
    edge_bld = [b.id for b in bmap.buildings for _ in b.polygon]

    plain = column_owners(project_map(bmap, Pose(x, y, gamma), intr), intr.width_cols)
    for c in range(intr.width_cols):
        assert sorted(f.building for f in plain[c]) == sorted(edge_bld[k] for k, _ in hits[c])

    occ = column_owners(project_map(bmap, Pose(x, y, gamma), intr, occlusion=True), intr.width_cols)
    for c in range(intr.width_cols):
        assert len(occ[c]) <= 1
        if hits[c]:
            k, _ = min(hits[c], key=lambda h: h[1])
            assert [f.building for f in occ[c]] == [edge_bld[k]]
        else:
            assert occ[c] == []


def test_extents_within_image():
    bmap = generate_map(SynthConfig(seed=4, n_buildings=10))
    intr = CameraIntrinsics(200, 60.0)
    rng = np.random.default_rng(1)
    for _ in range(50):
        pose = Pose(*rng.uniform(0, 500, 2), rng.uniform(0, 360))
        for f in project_map(bmap, pose, intr):
            assert 0 <= f.start_col < f.end_col <= 200
            assert f.distance_m > 0
            assert 0.0 <= f.theta_deg < 180.0


def test_rotation_shifts_bearings():
    bmap = wall_map(((-3, 30), (3, 30)))
    intr = CameraIntrinsics(1000, 90.0)
    a = project_map(bmap, Pose(0, 0, 0), intr)[0]
    b = project_map(bmap, Pose(0, 0, 10.0), intr)[0]
    centre = lambda f: pixel_to_bearing((f.start_col + f.end_col) / 2.0, intr)
    assert centre(b) - centre(a) == pytest.approx(-10.0, abs=0.2)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_translation_invariance(dx, dy):
    walls = [((-5, 10), (5, 10)), ((8, 15), (12, 25)), ((-20, 30), (-6, 18))]
    a = project_map(wall_map(*walls), Pose(0, 0, 20), INTR)
    moved = [((x0 + dx, y0 + dy), (x1 + dx, y1 + dy)) for (x0, y0), (x1, y1) in walls]
    b = project_map(wall_map(*moved), Pose(dx, dy, 20), INTR)
    assert [(f.building, f.start_col, f.end_col) for f in a] == [(f.building, f.start_col, f.end_col) for f in b]
    for fa, fb in zip(a, b):
        assert fb.theta_deg == pytest.approx(fa.theta_deg, abs=1e-6)
        assert fb.distance_m == pytest.approx(fa.distance_m, rel=1e-6)


def test_pose_normalization():
    assert Pose(0, 0, -90).gamma_deg == 270.0
    assert Pose(0, 0, 720).gamma_deg == 0.0
