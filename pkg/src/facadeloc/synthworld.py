"""Synthetic maps and observations with known ground truth.

Maps are packed rectangles; observations are rendered from a pose with the
occluding projector, optionally perturbed in observation space (degrees
and columns).  Everything is driven by a single seeded generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from shapely.geometry import Polygon

from .identity import CorrespondenceSet, PixelIdentityField, field_from_columns
from .mapdata import BuildingMap, edge_arrays, make_building, point_in_polygon
from .projection import Pose, _occlude, project_edges, project_map, ray_depths
from .scene import BUILDING, ROAD, SKY, CameraIntrinsics, ObservedFacade, SceneModel, SemanticLabelMap, \
    per_column_estimates


@dataclass(frozen=True)
class NoiseConfig:
    theta_sigma_deg: float = 0.0
    extent_sigma_cols: float = 0.0
    dropout_prob: float = 0.0
    identity_flip_prob: float = 0.0

    def __post_init__(self):
        if self.theta_sigma_deg < 0 or self.extent_sigma_cols < 0:
            raise ValueError("noise sigmas must be >= 0")
        for p in (self.dropout_prob, self.identity_flip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("noise probabilities must lie in [0, 1]")


NOISE_PROFILES = {
    "none": NoiseConfig(),
    "low": NoiseConfig(theta_sigma_deg=2.0, extent_sigma_cols=2.0, dropout_prob=0.05, identity_flip_prob=0.05),
    "high": NoiseConfig(theta_sigma_deg=6.0, extent_sigma_cols=6.0, dropout_prob=0.15, identity_flip_prob=0.15),
}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_buildings: int = 20
    size_range_m: tuple[float, float] = (15.0, 45.0)
    extent_m: float = 500.0
    min_separation_m: float = 15.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    max_tries: int = 2000


# image geometry of rendered views
IMAGE_HEIGHT = 60
HORIZON_ROW = 36
CAMERA_HEIGHT_M = 1.6
BUILDING_HEIGHT_M = 12.0

DEFAULT_INTRINSICS = CameraIntrinsics(width_cols=400, hfov_deg=60.0)


def _rectangle(cx, cy, w, d, ang_deg):
    a = math.radians(ang_deg)
    ux, uy = math.cos(a), math.sin(a)
    vx, vy = -uy, ux
    hw, hd = w / 2.0, d / 2.0
    return [(cx - hw * ux - hd * vx, cy - hw * uy - hd * vy),
            (cx + hw * ux - hd * vx, cy + hw * uy - hd * vy),
            (cx + hw * ux + hd * vx, cy + hw * uy + hd * vy),
            (cx - hw * ux + hd * vx, cy - hw * uy + hd * vy)]


def generate_map(cfg: SynthConfig) -> BuildingMap:
    """Random rectangle footprints, half axis-aligned and half rotated."""
    rng = np.random.default_rng(cfg.seed)
    lo_s, hi_s = cfg.size_range_m
    if cfg.n_buildings and hi_s > cfg.extent_m:
        raise ValueError("building size exceeds the map extent")
    placed: list[Polygon] = []
    buildings = []
    for k in range(cfg.n_buildings):
        for _ in range(cfg.max_tries):
            w, d = rng.uniform(lo_s, hi_s, size=2)
            ang = 0.0 if rng.random() < 0.5 else float(rng.uniform(0.0, 90.0))
            r = math.hypot(w, d) / 2.0
            cx, cy = rng.uniform(r, cfg.extent_m - r, size=2)
            poly = _rectangle(cx, cy, w, d, ang)
            shp = Polygon(poly)
            if all(shp.distance(other) >= cfg.min_separation_m for other in placed):
                placed.append(shp)
                buildings.append(make_building(f"B{k:02d}", poly))
                break
        else:
            raise ValueError(f"could not place building {k} after {cfg.max_tries} tries; packing infeasible")
    return BuildingMap(tuple(buildings))


def visible_surface(bmap: BuildingMap, pose: Pose, intr: CameraIntrinsics):
    """Per-column nearest surface: (building index or -1, forward depth, world point).

    Columns hit nothing where the index is -1; depth is inf and points NaN there.
    """
    W = intr.width_cols
    segments, bidx, _ = edge_arrays(bmap)
    bld = np.full(W, -1)
    depth = np.full(W, np.inf)
    pts = np.full((W, 2), np.nan)
    if len(segments) == 0:
        return bld, depth, pts
    batch = project_edges(segments, bidx, pose.x, pose.y, [pose.gamma_deg], intr)
    idx = np.nonzero(batch.valid[0])[0]
    if len(idx) == 0:
        return bld, depth, pts
    g = math.radians(pose.gamma_deg)
    r = np.array([math.cos(g), -math.sin(g)])
    f = np.array([math.sin(g), math.cos(g)])
    for e, lo, hi, _ in _occlude(batch, 0, idx, intr):
        cols = np.arange(lo, hi)
        seg = batch.seg_cam[0, e][None]
        z, s = ray_depths(seg, cols + 0.5, intr)
        cam = seg[0, 0] + s[0][:, None] * (seg[0, 1] - seg[0, 0])
        bld[cols] = bidx[e]
        depth[cols] = z[0]
        pts[cols] = np.array([pose.x, pose.y]) + cam[:, :1] * r + cam[:, 1:] * f
    return bld, depth, pts


def _column_rows(depth: np.ndarray, intr: CameraIntrinsics, height: int, horizon: int):
    with np.errstate(divide="ignore"):
        top = horizon - intr.focal_cols * (BUILDING_HEIGHT_M - CAMERA_HEIGHT_M) / depth
        bottom = horizon + intr.focal_cols * CAMERA_HEIGHT_M / depth
    top = np.clip(np.floor(top), 0, height).astype(int)
    bottom = np.clip(np.ceil(bottom), 0, height).astype(int)
    return top, bottom


def render_scene(bmap: BuildingMap, pose: Pose, intr: CameraIntrinsics = DEFAULT_INTRINSICS,
                 noise: NoiseConfig = NoiseConfig(), rng: Optional[np.random.Generator] = None,
                 with_identity: bool = True, height: int = IMAGE_HEIGHT) -> tuple[SceneModel, PixelIdentityField]:
    """Observed scene at ``pose`` and its ground-truth pixel identities.

    The renderer always occludes.  In noiseless mode the facades are exactly
    the occluded projection.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    W = intr.width_cols
    horizon = int(round(height * HORIZON_ROW / IMAGE_HEIGHT))
    bld, depth, _ = visible_surface(bmap, pose, intr)
    top, bottom = _column_rows(depth, intr, height, horizon)
    rows = np.arange(height)[:, None]
    mask = (bld[None, :] >= 0) & (rows >= top[None, :]) & (rows < bottom[None, :])
    labels = np.where(rows < horizon, SKY, ROAD).astype(np.uint8) * np.ones((1, W), dtype=np.uint8)
    labels[mask] = BUILDING
    seg = SemanticLabelMap(labels)

    ids = bmap.ids
    col_dist = np.zeros((W, len(ids)))
    hit = bld >= 0
    col_dist[np.nonzero(hit)[0], bld[hit]] = 1.0
    truth = field_from_columns(seg.building_mask, col_dist, ids)
    used = sorted({ids[b] for b in bld[hit]})
    truth = PixelIdentityField(W, height, used, truth.probs[:, :, [ids.index(b) for b in used]] if used else None)

    facades = []
    for z in project_map(bmap, pose, intr, occlusion=True):
        if noise.dropout_prob and rng.random() < noise.dropout_prob:
            continue
        theta, lo, hi, b = z.theta_deg, z.start_col, z.end_col, z.building
        if noise.theta_sigma_deg:
            theta = float((theta + rng.normal(0.0, noise.theta_sigma_deg)) % 180.0)
            theta = 0.0 if theta >= 180.0 else theta
        if noise.extent_sigma_cols:
            lo = int(np.clip(lo + round(rng.normal(0.0, noise.extent_sigma_cols)), 0, W))
            hi = int(np.clip(hi + round(rng.normal(0.0, noise.extent_sigma_cols)), 0, W))
            if hi <= lo:
                continue
        if noise.identity_flip_prob and len(ids) > 1 and rng.random() < noise.identity_flip_prob:
            others = [i for i in ids if i != b]
            b = others[int(rng.integers(len(others)))]
        facades.append(ObservedFacade(lo, hi, theta, {b: 1.0} if with_identity else None))
    pct = per_column_estimates(facades, seg, W)
    return SceneModel(intr, tuple(facades), pct, seg), truth


def strip_identity(scene: SceneModel) -> SceneModel:
    return scene.with_facades([replace(f, identity_dist=None) for f in scene.facades])


def distinct_orientations(facades: Sequence, min_sep_deg: float = 20.0) -> int:
    """Greedy count of facade angles separated by at least ``min_sep_deg`` (mod 180)."""
    kept: list[float] = []
    for f in facades:
        t = f.theta_deg
        if all(min(abs(t - k) % 180.0, 180.0 - abs(t - k) % 180.0) >= min_sep_deg for k in kept):
            kept.append(t)
    return len(kept)


def free_location(bmap: BuildingMap, x: float, y: float, clearance_m: float = 0.0) -> bool:
    if any(point_in_polygon(np.array([x]), np.array([y]), b.polygon)[0] for b in bmap.buildings):
        return False
    if clearance_m > 0:
        from shapely.geometry import Point
        p = Point(x, y)
        return all(Polygon(b.polygon).distance(p) >= clearance_m for b in bmap.buildings)
    return True


def sample_pose(bmap: BuildingMap, rng: np.random.Generator, intr: CameraIntrinsics = DEFAULT_INTRINSICS,
                grid_spacing_m: Optional[float] = None, orientation_step_deg: Optional[float] = None,
                min_facades: int = 1, min_distinct: int = 1, max_nearest_m: float = 60.0,
                clearance_m: float = 2.0, extent_m: Optional[float] = None, max_tries: int = 5000) -> Pose:
    """Random free pose seeing enough facades, optionally snapped to a grid."""
    xmin, ymin, xmax, ymax = bmap.bounds
    if extent_m is not None:
        xmin, ymin, xmax, ymax = 0.0, 0.0, extent_m, extent_m
    for _ in range(max_tries):
        x, y = rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)
        g = rng.uniform(0.0, 360.0)
        if grid_spacing_m:
            x = round(x / grid_spacing_m) * grid_spacing_m
            y = round(y / grid_spacing_m) * grid_spacing_m
        if orientation_step_deg:
            g = (round(g / orientation_step_deg) * orientation_step_deg) % 360.0
        if not free_location(bmap, x, y, clearance_m):
            continue
        pose = Pose(float(x), float(y), float(g))
        Z = project_map(bmap, pose, intr, occlusion=True)
        if len(Z) < min_facades or distinct_orientations(Z) < min_distinct:
            continue
        if min(z.distance_m for z in Z) > max_nearest_m:
            continue
        return pose
    raise ValueError("no admissible pose found")


# -- query-side simulation -------------------------------------------------------

def _project_points(pts: np.ndarray, pose: Pose, intr: CameraIntrinsics):
    g = math.radians(pose.gamma_deg)
    d = pts - (pose.x, pose.y)
    X = d[:, 0] * math.cos(g) - d[:, 1] * math.sin(g)
    Z = d[:, 0] * math.sin(g) + d[:, 1] * math.cos(g)
    with np.errstate(divide="ignore", invalid="ignore"):
        col = intr.cx + intr.focal_cols * X / Z
    ok = (Z > 1e-6) & (np.abs(X) <= intr.half_fov_tan * Z)
    return col, Z, ok


def simulate_correspondences(bmap: BuildingMap, query_pose: Pose, query_mask: np.ndarray,
                             refs: dict[str, tuple[Pose, np.ndarray]], intr: CameraIntrinsics,
                             rng: np.random.Generator, n_matches: int = 40,
                             outlier_prob: float = 0.2, query_name: str = "query") -> CorrespondenceSet:
    """Feature matches from query building pixels into each reference view.

    Inliers come from surface points visible in both views; a fraction
    ``outlier_prob`` of matches lands on a random building pixel of the
    reference instead.  ``refs`` maps a reference id to (pose, building mask).
    """
    height = query_mask.shape[0]
    horizon = int(round(height * HORIZON_ROW / IMAGE_HEIGHT))
    qb, qdepth, qpts = visible_surface(bmap, query_pose, intr)
    qr, qc = np.nonzero(query_mask & (qb >= 0)[None, :])
    entries = []
    for ref_id in sorted(refs):
        rpose, rmask = refs[ref_id]
        rb, rdepth, _ = visible_surface(bmap, rpose, intr)
        rrows, rcols = np.nonzero(rmask)
        matches = []
        if len(qc) and len(rcols):
            pick = rng.permutation(len(qc))[: 4 * n_matches]
            for i in pick:
                if len(matches) >= n_matches:
                    break
                c, r = qc[i], qr[i]
                if rng.random() < outlier_prob:
                    j = int(rng.integers(len(rcols)))
                    matches.append((int(c), int(r), int(rcols[j]), int(rrows[j])))
                    continue
                col, z, ok = _project_points(qpts[c][None], rpose, intr)
                if not ok[0]:
                    continue
                rc = int(np.floor(col[0]))
                if not 0 <= rc < intr.width_cols or abs(rdepth[rc] - z[0]) > 0.5 + 0.02 * z[0]:
                    continue
                h = (horizon - (r + 0.5)) * qdepth[c] / intr.focal_cols
                rr = int(np.floor(horizon - h * intr.focal_cols / z[0]))
                if 0 <= rr < rmask.shape[0] and rmask[rr, rc]:
                    matches.append((int(c), int(r), rc, rr))
        entries.append((ref_id, matches))
    return CorrespondenceSet(query_name, entries)


def simulate_retrieval(corr: CorrespondenceSet, rng: np.random.Generator, noise: float = 0.3) -> list[str]:
    """Rank references by match count perturbed with log-normal noise."""
    scores = [(len(m) * float(np.exp(rng.normal(0.0, noise))), ref) for ref, m in corr.entries]
    scores.sort(key=lambda t: (-t[0], t[1]))
    return [ref for _, ref in scores]
